#include "selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>

#include "dali/diffusion.hpp"
#include "dali/heatmap.hpp"
#include "dali/metrics.hpp"
#include "dali/ops.hpp"
#include "dali/param_store.hpp"
#include "dali/vae.hpp"

namespace dali::cli {

using num::Tensor;

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

CheckResult within(const std::string& name, double value, double tol) {
  return {name, std::isfinite(value) && value <= tol, "max error " + fmt(value) + " (tol " + fmt(tol) + ")"};
}

CheckResult gradients() {
  num::PrecisionScope f64(num::DType::f64);
  Rng rng(11, 1);
  const Tensor x = Tensor::randn({2, 4, 5, 5}, rng).set_requires_grad();
  const Tensor w = Tensor::randn({3, 4, 3, 3}, rng, 0.3).set_requires_grad();
  const Tensor b = Tensor::randn({3}, rng).set_requires_grad();
  const Tensor wt = Tensor::randn({3, 2, 4, 4}, rng, 0.3).set_requires_grad();
  const Tensor g = Tensor::randn({3}, rng).set_requires_grad();
  const Tensor target = Tensor::randn({2, 2, 6, 6}, rng);
  double worst = 0;
  worst = std::max(worst, num::grad_check(
                              [&] {
                                Tensor h = num::conv2d(x, w, b, {2, 1});
                                h = num::silu(num::group_norm(h, 3, g, b));
                                h = num::conv_transpose2d(h, wt, Tensor(), {2, 1, 0});
                                return num::mse_loss(num::sigmoid(h), target);
                              },
                              {x, w, b, wt, g}));
  const Tensor q = Tensor::randn({3, 4}, rng).set_requires_grad();
  const Tensor k = Tensor::randn({5, 4}, rng).set_requires_grad();
  worst = std::max(worst, num::grad_check(
                              [&] {
                                const Tensor a = num::softmax(num::matmul(q, num::permute(k, {1, 0})), 1);
                                return num::sum(num::log(num::add_scalar(a, 1.0)));
                              },
                              {q, k}));
  return within("gradients (conv, group norm, transposed conv, softmax)", worst, 1e-4);
}

CheckResult schedule_identity() {
  const auto s = model::make_schedule();
  double worst = 0, prod = 1;
  for (int t = 1; t <= s.T; ++t) {
    prod *= 1.0 - s.beta_at(t);
    worst = std::max(worst, std::abs(prod - s.alpha_bar_at(t)));
  }
  return within("noise schedule cumulative product", worst, 1e-12);
}

CheckResult reverse_step() {
  const auto s = model::make_schedule();
  Rng rng(3, 0);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T)));
    const double x = rng.normal(), e = rng.normal(), z = rng.normal();
    const double a = s.alpha_at(t), ab = s.alpha_bar_at(t);
    const double expect = (x - (1 - a) / std::sqrt(1 - ab) * e) / std::sqrt(a) + (t > 1 ? s.sigma_at(t) * z : 0.0);
    worst = std::max(worst, std::abs(model::ddpm_step(x, t, e, s, z) - expect));
  }
  // A perfect predictor at t = 1 returns x0.
  const double x0 = 0.37, eps = -1.2;
  const double xt = std::sqrt(s.alpha_bar_at(1)) * x0 + std::sqrt(1 - s.alpha_bar_at(1)) * eps;
  const double recovery = std::abs(model::ddpm_step(xt, 1, eps, s, 5.0) - x0);
  return {"reverse step algebra and t = 1 recovery", worst <= 1e-12 && recovery <= 1e-6,
          "oracle error " + fmt(worst) + ", recovery error " + fmt(recovery)};
}

CheckResult attention() {
  num::PrecisionScope f64(num::DType::f64);
  Rng rng(5, 0);
  const Tensor x = Tensor::randn({6, 5}, rng), L = Tensor::randn({4, 3}, rng);
  const Tensor wq = Tensor::randn({5, 8}, rng), wk = Tensor::randn({3, 8}, rng);
  const Tensor wv = Tensor::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto out = model::cross_attention(x, L, wq, wk, wv).to_vector();
  const auto rows = L.to_vector();
  // V = L: every output row lies in the per-coordinate hull of L's rows.
  double worst = 0;
  for (int i = 0; i < 6; ++i)
    for (int c = 0; c < 3; ++c) {
      double lo = 1e300, hi = -1e300;
      for (int r = 0; r < 4; ++r) lo = std::min(lo, rows[r * 3 + c]), hi = std::max(hi, rows[r * 3 + c]);
      const double v = out[i * 3 + c];
      worst = std::max({worst, lo - v, v - hi});
    }
  return within("cross-attention convex hull", std::max(worst, 0.0), 1e-12);
}

CheckResult kl_zero() {
  num::PrecisionScope f64(num::DType::f64);
  model::VaePosterior p{Tensor::zeros({2, 4, 3, 3}), Tensor::zeros({2, 4, 3, 3})};
  const double kl = model::kl_divergence(p).item();
  return {"KL of the standard normal posterior", kl == 0.0, "KL = " + fmt(kl)};
}

CheckResult metric_identities(int workers) {
  Rng rng(8, 0);
  std::vector<std::vector<float>> maps(30, std::vector<float>(24 * 24));
  for (auto& m : maps)
    for (auto& v : m) v = static_cast<float>(rng.uniform());
  std::vector<metrics::MapRef> refs;
  for (const auto& m : maps) refs.push_back({m, 24, 24});
  const double self_ssim = metrics::ssim(refs[0], refs[0]).value;
  const double self_fid = metrics::fid(refs, refs);
  const auto pw = metrics::pairwise_ssim(refs, workers);
  const auto hf = metrics::hotspot_fraction(refs[1]);
  double middle = 0;
  for (float v : maps[1]) middle += (v >= 0.1f && v <= 0.9f);
  middle /= static_cast<double>(maps[1].size());
  const bool ok = std::abs(self_ssim - 1) <= 1e-9 && std::abs(self_fid) <= 1e-6 &&
                  pw.comparisons == 435 && std::abs(hf.hot + hf.low + middle - 1.0) <= 1e-12;
  return {"metric identities (ssim, fid, pair count, hotspot partition)", ok,
          "ssim " + fmt(self_ssim) + ", fid " + fmt(self_fid) + ", pairs " + std::to_string(pw.comparisons)};
}

CheckResult sample_round_trip() {
  Rng rng(21, 0);
  const auto s = data::make_toy_sample("selfcheck_0", 32, 32, rng);
  const auto dir = std::filesystem::temp_directory_path() /
                   ("dali_selfcheck_" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
  std::filesystem::create_directories(dir);
  data::save_sample(s, dir / "s.dpd");
  const auto back = data::load_sample(dir / "s.dpd");
  std::filesystem::remove_all(dir);
  auto r = s;
  for (int i = 0; i < 4; ++i) r = data::augment(r, 2);
  r.id = s.id;
  const bool ok = back == s && r.values == s.values;
  return {"sample file round trip and rotation cycle", ok, ok ? "identical" : "mismatch"};
}

}  // namespace

std::vector<CheckResult> run_selfcheck(int workers) {
  std::vector<std::function<CheckResult()>> checks = {
      gradients, schedule_identity, reverse_step, attention, kl_zero,
      [workers] { return metric_identities(workers); }, sample_round_trip};
  std::vector<CheckResult> out;
  for (const auto& c : checks) {
    try {
      out.push_back(c());
    } catch (const std::exception& e) {
      out.push_back({"(check threw)", false, e.what()});
    }
  }
  return out;
}

}  // namespace dali::cli
