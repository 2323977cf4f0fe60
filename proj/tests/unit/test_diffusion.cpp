#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dali/diffusion.hpp"
#include "dali/ops.hpp"

using namespace dali;
using namespace dali::model;
using num::DType;
using num::PrecisionScope;

namespace {

class Diffusion : public ::testing::Test {
 protected:
  PrecisionScope precision{DType::f64};
};

UNetConfig toy_unet() {
  UNetConfig c;
  c.latent_channels = 2;
  c.base_channels = 4;
  c.multipliers = {1, 2};
  c.attention = {true, true};
  c.d_attn = 4;
  c.d_L = 3;
  c.time_dim = 8;
  return c;
}

// Symbolic expansion of the reverse step.
double step_oracle(double x, double a, double ab, double eps, double sigma, double z) {
  return x / std::sqrt(a) - (1 - a) * eps / (std::sqrt(a) * std::sqrt(1 - ab)) + sigma * z;
}

}  // namespace

TEST_F(Diffusion, ScheduleExamples) {
  const auto one = schedule_from_betas({0.5});
  EXPECT_EQ(one.alpha_bar, std::vector<double>{0.5});
  const auto two = schedule_from_betas({0.1, 0.2});
  EXPECT_NEAR(two.alpha_bar_at(1), 0.9, 1e-15);
  EXPECT_NEAR(two.alpha_bar_at(2), 0.72, 1e-15);
  const auto s = make_schedule(1000, 1e-4, 0.02);
  EXPECT_DOUBLE_EQ(s.beta_at(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta_at(1000), 0.02);
  double prod = 1;
  for (int t = 1; t <= s.T; ++t) {
    prod *= s.alpha_at(t);
    EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-12);
    EXPECT_NEAR(s.sigma_at(t), std::sqrt(s.beta_at(t)), 1e-15);
    if (t > 1) {
      EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
      EXPECT_EQ(s.alpha_bar_at(t), s.alpha_at(t) * s.alpha_bar_at(t - 1));
    }
  }
  EXPECT_THROW(make_schedule(0), RangeError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.1), RangeError);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), RangeError);
}

TEST_F(Diffusion, StridedRespacing) {
  EXPECT_EQ(strided_timesteps(10, 5), (std::vector<int>{1, 3, 5, 7, 9}));
  EXPECT_EQ(strided_timesteps(4, 4), (std::vector<int>{1, 2, 3, 4}));
  EXPECT_THROW(strided_timesteps(10, 0), RangeError);
  EXPECT_THROW(strided_timesteps(10, 11), RangeError);
  const auto s = make_schedule(100);
  const auto taus = strided_timesteps(100, 10);
  const auto r = respace(s, taus);
  for (int i = 1; i <= r.T; ++i) EXPECT_EQ(r.alpha_bar_at(i), s.alpha_bar_at(taus[i - 1]));
  EXPECT_EQ(r.alpha_at(1), s.alpha_at(1));
  // Full-length respacing is the schedule itself.
  const auto full = respace(s, strided_timesteps(100, 100));
  EXPECT_EQ(full.alpha, s.alpha);
  EXPECT_EQ(full.sigma, s.sigma);
}

TEST_F(Diffusion, ForwardNoiseLimits) {
  Rng rng(1);
  const Tensor x0 = Tensor::randn({2, 1, 2, 2}, rng);
  const Tensor eps = Tensor::randn({2, 1, 2, 2}, rng);
  const auto clean = schedule_from_betas({0.0, 0.5});
  EXPECT_EQ(forward_noise(x0, 1, eps, clean).to_vector(), x0.to_vector());
  const auto s = make_schedule(50);
  const auto xt = forward_noise(Tensor::zeros({2, 1, 2, 2}), 30, eps, s).to_vector();
  for (std::size_t i = 0; i < xt.size(); ++i)
    EXPECT_DOUBLE_EQ(xt[i], std::sqrt(1 - s.alpha_bar_at(30)) * eps.at(i));
  EXPECT_THROW(forward_noise(x0, 0, eps, s), RangeError);
  EXPECT_THROW(forward_noise(x0, 51, eps, s), RangeError);
}

TEST_F(Diffusion, ForwardNoiseVarianceMonteCarlo) {
  const auto s = make_schedule(1000);
  Rng rng(2);
  const int t = 400;
  const Tensor x0 = Tensor::full({10000, 1, 1, 1}, 0.8);
  const auto xt = forward_noise(x0, t, Tensor::randn({10000, 1, 1, 1}, rng), s).to_vector();
  double mean = 0, sq = 0;
  for (double v : xt) mean += v;
  mean /= xt.size();
  for (double v : xt) sq += (v - mean) * (v - mean);
  EXPECT_NEAR(sq / (xt.size() - 1) / (1 - s.alpha_bar_at(t)), 1.0, 0.05);
}

TEST_F(Diffusion, AttentionSingleKeyCollapse) {
  Rng rng(3);
  const Tensor x = Tensor::randn({5, 3}, rng);
  const Tensor L = Tensor::randn({1, 4}, rng);
  const Tensor wq = Tensor::randn({3, 2}, rng), wk = Tensor::randn({4, 2}, rng),
               wv = Tensor::randn({4, 2}, rng);
  const auto out = cross_attention(x, L, wq, wk, wv);
  const auto v = num::matmul(L, wv).to_vector();
  for (int n = 0; n < 5; ++n)
    for (int d = 0; d < 2; ++d) EXPECT_EQ(out.at(n * 2 + d), v[d]);
}

TEST_F(Diffusion, AttentionIdenticalKeysGiveThatValue) {
  Rng rng(4);
  const Tensor row = Tensor::randn({1, 3}, rng);
  const Tensor L = num::concat({row, row, row}, 0);
  const Tensor x = Tensor::randn({4, 2}, rng);
  const Tensor wq = Tensor::randn({2, 2}, rng), wk = Tensor::randn({3, 2}, rng),
               wv = Tensor::randn({3, 2}, rng);
  const auto out = cross_attention(x, L, wq, wk, wv);
  const auto v = num::matmul(row, wv).to_vector();
  for (int n = 0; n < 4; ++n)
    for (int d = 0; d < 2; ++d) EXPECT_NEAR(out.at(n * 2 + d), v[d], 1e-14);
}

TEST_F(Diffusion, AttentionHandComputed) {
  // Q = x (W_Q = I), K = L (W_K = I), V = L W_V, d_attn = 2.
  const Tensor x = Tensor::from_vector({2, 2}, {1, 0, 0, 2});
  const Tensor L = Tensor::from_vector({2, 2}, {1, 1, 0, 1});
  const Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  const Tensor wv = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  const auto out = cross_attention(x, L, eye, eye, wv);
  // V rows: (4, 6) and (3, 4). Scores / sqrt 2: token 1 (1, 0), token 2 (2, 2).
  const double r = 1 / std::sqrt(2.0);
  const double p1 = std::exp(r) / (std::exp(r) + 1);
  EXPECT_NEAR(out.at(0), p1 * 4 + (1 - p1) * 3, 1e-14);
  EXPECT_NEAR(out.at(1), p1 * 6 + (1 - p1) * 4, 1e-14);
  EXPECT_NEAR(out.at(2), 3.5, 1e-14);
  EXPECT_NEAR(out.at(3), 5.0, 1e-14);
}

TEST_F(Diffusion, AttentionWeightsAreRowStochasticAndConvex) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 1 + static_cast<int>(rng.below(6)), n = 1 + static_cast<int>(rng.below(5));
    const Tensor x = Tensor::randn({n, 3}, rng, 2.0);
    const Tensor L = Tensor::randn({k, 4}, rng, 2.0);
    const Tensor wq = Tensor::randn({3, 5}, rng), wk = Tensor::randn({4, 5}, rng),
                 wv = Tensor::randn({4, 2}, rng);
    const auto out = cross_attention(x, L, wq, wk, wv);
    const auto v = num::matmul(L, wv).to_vector();
    for (int d = 0; d < 2; ++d) {
      double lo = 1e300, hi = -1e300;
      for (int j = 0; j < k; ++j) lo = std::min(lo, v[j * 2 + d]), hi = std::max(hi, v[j * 2 + d]);
      for (int i = 0; i < n; ++i) {
        EXPECT_GE(out.at(i * 2 + d), lo - 1e-12);
        EXPECT_LE(out.at(i * 2 + d), hi + 1e-12);
      }
    }
    // Weights recovered through one-hot values sum to one.
    const Tensor eye = Tensor::from_vector(
        {k, k}, [&] {
          std::vector<double> e(k * k, 0.0);
          for (int j = 0; j < k; ++j) e[j * k + j] = 1;
          return e;
        }());
    const Tensor w = cross_attention(x, eye, wq, Tensor::randn({k, 5}, rng), Tensor::full({k, 1}, 1.0));
    for (int i = 0; i < n; ++i) EXPECT_NEAR(w.at(i), 1.0, 1e-6);
  }
}

TEST_F(Diffusion, AttentionKeyPermutationInvariance) {
  Rng rng(6);
  const Tensor x = Tensor::randn({3, 2}, rng);
  const Tensor L = Tensor::randn({4, 3}, rng);
  const Tensor wq = Tensor::randn({2, 2}, rng), wk = Tensor::randn({3, 2}, rng),
               wv = Tensor::randn({3, 2}, rng);
  const Tensor swapped = num::index_rows(L, {2, 1, 0, 3});
  const auto a = cross_attention(x, L, wq, wk, wv).to_vector();
  const auto b = cross_attention(x, swapped, wq, wk, wv).to_vector();
  EXPECT_EQ(a, b);
  const Tensor reversed = num::index_rows(L, {3, 2, 1, 0});
  EXPECT_EQ(a, cross_attention(x, reversed, wq, wk, wv).to_vector());
}

TEST_F(Diffusion, AttentionShapeErrors) {
  EXPECT_THROW(cross_attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 2}),
                               Tensor::zeros({4, 2}), Tensor::zeros({4, 2})),
               ShapeError);
}

TEST_F(Diffusion, UNetShapeAndConditioningAblation) {
  const UNetConfig cfg = toy_unet();
  ParamStore ps;
  Rng rng(7);
  init_unet(ps, cfg, rng);
  const Tensor x = Tensor::randn({2, 2, 4, 4}, rng);
  const Tensor L1 = Tensor::randn({2, 3, 3}, rng), L2 = Tensor::randn({2, 3, 3}, rng);
  const Tensor e1 = predict_noise(ps, cfg, x, {5, 9}, L1);
  EXPECT_EQ(e1.shape(), x.shape());
  EXPECT_NE(e1.to_vector(), predict_noise(ps, cfg, x, {5, 9}, L2).to_vector());
  for (const auto& n : ps.names())
    if (n.find(".attn.out.weight") != std::string::npos)
      for (auto& v : ps.get(n).mutable_data<double>()) v = 0;
  EXPECT_EQ(predict_noise(ps, cfg, x, {5, 9}, L1).to_vector(),
            predict_noise(ps, cfg, x, {5, 9}, L2).to_vector());
  EXPECT_THROW(predict_noise(ps, cfg, Tensor::zeros({1, 2, 3, 4}), {1}, L1), ShapeError);
}

TEST_F(Diffusion, UNetGradientCheck) {
  const UNetConfig cfg = toy_unet();
  ParamStore ps;
  Rng rng(8);
  init_unet(ps, cfg, rng);
  const Tensor x = Tensor::randn({1, 2, 4, 4}, rng);
  const Tensor L = Tensor::randn({1, 2, 3}, rng);
  const Tensor eps = Tensor::randn({1, 2, 4, 4}, rng);
  std::vector<Tensor> params;
  for (const auto& n : ps.names()) params.push_back(ps.get(n));
  auto f = [&] { return num::mse_loss(predict_noise(ps, cfg, x, {17}, L), eps); };
  EXPECT_LT(num::grad_check(f, params), 1e-4);
}

TEST_F(Diffusion, ReverseStepAlgebra) {
  // alpha = 1, sigma = 0: identity.
  const auto id = schedule_from_betas({0.1, 0.0});
  EXPECT_EQ(ddpm_step(0.37, 2, 5.0, id, 9.0), 0.37);
  // Plug-in example with alpha_t = 0.99 and alpha_bar_t = 0.9.
  NoiseSchedule s;
  s.T = 2;
  s.alpha = {0.9 / 0.99, 0.99};
  s.alpha_bar = {0.9 / 0.99, 0.9};
  s.beta = {1 - s.alpha[0], 1 - s.alpha[1]};
  s.sigma = {0.0, 0.0};
  EXPECT_NEAR(ddpm_step(1.0, 2, 0.5, s, 0.0),
              (1 / std::sqrt(0.99)) * (1 - (0.01 / std::sqrt(0.1)) * 0.5), 1e-12);
  // Random scalars against the expanded oracle.
  const auto sch = make_schedule(1000);
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const int t = 2 + static_cast<int>(rng.below(999));
    const double x = rng.normal(), e = rng.normal(), z = rng.normal();
    EXPECT_NEAR(ddpm_step(x, t, e, sch, z),
                step_oracle(x, sch.alpha_at(t), sch.alpha_bar_at(t), e, sch.sigma_at(t), z), 1e-12);
  }
  EXPECT_THROW(ddpm_step(0.0, 0, 0.0, sch, 0.0), RangeError);
}

TEST_F(Diffusion, FinalStepRecoversX0WithTrueNoise) {
  const auto s = make_schedule(1000);
  Rng rng(10);
  const Tensor x0 = Tensor::randn({1, 4, 3, 3}, rng);
  const Tensor eps = Tensor::randn({1, 4, 3, 3}, rng);
  const Tensor x1 = forward_noise(x0, 1, eps, s);
  const auto back = ddpm_step(x1, 1, eps, s, Tensor::randn({1, 4, 3, 3}, rng)).to_vector();
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], x0.at(i), 1e-6);
}

TEST_F(Diffusion, GuidanceScaleOneIsConditionalSampling) {
  const auto s = make_schedule(200);
  Rng lrng(11);
  const Tensor L = Tensor::randn({1, 2, 3}, lrng);
  int uncond_calls = 0;
  NoisePredictor pred = [&](const Tensor& x, const std::vector<int>& t, const Tensor& l) {
    double lsum = 0;
    for (double v : l.to_vector()) lsum += v;
    if (lsum == 0.0) ++uncond_calls;
    return num::add_scalar(num::scale(x, 0.1 + 1e-4 * t[0]), 0.01 * lsum);
  };
  SamplerOptions opt{20, 1.0};
  Rng a(12), b(12);
  const auto guided = sample_loop({1, 1, 2, 2}, L, s, pred, opt, a).to_vector();
  EXPECT_EQ(uncond_calls, 0);
  // Reference: plain conditional ancestral sampling.
  const auto taus = strided_timesteps(200, 20);
  const auto r = respace(s, taus);
  Tensor x = Tensor::randn({1, 1, 2, 2}, b);
  for (int i = r.T; i >= 1; --i) {
    const Tensor eps = pred(x, {taus[i - 1]}, L);
    x = ddpm_step(x, i, eps, r, i > 1 ? Tensor::randn({1, 1, 2, 2}, b) : Tensor());
  }
  EXPECT_EQ(guided, x.to_vector());
  Rng c(12);
  opt.guidance_scale = 2.0;
  const auto strong = sample_loop({1, 1, 2, 2}, L, s, pred, opt, c).to_vector();
  EXPECT_EQ(uncond_calls, 20);
  EXPECT_NE(strong, guided);
  Rng d(12);
  opt.guidance_scale = 1.0;
  EXPECT_EQ(sample_loop({1, 1, 2, 2}, L, s, pred, opt, d).to_vector(), guided);
  opt.steps = 0;
  EXPECT_THROW(sample_loop({1, 1, 2, 2}, L, s, pred, opt, d), RangeError);
}

TEST_F(Diffusion, OracleSamplerHitsTheDataPoint) {
  // Perfect predictor for a point mass at x0 on a one-pixel latent.
  const auto s = make_schedule(1000);
  const double x0 = 0.75;
  NoisePredictor oracle = [&](const Tensor& x, const std::vector<int>& t, const Tensor&) {
    const double ab = s.alpha_bar_at(t[0]);
    return num::scale(num::add_scalar(x, -std::sqrt(ab) * x0), 1 / std::sqrt(1 - ab));
  };
  Rng rng(13);
  const auto out = sample_loop({1000, 1, 1, 1}, Tensor::zeros({1000, 1, 1}), s, oracle,
                               {1000, 1.0}, rng)
                       .to_vector();
  double mean = 0, sq = 0;
  for (double v : out) mean += v;
  mean /= out.size();
  for (double v : out) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / (out.size() - 1) / out.size());
  EXPECT_LE(std::abs(mean - x0), 3 * se + 1e-12);
}

TEST_F(Diffusion, TrainStepWithPerfectStubAndDropoutCounter) {
  const auto s = make_schedule(100);
  EncoderConfig ecfg{2, 3};
  ParamStore ps;
  Rng rng(14);
  init_encoder(ps, ecfg, rng);
  const Tensor x0 = Tensor::randn({4, 1, 2, 2}, rng);
  std::vector<data::CircuitParams> conds(4);
  for (auto& c : conds) c.clock_period = 4, c.utilization = 0.7, c.height = c.width = 16;
  // The stub recovers eps from x_t because it knows x0 and t.
  NoisePredictor stub = [&](const Tensor& xt, const std::vector<int>& t, const Tensor&) {
    std::vector<double> a, b;
    for (int v : t) {
      a.push_back(1 / std::sqrt(1 - s.alpha_bar_at(v)));
      b.push_back(-std::sqrt(s.alpha_bar_at(v)) / std::sqrt(1 - s.alpha_bar_at(v)));
    }
    return num::add(num::scale_leading(xt, a), num::scale_leading(x0, b));
  };
  DiffusionTrainOptions opt;
  opt.cond_dropout = 0.0;
  const auto stats = diffusion_train_step(ps, toy_unet(), ecfg, s, x0, conds, opt, rng, stub);
  EXPECT_NEAR(stats.loss, 0.0, 1e-20);
  EXPECT_EQ(stats.conditioned, 4);
  opt.cond_dropout = 1.0;
  EXPECT_EQ(diffusion_train_step(ps, toy_unet(), ecfg, s, x0, conds, opt, rng, stub).conditioned, 0);
  EXPECT_THROW(diffusion_train_step(ps, toy_unet(), ecfg, s, Tensor::zeros({0, 1, 2, 2}), {}, opt,
                                    rng, stub),
               ShapeError);
}

TEST_F(Diffusion, OverfittingFourLatentsHalvesTheLoss) {
  PrecisionScope f32(DType::f32);
  const auto s = make_schedule(1000);
  UNetConfig ucfg;
  ucfg.base_channels = 16;
  ucfg.d_attn = 16;
  ucfg.d_L = 8;
  ucfg.time_dim = 32;
  EncoderConfig ecfg{4, 8};
  ParamStore ps;
  Rng rng(15);
  init_encoder(ps, ecfg, rng);
  init_unet(ps, ucfg, rng);
  const Tensor x0 = Tensor::randn({4, 4, 4, 4}, rng);
  std::vector<data::CircuitParams> conds(4);
  for (int i = 0; i < 4; ++i) {
    conds[i].clock_period = 2 + i;
    conds[i].utilization = 0.6 + 0.1 * i;
    conds[i].height = conds[i].width = 32;
  }
  DiffusionTrainOptions opt;
  opt.lr = 2e-3;
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    Rng r = rng.split(static_cast<std::uint64_t>(step));
    losses.push_back(diffusion_train_step(ps, ucfg, ecfg, s, x0, conds, opt, r).loss);
  }
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) first += losses[i], last += losses[180 + i];
  EXPECT_LE(last, 0.5 * first);
}
