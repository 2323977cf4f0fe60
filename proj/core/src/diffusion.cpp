#include "dali/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <numbers>

#include "dali/nn.hpp"
#include "dali/ops.hpp"
#include "dali/vae.hpp"

namespace dali::model {

using num::DType;

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule schedule_from_betas(const std::vector<double>& betas) {
  if (betas.empty()) throw RangeError("noise schedule needs T >= 1");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  double ab = 1.0;
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw RangeError("beta must lie in [0, 1)");
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    ab *= 1.0 - b;
    s.alpha_bar.push_back(ab);
    s.sigma.push_back(std::sqrt(b));
  }
  return s;
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw RangeError("noise schedule needs T >= 1");
  if (!(beta_start > 0 && beta_start < 1 && beta_end > 0 && beta_end < 1))
    throw RangeError("beta bounds must lie in (0, 1)");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i)
    betas[static_cast<std::size_t>(i)] =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
  return schedule_from_betas(betas);
}

std::vector<int> strided_timesteps(int T, int steps) {
  if (steps < 1) throw RangeError("sampler needs at least one step");
  if (steps > T) throw RangeError("sampler steps exceed the training schedule length");
  std::vector<int> taus(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i)
    taus[static_cast<std::size_t>(i)] =
        static_cast<int>(static_cast<std::int64_t>(i) * T / steps) + 1;
  return taus;
}

NoiseSchedule respace(const NoiseSchedule& s, const std::vector<int>& taus) {
  NoiseSchedule r;
  r.T = static_cast<int>(taus.size());
  double prev_ab = 1.0;
  int prev_t = 0;
  for (int t : taus) {
    if (t <= prev_t || t > s.T) throw RangeError("respace: timesteps must increase within 1..T");
    const double ab = s.alpha_bar_at(t);
    if (t == prev_t + 1) {
      r.alpha.push_back(s.alpha_at(t));
      r.beta.push_back(s.beta_at(t));
      r.sigma.push_back(s.sigma_at(t));
    } else {
      const double a = ab / prev_ab;
      r.alpha.push_back(a);
      r.beta.push_back(1.0 - a);
      r.sigma.push_back(std::sqrt(1.0 - a));
    }
    r.alpha_bar.push_back(ab);
    prev_ab = ab;
    prev_t = t;
  }
  return r;
}

Tensor forward_noise(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                     const NoiseSchedule& s) {
  if (static_cast<std::int64_t>(t.size()) != x0.dim(0))
    throw ShapeError("forward_noise: one timestep per batch item required");
  if (x0.shape() != eps.shape()) throw ShapeError("forward_noise: x0 and eps differ in shape");
  std::vector<double> a(t.size()), b(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 1 || t[i] > s.T) throw RangeError("forward_noise: t outside 1..T");
    a[i] = std::sqrt(s.alpha_bar_at(t[i]));
    b[i] = std::sqrt(1.0 - s.alpha_bar_at(t[i]));
  }
  return num::add(num::scale_leading(x0, a), num::scale_leading(eps, b));
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  return forward_noise(x0, std::vector<int>(static_cast<std::size_t>(x0.dim(0)), t), eps, s);
}

// ---------------------------------------------------------------------------
// Attention

namespace {

// Rows of each L[b] in lexicographic order. The attention sum is then formed
// in an order that does not depend on how the caller listed the keys.
Tensor canonical_keys(const Tensor& L) {
  const auto b = L.dim(0), k = L.dim(1), d = L.dim(2);
  const auto v = L.to_vector();
  std::vector<std::int64_t> rows(static_cast<std::size_t>(b * k));
  for (std::int64_t i = 0; i < b; ++i) {
    auto first = rows.begin() + i * k;
    std::iota(first, first + k, i * k);
    std::stable_sort(first, first + k, [&](std::int64_t x, std::int64_t y) {
      return std::lexicographical_compare(v.begin() + x * d, v.begin() + (x + 1) * d,
                                          v.begin() + y * d, v.begin() + (y + 1) * d);
    });
  }
  return num::reshape(num::index_rows(num::reshape(L, {b * k, d}), rows), {b, k, d});
}

}  // namespace

Tensor cross_attention(const Tensor& x, const Tensor& L, const Tensor& w_q, const Tensor& w_k,
                       const Tensor& w_v) {
  if (x.ndim() == 2 && L.ndim() == 2) {
    const Tensor out = cross_attention(num::reshape(x, {1, x.dim(0), x.dim(1)}),
                                       num::reshape(L, {1, L.dim(0), L.dim(1)}), w_q, w_k, w_v);
    return num::reshape(out, {out.dim(1), out.dim(2)});
  }
  if (x.ndim() != 3 || L.ndim() != 3 || x.dim(0) != L.dim(0))
    throw ShapeError("cross_attention: expected x [B,N,F] and L [B,k,d_L]");
  if (w_q.ndim() != 2 || w_k.ndim() != 2 || w_v.ndim() != 2 || w_q.dim(0) != x.dim(2) ||
      w_k.dim(0) != L.dim(2) || w_v.dim(0) != L.dim(2) || w_q.dim(1) != w_k.dim(1))
    throw ShapeError("cross_attention: projection shapes do not match the inputs");
  const Tensor q = nn::linear3(x, w_q, Tensor());
  const Tensor keys = canonical_keys(L);
  const Tensor k = nn::linear3(keys, w_k, Tensor());
  const Tensor v = nn::linear3(keys, w_v, Tensor());
  const double inv = 1.0 / std::sqrt(static_cast<double>(w_q.dim(1)));
  const Tensor scores = num::scale(num::bmm(q, num::permute(k, {0, 2, 1})), inv);
  return num::bmm(num::softmax(scores, 2), v);
}

// ---------------------------------------------------------------------------
// U-Net

namespace {

std::string key(const std::string& prefix, const std::string& name) { return prefix + "." + name; }

int level_channels(const UNetConfig& cfg, int i) {
  return cfg.base_channels * cfg.multipliers[static_cast<std::size_t>(i)];
}

bool has_attention(const UNetConfig& cfg, int i) {
  return static_cast<std::size_t>(i) < cfg.attention.size() &&
         cfg.attention[static_cast<std::size_t>(i)];
}

void init_attention(ParamStore& ps, const std::string& name, int channels, const UNetConfig& cfg,
                    Rng& rng) {
  nn::init_group_norm(ps, name + ".norm", channels);
  nn::init_linear(ps, name + ".q", channels + 2, cfg.d_attn, rng, false);
  nn::init_linear(ps, name + ".k", cfg.d_L, cfg.d_attn, rng, false);
  nn::init_linear(ps, name + ".v", cfg.d_L, cfg.d_attn, rng, false);
  nn::init_linear(ps, name + ".out", cfg.d_attn, channels, rng);
  nn::init_group_norm(ps, name + ".ff_norm", channels);
  nn::init_linear(ps, name + ".ff1", channels, 2 * channels, rng);
  nn::init_linear(ps, name + ".ff2", 2 * channels, channels, rng);
}

// Normalised pixel-centre coordinates in [-1, 1], [B, 2, h, w].
Tensor coordinates(std::int64_t b, std::int64_t h, std::int64_t w, DType dt) {
  std::vector<double> v(static_cast<std::size_t>(b * 2 * h * w));
  std::size_t i = 0;
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) v[i++] = (2.0 * x + 1.0) / static_cast<double>(w) - 1.0;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) v[i++] = (2.0 * y + 1.0) / static_cast<double>(h) - 1.0;
  }
  return Tensor::from_vector({b, 2, h, w}, v, dt);
}

Tensor attention_block(const ParamStore& ps, const std::string& name, const Tensor& h,
                       const Tensor& L) {
  const auto height = h.dim(2), width = h.dim(3);
  const Tensor coords = coordinates(h.dim(0), height, width, h.dtype());
  const Tensor tokens =
      nn::to_tokens(num::concat({nn::group_norm(ps, name + ".norm", h), coords}, 1));
  const Tensor a = cross_attention(tokens, L, ps.get(name + ".q.weight"),
                                   ps.get(name + ".k.weight"), ps.get(name + ".v.weight"));
  Tensor out = num::add(h, nn::from_tokens(nn::linear(ps, name + ".out", a), height, width));
  const Tensor f = nn::to_tokens(nn::group_norm(ps, name + ".ff_norm", out));
  const Tensor ff = nn::linear(ps, name + ".ff2", num::silu(nn::linear(ps, name + ".ff1", f)));
  return num::add(out, nn::from_tokens(ff, height, width));
}

}  // namespace

void init_unet(ParamStore& ps, const UNetConfig& cfg, Rng& rng, const std::string& prefix) {
  if (cfg.levels() < 1 || cfg.base_channels < 1 || cfg.latent_channels < 1 || cfg.d_attn < 1 ||
      cfg.d_L < 1 || cfg.time_dim < 2)
    throw ConfigError("unet: invalid configuration");
  nn::init_linear(ps, key(prefix, "time1"), cfg.base_channels, cfg.time_dim, rng);
  nn::init_linear(ps, key(prefix, "time2"), cfg.time_dim, cfg.time_dim, rng);
  nn::init_conv(ps, key(prefix, "in"), cfg.latent_channels + 2, level_channels(cfg, 0), 3, rng);
  int prev = level_channels(cfg, 0);
  const int n = cfg.levels();
  for (int i = 0; i < n; ++i) {
    const std::string b = key(prefix, "down" + std::to_string(i));
    const int ch = level_channels(cfg, i);
    nn::init_resblock(ps, b + ".res", prev, ch, cfg.time_dim, rng);
    if (has_attention(cfg, i)) init_attention(ps, b + ".attn", ch, cfg, rng);
    if (i + 1 < n) nn::init_conv(ps, b + ".down", ch, ch, 3, rng);
    prev = ch;
  }
  nn::init_resblock(ps, key(prefix, "mid.res1"), prev, prev, cfg.time_dim, rng);
  init_attention(ps, key(prefix, "mid.attn"), prev, cfg, rng);
  nn::init_resblock(ps, key(prefix, "mid.res2"), prev, prev, cfg.time_dim, rng);
  for (int i = n - 1; i >= 0; --i) {
    const std::string b = key(prefix, "up" + std::to_string(i));
    const int ch = level_channels(cfg, i);
    nn::init_resblock(ps, b + ".res", prev + ch, ch, cfg.time_dim, rng);
    if (has_attention(cfg, i)) init_attention(ps, b + ".attn", ch, cfg, rng);
    prev = ch;
    if (i > 0) {
      nn::init_conv(ps, b + ".up", ch, level_channels(cfg, i - 1), 3, rng);
      prev = level_channels(cfg, i - 1);
    }
  }
  nn::init_group_norm(ps, key(prefix, "out.norm"), prev);
  nn::init_conv(ps, key(prefix, "out"), prev, cfg.latent_channels, 3, rng);
}

Tensor timestep_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  std::vector<double> v(t.size() * static_cast<std::size_t>(dim), 0.0);
  for (std::size_t b = 0; b < t.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      v[b * dim + i] = std::sin(t[b] * freq);
      v[b * dim + half + i] = std::cos(t[b] * freq);
    }
  return Tensor::from_vector({static_cast<std::int64_t>(t.size()), dim}, v);
}

Tensor predict_noise(const ParamStore& ps, const UNetConfig& cfg, const Tensor& x_t,
                     const std::vector<int>& t, const Tensor& L, const std::string& prefix) {
  const int n = cfg.levels();
  const std::int64_t div = std::int64_t{1} << (n - 1);
  if (x_t.ndim() != 4 || x_t.dim(1) != cfg.latent_channels || x_t.dim(2) % div != 0 ||
      x_t.dim(3) % div != 0)
    throw ShapeError("predict_noise: latent shape " + num::shape_str(x_t.shape()) +
                     " does not fit the U-Net");
  if (static_cast<std::int64_t>(t.size()) != x_t.dim(0))
    throw ShapeError("predict_noise: one timestep per batch item required");
  if (L.ndim() != 3 || L.dim(0) != x_t.dim(0) || L.dim(2) != cfg.d_L)
    throw ShapeError("predict_noise: embedding must be [B, k, d_L]");

  Tensor temb = timestep_embedding(t, cfg.base_channels).to(x_t.dtype());
  temb = nn::linear(ps, key(prefix, "time1"), temb);
  temb = nn::linear(ps, key(prefix, "time2"), num::silu(temb));

  const Tensor coords = coordinates(x_t.dim(0), x_t.dim(2), x_t.dim(3), x_t.dtype());
  Tensor h = nn::conv(ps, key(prefix, "in"), num::concat({x_t, coords}, 1));
  std::vector<Tensor> skips;
  for (int i = 0; i < n; ++i) {
    const std::string b = key(prefix, "down" + std::to_string(i));
    h = nn::resblock(ps, b + ".res", h, temb);
    if (has_attention(cfg, i)) h = attention_block(ps, b + ".attn", h, L);
    skips.push_back(h);
    if (i + 1 < n) h = nn::conv(ps, b + ".down", h, 2, 1);
  }
  h = nn::resblock(ps, key(prefix, "mid.res1"), h, temb);
  h = attention_block(ps, key(prefix, "mid.attn"), h, L);
  h = nn::resblock(ps, key(prefix, "mid.res2"), h, temb);
  for (int i = n - 1; i >= 0; --i) {
    const std::string b = key(prefix, "up" + std::to_string(i));
    h = nn::resblock(ps, b + ".res", num::concat({h, skips[static_cast<std::size_t>(i)]}, 1), temb);
    if (has_attention(cfg, i)) h = attention_block(ps, b + ".attn", h, L);
    if (i > 0) h = nn::conv(ps, b + ".up", num::upsample_nearest2d(h, 2));
  }
  h = num::silu(nn::group_norm(ps, key(prefix, "out.norm"), h));
  return nn::conv(ps, key(prefix, "out"), h);
}

// ---------------------------------------------------------------------------
// Reverse process

namespace {

double noise_coefficient(double alpha, double alpha_bar) {
  return alpha == 1.0 ? 0.0 : (1.0 - alpha) / std::sqrt(1.0 - alpha_bar);
}

void check_step(int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw RangeError("ddpm_step: t must lie in 1..T");
}

}  // namespace

Tensor ddpm_step(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& s,
                 const Tensor& z_hat) {
  check_step(t, s);
  const double a = s.alpha_at(t);
  Tensor x = num::scale(num::sub(x_t, num::scale(eps_hat, noise_coefficient(a, s.alpha_bar_at(t)))),
                        1.0 / std::sqrt(a));
  if (t > 1 && z_hat.defined() && s.sigma_at(t) != 0.0)
    x = num::add(x, num::scale(z_hat, s.sigma_at(t)));
  return x;
}

double ddpm_step(double x_t, int t, double eps_hat, const NoiseSchedule& s, double z_hat) {
  check_step(t, s);
  const double a = s.alpha_at(t);
  double x = (x_t - noise_coefficient(a, s.alpha_bar_at(t)) * eps_hat) * (1.0 / std::sqrt(a));
  if (t > 1) x += s.sigma_at(t) * z_hat;
  return x;
}

Tensor sample_loop(const num::Shape& shape, const Tensor& L, const NoiseSchedule& s,
                   const NoisePredictor& predictor, const SamplerOptions& opt, Rng& rng) {
  num::NoGradGuard guard;
  const std::vector<int> taus = strided_timesteps(s.T, opt.steps);
  const NoiseSchedule r = respace(s, taus);
  const std::size_t batch = static_cast<std::size_t>(shape.at(0));
  const DType dt = L.defined() ? L.dtype() : num::default_dtype();
  Tensor x = Tensor::randn(shape, rng, 1.0, dt);
  Tensor null;
  if (opt.guidance_scale != 1.0) null = Tensor::zeros(L.shape(), dt);
  for (int i = r.T; i >= 1; --i) {
    const std::vector<int> t(batch, taus[static_cast<std::size_t>(i - 1)]);
    Tensor eps = predictor(x, t, L);
    if (opt.guidance_scale != 1.0) {
      const Tensor eps_u = predictor(x, t, null);
      eps = num::add(eps_u, num::scale(num::sub(eps, eps_u), opt.guidance_scale));
    }
    const Tensor z = i > 1 ? Tensor::randn(shape, rng, 1.0, dt) : Tensor();
    x = ddpm_step(x, i, eps, r, z);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Training

TrainStepStats diffusion_train_step(ParamStore& ps, const UNetConfig& ucfg,
                                    const EncoderConfig& ecfg, const NoiseSchedule& s,
                                    const Tensor& x0,
                                    const std::vector<data::CircuitParams>& conditions,
                                    const DiffusionTrainOptions& opt, Rng& rng,
                                    const NoisePredictor& predictor) {
  if (!x0.defined() || x0.dim(0) == 0 || conditions.empty())
    throw ShapeError("diffusion_train_step: empty batch");
  const auto b = static_cast<std::size_t>(x0.dim(0));
  if (conditions.size() != b) throw ShapeError("diffusion_train_step: one condition per latent");

  std::vector<int> t(b);
  for (auto& v : t) v = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T)));
  const Tensor eps = Tensor::randn(x0.shape(), rng, 1.0, x0.dtype());
  const Tensor x_t = forward_noise(x0, t, eps, s);

  TrainStepStats stats;
  std::vector<double> keep(b);
  for (auto& k : keep) {
    k = rng.uniform() < opt.cond_dropout ? 0.0 : 1.0;
    stats.conditioned += static_cast<int>(k);
  }
  const Tensor L = num::scale_leading(encode_batch(conditions, ps, ecfg), keep);
  const Tensor eps_hat = predictor ? predictor(x_t, t, L) : predict_noise(ps, ucfg, x_t, t, L);
  const Tensor loss = num::mse_loss(eps_hat, eps);
  stats.loss = loss.item();
  if (loss.requires_grad()) {
    ps.zero_grad();
    loss.backward();
    num::adamw_step(ps, {opt.lr, 0.9, 0.999, 1e-8, opt.weight_decay});
    num::ema_update(ps, ema_warmup(opt.ema_decay, ps.step(ps.names().front())));
  }
  return stats;
}

}  // namespace dali::model
