#include "dali/vae.hpp"

#include <algorithm>
#include <cmath>

#include "dali/nn.hpp"
#include "dali/ops.hpp"

namespace dali::model {

using num::Buffer;
using num::DType;

namespace {

std::string key(const std::string& prefix, const std::string& name) { return prefix + "." + name; }

void require_divisible(const Tensor& x, int f, const char* what) {
  if (x.ndim() != 4) throw ShapeError(std::string(what) + ": expected a 4-D tensor");
  if (x.dim(2) % f != 0 || x.dim(3) % f != 0)
    throw ShapeError(std::string(what) + ": spatial size " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " is not divisible by " + std::to_string(f));
}

}  // namespace

void init_vae(ParamStore& ps, const VaeConfig& cfg, Rng& rng, const std::string& prefix) {
  if (cfg.widths.empty() || cfg.latent_channels < 1 || cfg.in_channels < 1)
    throw ConfigError("vae: widths, latent and input channels must be non-empty");
  const auto& w = cfg.widths;
  const int n = static_cast<int>(w.size());
  nn::init_conv(ps, key(prefix, "enc.stem"), cfg.in_channels, w[0], 3, rng);
  int prev = w[0];
  for (int i = 0; i < n; ++i) {
    const std::string b = key(prefix, "enc.down" + std::to_string(i));
    nn::init_resblock(ps, b + ".res", prev, w[i], 0, rng);
    nn::init_conv(ps, b + ".down", w[i], w[i], 3, rng);
    prev = w[i];
  }
  nn::init_group_norm(ps, key(prefix, "enc.norm"), prev);
  nn::init_conv(ps, key(prefix, "enc.head"), prev, 2 * cfg.latent_channels, 3, rng);

  nn::init_conv(ps, key(prefix, "dec.stem"), cfg.latent_channels, w[n - 1], 3, rng);
  nn::init_resblock(ps, key(prefix, "dec.mid"), w[n - 1], w[n - 1], 0, rng);
  for (int i = n - 1; i >= 0; --i) {
    const std::string b = key(prefix, "dec.up" + std::to_string(i));
    nn::init_conv_transpose(ps, b + ".up", w[i], w[i], 4, rng);
    nn::init_resblock(ps, b + ".res", w[i], w[std::max(i - 1, 0)], 0, rng);
  }
  nn::init_group_norm(ps, key(prefix, "dec.norm"), w[0]);
  nn::init_conv(ps, key(prefix, "dec.head"), w[0], cfg.in_channels, 3, rng);
}

VaePosterior vae_encode(const ParamStore& ps, const VaeConfig& cfg, const Tensor& x,
                        const std::string& prefix) {
  require_divisible(x, cfg.factor(), "vae_encode");
  if (x.dim(1) != cfg.in_channels) throw ShapeError("vae_encode: channel count mismatch");
  Tensor h = nn::conv(ps, key(prefix, "enc.stem"), x);
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    const std::string b = key(prefix, "enc.down" + std::to_string(i));
    h = nn::resblock(ps, b + ".res", h);
    h = nn::conv(ps, b + ".down", h, 2, 1);
  }
  h = num::silu(nn::group_norm(ps, key(prefix, "enc.norm"), h));
  h = nn::conv(ps, key(prefix, "enc.head"), h);
  const int c = cfg.latent_channels;
  return {num::slice(h, 1, 0, c), num::clamp(num::slice(h, 1, c, c), -30.0, 20.0)};
}

Tensor reparameterize(const VaePosterior& post, const Tensor& noise) {
  return num::add(post.mu, num::mul(num::exp(num::scale(post.log_var, 0.5)), noise));
}

Tensor vae_decode(const ParamStore& ps, const VaeConfig& cfg, const Tensor& z,
                  const std::string& prefix) {
  if (z.ndim() != 4 || z.dim(1) != cfg.latent_channels)
    throw ShapeError("vae_decode: expected [N, " + std::to_string(cfg.latent_channels) +
                     ", h, w], got " + num::shape_str(z.shape()));
  const int n = static_cast<int>(cfg.widths.size());
  Tensor h = nn::conv(ps, key(prefix, "dec.stem"), z);
  h = nn::resblock(ps, key(prefix, "dec.mid"), h);
  for (int i = n - 1; i >= 0; --i) {
    const std::string b = key(prefix, "dec.up" + std::to_string(i));
    h = nn::conv_transpose(ps, b + ".up", h, 2, 1);
    h = nn::resblock(ps, b + ".res", h);
  }
  h = num::silu(nn::group_norm(ps, key(prefix, "dec.norm"), h));
  return num::sigmoid(nn::conv(ps, key(prefix, "dec.head"), h));
}

Tensor kl_divergence(const VaePosterior& post) {
  // Summed over latent elements, averaged over the batch.
  Tensor t = num::add(num::exp(post.log_var), num::square(post.mu));
  t = num::sub(num::add_scalar(t, -1.0), post.log_var);
  return num::scale(num::sum(t), 0.5 / static_cast<double>(post.mu.dim(0)));
}

ElboTerms elbo_loss(const Tensor& x, const VaePosterior& post, const Tensor& x_hat,
                    double kl_weight) {
  ElboTerms e;
  e.recon = num::mse_loss(x_hat, x);
  e.kl = kl_divergence(post);
  e.loss = num::add(e.recon, num::scale(e.kl, kl_weight));
  return e;
}

Tensor to_batch(const std::vector<const data::HeatmapSet*>& samples) {
  if (samples.empty()) throw ShapeError("to_batch: no samples");
  const int h = samples[0]->height(), w = samples[0]->width();
  const std::size_t per = static_cast<std::size_t>(data::kChannels) * h * w;
  Buffer buf(num::default_dtype(), per * samples.size());
  num::visit_dtype(buf.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto out = buf.as<T>();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto* s = samples[i];
      if (s->height() != h || s->width() != w)
        throw ShapeError("to_batch: samples differ in size (" + s->id + ")");
      std::copy(s->values.begin(), s->values.end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
  });
  return Tensor::from_buffer({static_cast<std::int64_t>(samples.size()), data::kChannels, h, w},
                             std::move(buf));
}

Tensor to_batch(const std::vector<data::HeatmapSet>& samples) {
  std::vector<const data::HeatmapSet*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return to_batch(ptrs);
}

double ema_warmup(double decay, std::int64_t step) {
  return std::min(decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
}

namespace {

data::HeatmapSet crop(const data::HeatmapSet& s, int side, Rng& rng) {
  const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.height() - side + 1)));
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.width() - side + 1)));
  data::CircuitParams p = s.params;
  p.height = p.width = side;
  p.macros.clear();  // boxes are not needed for reconstruction
  data::HeatmapSet out(s.id, p);
  for (int c = 0; c < data::kChannels; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const auto ch = static_cast<data::Channel>(c);
        out.at(ch, y, x) = s.at(ch, y0 + y, x0 + x);
      }
  return out;
}

}  // namespace

TrainLog train_vae(ParamStore& ps, const VaeConfig& cfg, const std::vector<data::HeatmapSet>& samples,
                   const VaeTrainOptions& opt, const std::function<void(int, double)>& on_step) {
  if (samples.empty()) throw ConfigError("train_vae: empty training set");
  if (opt.batch < 1 || opt.steps < 0) throw ConfigError("train_vae: invalid batch or step count");
  if (opt.crop > 0 && (opt.crop % cfg.factor() != 0 || opt.crop > samples[0].height() ||
                       opt.crop > samples[0].width()))
    throw ConfigError("train_vae: crop must be a multiple of the downsampling factor and fit");
  const num::AdamWOptions adam{opt.lr, 0.9, 0.999, 1e-8, opt.weight_decay};
  const Rng master(opt.seed, 0x7661u);
  TrainLog log;
  for (int step = 0; step < opt.steps; ++step) {
    Rng rng = master.split(static_cast<std::uint64_t>(step));
    std::vector<data::HeatmapSet> batch;
    for (int b = 0; b < opt.batch; ++b) {
      const auto& src = samples[rng.below(samples.size())];
      const int a = opt.augment ? static_cast<int>(rng.below(data::kAugmentations + 1)) : 0;
      data::HeatmapSet s = a == 0 ? src : data::augment(src, a);
      if (opt.crop > 0) s = crop(s, opt.crop, rng);
      batch.push_back(std::move(s));
    }
    const Tensor x = to_batch(batch);
    const VaePosterior post = vae_encode(ps, cfg, x);
    const Tensor noise = Tensor::randn(post.mu.shape(), rng, 1.0, post.mu.dtype());
    const Tensor x_hat = vae_decode(ps, cfg, reparameterize(post, noise));
    const ElboTerms e = elbo_loss(x, post, x_hat, cfg.kl_weight);
    ps.zero_grad();
    e.loss.backward();
    num::adamw_step(ps, adam);
    num::ema_update(ps, ema_warmup(opt.ema_decay, step));
    log.loss.push_back(e.loss.item());
    if (on_step) on_step(step, log.loss.back());
  }
  return log;
}

std::vector<Tensor> encode_means(const ParamStore& ps, const VaeConfig& cfg,
                                 const std::vector<data::HeatmapSet>& samples) {
  num::NoGradGuard guard;
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(vae_encode(ps, cfg, to_batch({&s})).mu);
  return out;
}

double fit_latent_scale(const ParamStore& ps, const VaeConfig& cfg,
                        const std::vector<data::HeatmapSet>& samples) {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& mu : encode_means(ps, cfg, samples))
    for (double v : mu.to_vector()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  if (n < 2) return 1.0;
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  return var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
}

}  // namespace dali::model
