#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dali/heatmap.hpp"
#include "dali/param_store.hpp"
#include "dali/rng.hpp"

namespace dali::model {

using num::ParamStore;
using num::Tensor;

struct VaeConfig {
  int in_channels = data::kChannels;
  int latent_channels = 4;
  std::vector<int> widths{32, 64, 128};  // one down-block per entry, each halves H and W
  double kl_weight = 1e-6;

  int factor() const { return 1 << widths.size(); }
};

struct VaePosterior {
  Tensor mu;       // [N, latent, H/f, W/f]
  Tensor log_var;  // same shape, clamped to [-30, 20]
};

void init_vae(ParamStore& ps, const VaeConfig& cfg, Rng& rng, const std::string& prefix = "vae");

/// x: [N, 6, H, W] with H, W divisible by cfg.factor().
VaePosterior vae_encode(const ParamStore& ps, const VaeConfig& cfg, const Tensor& x,
                        const std::string& prefix = "vae");
/// z = mu + exp(log_var / 2) * noise
Tensor reparameterize(const VaePosterior& post, const Tensor& noise);
/// z: [N, latent, h, w] -> sigmoid output [N, 6, h f, w f].
Tensor vae_decode(const ParamStore& ps, const VaeConfig& cfg, const Tensor& z,
                  const std::string& prefix = "vae");

/// 0.5 * sum(exp(log_var) + mu^2 - 1 - log_var), summed over every element.
Tensor kl_divergence(const VaePosterior& post);

struct ElboTerms {
  Tensor loss;
  Tensor recon;  // MSE
  Tensor kl;
};
ElboTerms elbo_loss(const Tensor& x, const VaePosterior& post, const Tensor& x_hat,
                    double kl_weight);

/// Stacks samples into a [N, 6, H, W] tensor (all samples must share H and W).
Tensor to_batch(const std::vector<const data::HeatmapSet*>& samples);
Tensor to_batch(const std::vector<data::HeatmapSet>& samples);

struct VaeTrainOptions {
  int steps = 1000;
  int batch = 8;
  int crop = 0;  // square random crop side; 0 trains on full frames
  bool augment = true;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> loss;
};

/// Minibatch AdamW on the ELBO. `on_step(step, loss)` is optional.
TrainLog train_vae(ParamStore& ps, const VaeConfig& cfg, const std::vector<data::HeatmapSet>& samples,
                   const VaeTrainOptions& opt,
                   const std::function<void(int, double)>& on_step = {});

/// 1 / standard deviation of posterior means over `samples` (1 if degenerate).
double fit_latent_scale(const ParamStore& ps, const VaeConfig& cfg,
                        const std::vector<data::HeatmapSet>& samples);

/// Posterior means of the samples, one [1, latent, h, w] tensor each.
std::vector<Tensor> encode_means(const ParamStore& ps, const VaeConfig& cfg,
                                 const std::vector<data::HeatmapSet>& samples);

/// Mean-at-warmup EMA decay: min(decay, (1 + n) / (10 + n)).
double ema_warmup(double decay, std::int64_t step);

}  // namespace dali::model
