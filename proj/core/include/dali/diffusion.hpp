#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dali/encoding.hpp"
#include "dali/param_store.hpp"
#include "dali/rng.hpp"

namespace dali::model {

using num::ParamStore;
using num::Tensor;

/// Arrays are indexed by t - 1 for t in 1..T.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta, alpha, alpha_bar, sigma;

  double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
  double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t - 1)); }
  double sigma_at(int t) const { return sigma.at(static_cast<std::size_t>(t - 1)); }
};

/// Linear beta ramp; sigma_t = sqrt(beta_t).
NoiseSchedule make_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
NoiseSchedule schedule_from_betas(const std::vector<double>& betas);

/// Strided timesteps tau_1 < ... < tau_S with tau_1 = 1.
std::vector<int> strided_timesteps(int T, int steps);
/// Schedule over the subsequence: alpha_bar'_i = alpha_bar[tau_i], alpha'_i =
/// alpha_bar'_i / alpha_bar'_{i-1}.
NoiseSchedule respace(const NoiseSchedule& s, const std::vector<int>& taus);

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, with one t per batch item.
Tensor forward_noise(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                     const NoiseSchedule& s);
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

/// softmax(Q K^T / sqrt(d_attn)) V with Q = x W_Q, K = L W_K, V = L W_V.
/// x [N, F] with L [k, d_L], or batched x [B, N, F] with L [B, k, d_L].
Tensor cross_attention(const Tensor& x, const Tensor& L, const Tensor& w_q, const Tensor& w_k,
                       const Tensor& w_v);

struct UNetConfig {
  int latent_channels = 4;
  int base_channels = 32;
  std::vector<int> multipliers{1, 2};
  std::vector<bool> attention{true, true};  // per level
  int d_attn = 64;
  int d_L = 64;
  int time_dim = 128;

  int levels() const { return static_cast<int>(multipliers.size()); }
};

void init_unet(ParamStore& ps, const UNetConfig& cfg, Rng& rng, const std::string& prefix = "unet");

/// Sinusoidal embedding of the timesteps, [B, dim].
Tensor timestep_embedding(const std::vector<int>& t, int dim);

/// eps_hat with the shape of x_t [B, C, h, w]; L is [B, k, d_L].
Tensor predict_noise(const ParamStore& ps, const UNetConfig& cfg, const Tensor& x_t,
                     const std::vector<int>& t, const Tensor& L,
                     const std::string& prefix = "unet");

/// Exactly x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - ab_t) eps_hat) / sqrt(a_t) + sigma_t z_hat.
/// z_hat is ignored (taken as zero) when t == 1.
Tensor ddpm_step(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& s,
                 const Tensor& z_hat);
double ddpm_step(double x_t, int t, double eps_hat, const NoiseSchedule& s, double z_hat);

/// (x_t, t in the training schedule, L) -> eps_hat
using NoisePredictor =
    std::function<Tensor(const Tensor& x_t, const std::vector<int>& t, const Tensor& L)>;

struct SamplerOptions {
  int steps = 100;
  double guidance_scale = 1.0;
};

/// Starts from x_T ~ N(0, I) of `shape` and runs the reverse process on the
/// strided subsequence. Guidance blends with an all-zero embedding; scale 1
/// skips the unconditional pass entirely.
Tensor sample_loop(const num::Shape& shape, const Tensor& L, const NoiseSchedule& s,
                   const NoisePredictor& predictor, const SamplerOptions& opt, Rng& rng);

struct DiffusionTrainOptions {
  int batch = 16;
  double cond_dropout = 0.1;
  double lr = 5e-4;
  double weight_decay = 1e-4;
  double ema_decay = 0.999;
};

struct TrainStepStats {
  double loss = 0;
  int conditioned = 0;  // items that kept their embedding
};

/// One optimizer step over latents x0 [B, C, h, w] with their conditioning.
/// `ps` holds both the encoder ("enc.*") and the U-Net ("unet.*") parameters.
/// An optional `predictor` replaces the U-Net (used for stubs in tests).
TrainStepStats diffusion_train_step(ParamStore& ps, const UNetConfig& ucfg,
                                    const EncoderConfig& ecfg, const NoiseSchedule& s,
                                    const Tensor& x0,
                                    const std::vector<data::CircuitParams>& conditions,
                                    const DiffusionTrainOptions& opt, Rng& rng,
                                    const NoisePredictor& predictor = {});

}  // namespace dali::model
