#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dali/diffusion.hpp"
#include "dali/encoding.hpp"
#include "dali/pipeline.hpp"
#include "dali/vae.hpp"

// The full latent-diffusion generator: VAE, circuit encoder, U-Net and
// schedule, persisted as two checkpoints inside a directory.
namespace dali::model {

inline constexpr char kVaeCheckpoint[] = "vae.ckpt";
inline constexpr char kDiffusionCheckpoint[] = "diffusion.ckpt";

struct ModelConfig {
  VaeConfig vae;
  EncoderConfig encoder;
  UNetConfig unet;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  SamplerOptions sampler;
};

struct LatentDiffusionModel {
  ModelConfig cfg;
  NoiseSchedule schedule;
  ParamStore vae;        // "vae.*"
  ParamStore diffusion;  // "enc.*" and "unet.*"
  double latent_scale = 1.0;
  double calibration = 1.0;  // utilization proxy gain fit on the training set

  /// Spatial divisor of request sizes: VAE factor times U-Net downsampling.
  int size_multiple() const;
};

/// Registers freshly initialised VAE, encoder and U-Net parameters.
LatentDiffusionModel init_model(const ModelConfig& cfg, std::uint64_t seed);

void save_vae(const LatentDiffusionModel& m, const std::filesystem::path& dir);
void save_diffusion(const LatentDiffusionModel& m, const std::filesystem::path& dir);
/// Loads vae.ckpt and, when `with_diffusion`, diffusion.ckpt from `dir`.
LatentDiffusionModel load_model(const std::filesystem::path& dir, bool with_diffusion = true);

struct LatentItem {
  Tensor z;  // [1, C, h, w], already multiplied by latent_scale
  data::CircuitParams params;
};

/// Scaled posterior means of every sample and, when `augment`, of each of its
/// augmentations (boxes transformed alongside).
std::vector<LatentItem> make_latent_set(const LatentDiffusionModel& m,
                                        const std::vector<data::HeatmapSet>& samples,
                                        bool augment);

struct DiffusionTrainConfig {
  int steps = 2000;
  DiffusionTrainOptions step;
  std::uint64_t seed = 0;
};

TrainLog train_diffusion(LatentDiffusionModel& m, const std::vector<LatentItem>& items,
                         const DiffusionTrainConfig& cfg,
                         const std::function<void(int, double)>& on_step = {});

/// Samples with the EMA weights of both networks.
class LatentDiffusionGenerator : public pipeline::HeatmapGenerator {
 public:
  explicit LatentDiffusionGenerator(const LatentDiffusionModel& m);

  std::vector<float> generate(const data::CircuitParams& params, Rng& rng) const override;
  int size_multiple() const override { return multiple_; }
  int max_macros() const override { return cfg_.encoder.k; }

 private:
  ModelConfig cfg_;
  NoiseSchedule schedule_;
  ParamStore vae_;
  ParamStore diffusion_;
  double latent_scale_;
  int multiple_;
};

}  // namespace dali::model
