#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dali/heatmap.hpp"
#include "dali/param_store.hpp"

namespace dali::downstream {

using num::ParamStore;
using num::Tensor;

struct TaskSpec {
  std::string name;
  std::vector<data::Channel> inputs;
  data::Channel target;
};

/// "ir_drop": cell density, power, scaled power -> IR drop.
/// "rudy": cell density, macro region -> RUDY.
TaskSpec task(const std::string& name);

struct PredictorConfig {
  int kernel = 5;
  int deconv_kernel = 5;
  std::vector<int> channels{16, 64, 128, 512};
  double lr = 5e-5;
  double weight_decay = 0.0;
  int batch = 64;
  int steps = 125;
};

struct Predictor {
  PredictorConfig cfg;
  TaskSpec task;
  ParamStore params;

  /// x: [N, inputs, H, W] -> sigmoid output [N, 1, H, W].
  Tensor forward(const Tensor& x) const;
  /// Spatial divisor required of H and W.
  int size_multiple() const { return 1 << cfg.channels.size(); }
};

/// Encoder of strided k x k convs (GN, SiLU), mirrored by transposed convs
/// with skip concatenation, a final k x k conv and a sigmoid.
Predictor build_predictor(const PredictorConfig& cfg, const TaskSpec& task, std::uint64_t seed);

/// Closed-form parameter count of build_predictor's topology.
std::int64_t predictor_parameter_count(const PredictorConfig& cfg, int in_channels);

/// Stacks the task's input channels [N, inputs, H, W] or target [N, 1, H, W].
Tensor task_inputs(const std::vector<data::HeatmapSet>& samples, const TaskSpec& task);
Tensor task_targets(const std::vector<data::HeatmapSet>& samples, const TaskSpec& task);

struct TrainResult {
  std::vector<double> loss;  // one entry per optimizer step
};

/// Minibatch L1 with AdamW. Batches walk a per-epoch shuffle of `samples`.
TrainResult train_predictor(Predictor& p, const std::vector<data::HeatmapSet>& samples, int steps,
                            std::uint64_t seed);

struct Scores {
  double l1 = 0;
  double hotspot_l1 = 0;
};

/// Number of hotspot pixels per map: ceil(0.1 * pixels).
std::int64_t hotspot_pixels(std::int64_t pixels);

/// Scores explicit predictions (one H*W map per sample, target channel order).
Scores score_predictions(const std::vector<std::vector<float>>& predictions,
                         const std::vector<data::HeatmapSet>& samples, const TaskSpec& task);

Scores evaluate_predictor(const Predictor& p, const std::vector<data::HeatmapSet>& samples,
                          int workers = 1);

struct SweepPoint {
  int n_real = 0;
  Scores scores;
};

struct SweepResult {
  Scores baseline;  // pretrained, no fine-tuning
  std::vector<SweepPoint> curve;
};

/// For each n, fine-tunes a copy of `pretrained` on the first n of `real_train`
/// (ordered by id) for `steps` steps and evaluates on `real_test`.
SweepResult fine_tune_sweep(const Predictor& pretrained, std::vector<data::HeatmapSet> real_train,
                            const std::vector<data::HeatmapSet>& real_test,
                            const std::vector<int>& sizes, int steps, std::uint64_t seed,
                            int workers = 1);

void save_predictor(const Predictor& p, const std::filesystem::path& path);
Predictor load_predictor(const std::filesystem::path& path);

}  // namespace dali::downstream
