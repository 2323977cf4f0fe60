#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "dali/downstream.hpp"
#include "dali/ldm.hpp"
#include "dali/pipeline.hpp"

namespace dali::cli {

using nlohmann::json;

/// Built-in defaults: the desk-scale configuration for 48x48 toy data.
json default_config();

/// Layers `file` (may be empty) and DALI_<SECTION>_<KEY> environment
/// variables over the defaults. Unknown sections or keys throw ConfigError.
json resolve_config(const std::filesystem::path& file, const std::map<std::string, std::string>& env);
/// The current process environment, restricted to DALI_* names.
std::map<std::string, std::string> dali_environment();

/// Typed views over a resolved config.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string precision = "f32";
  model::ModelConfig model;
  model::VaeTrainOptions vae_train;
  model::DiffusionTrainConfig diffusion_train;
  bool diffusion_augment = true;
  pipeline::PipelineOptions pipeline;
  int pairwise_bins = 20;
  int histogram_bins = 20;
  std::string task = "ir_drop";
  downstream::PredictorConfig predictor;
  int finetune_steps = 125;
};

RunConfig typed_config(const json& resolved);

/// Pretty-printed with a trailing newline; keys sorted.
void write_json(const json& j, const std::filesystem::path& path);

}  // namespace dali::cli
