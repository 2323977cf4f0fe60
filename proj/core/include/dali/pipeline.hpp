#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dali/heatmap.hpp"
#include "dali/rng.hpp"

namespace dali::pipeline {

using data::Box;
using data::CircuitParams;
using data::HeatmapSet;

// ---------------------------------------------------------------------------
// Macro box sampling

struct BoxSamplerOptions {
  double aspect_lo = 0.5;  // width / height
  double aspect_hi = 2.0;
  double min_gap = 0.02;
  int max_tries = 1000;  // placement attempts per box
  double area_lo = 0.1;
  double area_hi = 0.4;
};

/// M pairwise separated boxes whose total area is drawn from
/// U[area_lo, min(area_hi, 1 - u)]. Throws InfeasibleError when placement fails.
std::vector<Box> sample_macro_boxes(int m, double utilization, Rng& rng,
                                    const BoxSamplerOptions& opt = {});
/// Same, with an explicit total area.
std::vector<Box> sample_macro_boxes_with_area(int m, double total_area, Rng& rng,
                                              const BoxSamplerOptions& opt = {});

// ---------------------------------------------------------------------------
// Post-processing and checking

struct PostProcessOptions {
  double threshold = 0.5;
  int min_component = 4;  // pixels; smaller macro blobs are dropped
  double power_floor = 0.05;
};

struct PixelRect {
  int x0, y0, x1, y1;  // half-open pixel ranges
  int area() const { return (x1 - x0) * (y1 - y0); }
};

struct Component {
  PixelRect bbox;
  int pixels = 0;
};

/// 4-connected components of the pixels where mask != 0, in scan order.
std::vector<Component> connected_components(std::span<const float> mask, int height, int width);

/// Binarize, drop specks, replace components by trimmed bounding rectangles (to a fixed point).
std::vector<float> rectify_macros(std::span<const float> macro, int height, int width,
                                  const PostProcessOptions& opt = {});

/// raw: [6, H, W] decoder output. Produces a candidate whose params are `target`.
HeatmapSet post_process(std::span<const float> raw, const CircuitParams& target,
                        const std::string& id, const PostProcessOptions& opt = {});

struct CheckOptions {
  double utilization_tolerance = 0.05;
  double area_tolerance = 0.2;  // relative
};

struct Verdict {
  bool pass = true;
  char code = 0;  // 'a'..'e' on rejection
  std::string reason;
};

/// Mean cell density over non-macro pixels divided by the calibration constant.
double utilization_proxy(const HeatmapSet& s, double calibration);

/// Least-squares gain k minimising sum (m_i - k u_i)^2 over samples, where m_i
/// is the mean non-macro cell density.
double fit_utilization_calibration(const std::vector<HeatmapSet>& samples);

Verdict check(const HeatmapSet& sample, const CircuitParams& target, double calibration,
              const CheckOptions& opt = {});

// ---------------------------------------------------------------------------
// Generation loop

struct GenerationRequest {
  int height = 48;
  int width = 48;
  double clock_period = 4.0;
  double utilization = 0.7;
  int macro_count = 2;
  std::uint64_t seed = 0;
  int max_iterations = 64;
};

/// Produces raw [6, H, W] heatmaps for the given conditioning.
class HeatmapGenerator {
 public:
  virtual ~HeatmapGenerator() = default;
  virtual std::vector<float> generate(const CircuitParams& params, Rng& rng) const = 0;
  /// Spatial divisor required of H and W.
  virtual int size_multiple() const { return 1; }
  virtual int max_macros() const { return 64; }
};

struct PipelineOptions {
  BoxSamplerOptions boxes;
  PostProcessOptions post;
  CheckOptions check;
  double calibration = 1.0;
};

struct GenerationReport {
  std::string id;
  bool accepted = false;
  HeatmapSet sample;
  int iterations = 0;
  std::vector<std::string> rejections;  // one per rejected attempt, "<code>: <reason>"
  std::vector<double> seconds;          // wall clock per attempt
};

void validate_request(const GenerationRequest& r, const HeatmapGenerator& g);

/// Runs the sample/post-process/check loop. The returned report has
/// accepted == false when the iteration cap was hit.
GenerationReport try_generate(const GenerationRequest& r, const HeatmapGenerator& g,
                              const PipelineOptions& opt, const std::string& id);
/// As try_generate, but throws InfeasibleError listing every rejection on failure.
GenerationReport generate_one(const GenerationRequest& r, const HeatmapGenerator& g,
                              const PipelineOptions& opt, const std::string& id = "gen");

struct DatasetResult {
  data::DatasetManifest manifest;
  std::vector<GenerationReport> reports;  // request order
};

/// Per-request seeds are mixed from `master_seed`, the request index and the
/// request's own seed. Accepted samples are written to
/// `out_dir` with split tag "generated"; failures are reported, not thrown.
DatasetResult generate_dataset(const std::vector<GenerationRequest>& requests,
                               const HeatmapGenerator& g, const PipelineOptions& opt,
                               std::uint64_t master_seed, int workers,
                               const std::filesystem::path& out_dir);

std::vector<GenerationRequest> load_requests(const std::filesystem::path& path);

}  // namespace dali::pipeline
