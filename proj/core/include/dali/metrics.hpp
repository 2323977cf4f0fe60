#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dali/heatmap.hpp"

namespace dali::metrics {

/// Read-only view of one H x W map.
struct MapRef {
  std::span<const float> values;
  int height = 0;
  int width = 0;
};

MapRef channel_map(const data::HeatmapSet& s, data::Channel c);
std::vector<MapRef> channel_maps(const std::vector<data::HeatmapSet>& set, data::Channel c);

struct FeatureExtractor {
  std::string name;
  int dim = 0;
  std::function<std::vector<double>(const MapRef&)> extract;
};

inline constexpr int kDefaultFeatureDim = 84;

/// 8x8 area-average downsample (64), 16-bin histogram frequencies (16), then
/// mean, std, fraction > 0.9 and fraction < 0.1.
std::vector<double> default_features(const MapRef& map);
FeatureExtractor default_extractor();

struct GaussianSummary {
  int dim = 0;
  std::vector<double> mu;
  std::vector<double> cov;  // row-major dim x dim
};

inline constexpr double kShrinkage = 1e-3;

/// Mean and unbiased covariance of the rows. Sets with fewer than dim + 1
/// rows get `shrinkage` added to the covariance diagonal.
GaussianSummary fit_gaussian(const std::vector<std::vector<double>>& rows,
                             double shrinkage = kShrinkage);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), clamped at 0.
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);

double fid(const std::vector<MapRef>& a, const std::vector<MapRef>& b,
           const FeatureExtractor& extractor = default_extractor());

struct SsimResult {
  double value = 0;
  bool global_fallback = false;  // map smaller than the window
};

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1,
/// averaged over every fully contained window position.
SsimResult ssim(const MapRef& x, const MapRef& y);

double l1_map(const MapRef& x, const MapRef& y);

struct HotspotFractions {
  double hot = 0;  // fraction > hi
  double low = 0;  // fraction < lo
};
HotspotFractions hotspot_fraction(const MapRef& map, double hi = 0.9, double lo = 0.1);

struct PairwiseSsim {
  std::vector<std::int64_t> histogram;  // 20 bins over [0, 1]
  double average = 0;
  double stdv = 0;
  std::int64_t comparisons = 0;
};

/// SSIM over every unordered pair. Parallel over pairs; the reduction order is fixed.
PairwiseSsim pairwise_ssim(const std::vector<MapRef>& maps, int workers = 1, int bins = 20);

struct HistogramStats {
  std::vector<std::int64_t> counts;
  std::vector<double> frequencies;
  double mean = 0;
  double stdv = 0;
  std::int64_t pixels = 0;
};

/// Pooled pixel histogram over [0, 1]; bin = min(floor(v * bins), bins - 1).
HistogramStats histogram_stats(const std::vector<MapRef>& maps, int bins);

struct FeatureRow {
  std::string id;
  std::vector<double> values;  // same order as feature_columns()
};

/// avg, std and hotspot fraction of RUDY, IR drop, power and scaled power,
/// then the aspect ratio H / W.
const std::vector<std::string>& feature_columns();
std::vector<FeatureRow> export_features(const std::vector<data::HeatmapSet>& samples);
/// Header of the 13 column names, then one row per sample in input order.
void write_features_csv(const std::vector<FeatureRow>& rows, const std::filesystem::path& path);

}  // namespace dali::metrics
