#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dali/error.hpp"

namespace dali {
class Rng;
}

namespace dali::data {

inline constexpr int kChannels = 6;
inline constexpr char kSampleMagic[] = "DALIPD01";

enum class Channel : int {
  cell_density = 0,
  macro_region = 1,
  rudy = 2,
  ir_drop = 3,
  power = 4,
  scaled_power = 5,
};

const char* channel_name(Channel c);
Channel channel_from_name(const std::string& name);
inline int idx(Channel c) { return static_cast<int>(c); }

/// Axis-aligned box, normalized [0,1] coordinates unless noted otherwise.
struct Box {
  double xl = 0, yl = 0, xu = 0, yu = 0;

  double width() const { return xu - xl; }
  double height() const { return yu - yl; }
  double area() const { return width() * height(); }
  bool operator==(const Box&) const = default;
};

/// Area of the intersection (0 when disjoint or only touching).
double overlap_area(const Box& a, const Box& b);
/// Separation between boxes: max of the axis gaps (negative when overlapping).
double box_gap(const Box& a, const Box& b);

/// Pixel-coordinate boxes -> normalized; rejects degenerate or out-of-layout boxes.
std::vector<Box> normalize_bboxes(const std::vector<Box>& pixel_boxes, int height, int width);

struct CircuitParams {
  double clock_period = 0;  // ns
  double utilization = 0;
  int height = 0;
  int width = 0;
  std::vector<Box> macros;

  int macro_count() const { return static_cast<int>(macros.size()); }
  /// Throws RangeError on any broken invariant. `max_macros` is the pad length k.
  void validate(int max_macros = 64) const;
  bool operator==(const CircuitParams&) const = default;
};

/// One layout sample: six channel-major H x W maps plus conditioning params.
struct HeatmapSet {
  std::string id;
  CircuitParams params;
  std::vector<float> values;  // [6, H, W]

  HeatmapSet() = default;
  HeatmapSet(std::string id, CircuitParams params);

  int height() const { return params.height; }
  int width() const { return params.width; }
  std::size_t plane() const { return static_cast<std::size_t>(params.height) * params.width; }

  std::span<float> channel(Channel c);
  std::span<const float> channel(Channel c) const;
  float& at(Channel c, int y, int x) { return values[idx(c) * plane() + y * params.width + x]; }
  float at(Channel c, int y, int x) const {
    return values[idx(c) * plane() + y * params.width + x];
  }
  bool operator==(const HeatmapSet&) const = default;
};

/// Throws RangeError if a value lies outside [0,1] or is not finite.
void check_range(const HeatmapSet& s);

void save_sample(const HeatmapSet& sample, const std::filesystem::path& path);
HeatmapSet load_sample(const std::filesystem::path& path);

/// Fills the macro boxes of `p` into a binary H x W plane (pixel centres inside the box).
std::vector<float> rasterize_boxes(const std::vector<Box>& boxes, int height, int width);

// ---------------------------------------------------------------------------
// Manifests

struct ManifestEntry {
  std::string id;
  std::string path;  // as written in the manifest; relative to its directory
  std::string split;  // train | test | generated
  double clock_period = 0;
  double utilization = 0;
  int height = 0;
  int width = 0;
  int num_macros = 0;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.path; }
  HeatmapSet load(std::size_t i) const { return load_sample(resolve(entries.at(i))); }
  std::vector<HeatmapSet> load_all() const;
};

ManifestEntry make_entry(const HeatmapSet& s, const std::string& path, const std::string& split);

/// Writes the JSON array. Paths stay relative to the manifest's directory.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
/// Checks ids are unique and every referenced file exists.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Saves each sample as <dir>/<id>.dpd and writes <dir>/manifest.json.
DatasetManifest write_dataset(const std::vector<HeatmapSet>& samples,
                              const std::filesystem::path& dir, const std::string& split);

/// Design name of a sample id: the prefix before the first '_' (whole id if none).
std::string design_of(const std::string& id);

// ---------------------------------------------------------------------------
// Augmentation and splitting

inline constexpr int kAugmentations = 11;

/// 1 rot180, 2 rot90, 3 rot270, 4 flip x, 5 flip y, 6 transpose, 7 anti-transpose,
/// 8..11 circular shifts by +H/8, -H/8 rows and +W/8, -W/8 columns.
/// Boxes that wrap across the border under a shift are split in two.
HeatmapSet augment(const HeatmapSet& sample, int index);
Box transform_box(const Box& b, int index);

struct ParamOption {
  std::string key;  // "clock_period" | "utilization" | "num_macros"
  double value = 0;
};

struct SplitResult {
  DatasetManifest train;
  DatasetManifest test;
};

/// Test: every entry of a held-out design. Train: the remaining entries minus
/// those matching any held-out parameter option.
SplitResult split_dataset(const DatasetManifest& m, const std::vector<std::string>& held_out_designs,
                          const std::vector<ParamOption>& held_out_options);

// ---------------------------------------------------------------------------
// Procedural toy data

struct ToyOptions {
  int designs = 6;
  int max_macros = 4;
  std::vector<double> clock_periods{2.0, 4.0, 6.0, 8.0};
  std::vector<double> utilizations{0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9};
  double density_gain = 0.85;  // mean non-macro cell density per unit utilization
  double density_noise = 0.08;
};

HeatmapSet make_toy_sample(const std::string& id, int height, int width, Rng& rng,
                           const ToyOptions& opt = {});
/// Renders the six channels for fixed conditioning (boxes are rasterized as given).
HeatmapSet render_toy_sample(const std::string& id, const CircuitParams& params, Rng& rng,
                             const ToyOptions& opt = {});
std::vector<HeatmapSet> make_toy_samples(int n, int height, int width, std::uint64_t seed,
                                         const ToyOptions& opt = {});
/// Generates and writes n samples under `dir` (split tag "train").
DatasetManifest make_toy_dataset(int n, int height, int width, std::uint64_t seed,
                                 const std::filesystem::path& dir, const ToyOptions& opt = {});

/// Separable Gaussian blur of an H x W plane with clamped borders.
std::vector<float> gaussian_blur(std::span<const float> plane, int height, int width,
                                 double sigma);

}  // namespace dali::data
