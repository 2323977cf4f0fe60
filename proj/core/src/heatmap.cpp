#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "dali/heatmap.hpp"

namespace dali::data {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "sample I/O assumes a little-endian host");

namespace {
constexpr const char* kChannelNames[kChannels] = {"cell_density", "macro_region", "rudy",
                                                  "ir_drop",      "power",        "scaled_power"};
}

const char* channel_name(Channel c) { return kChannelNames[idx(c)]; }

Channel channel_from_name(const std::string& name) {
  for (int i = 0; i < kChannels; ++i)
    if (name == kChannelNames[i]) return static_cast<Channel>(i);
  throw ConfigError("unknown channel '" + name + "'");
}

double overlap_area(const Box& a, const Box& b) {
  const double w = std::min(a.xu, b.xu) - std::max(a.xl, b.xl);
  const double h = std::min(a.yu, b.yu) - std::max(a.yl, b.yl);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

double box_gap(const Box& a, const Box& b) {
  const double gx = std::max(a.xl, b.xl) - std::min(a.xu, b.xu);
  const double gy = std::max(a.yl, b.yl) - std::min(a.yu, b.yu);
  return std::max(gx, gy);
}

std::vector<Box> normalize_bboxes(const std::vector<Box>& pixel_boxes, int height, int width) {
  if (height <= 0 || width <= 0) throw RangeError("layout dimensions must be positive");
  std::vector<Box> out;
  out.reserve(pixel_boxes.size());
  for (const auto& b : pixel_boxes) {
    if (!(b.xl < b.xu && b.yl < b.yu)) throw RangeError("degenerate macro box");
    if (b.xl < 0 || b.yl < 0 || b.xu > width || b.yu > height)
      throw RangeError("macro box exceeds the layout");
    out.push_back({b.xl / width, b.yl / height, b.xu / width, b.yu / height});
  }
  return out;
}

void CircuitParams::validate(int max_macros) const {
  if (!(clock_period > 0) || !std::isfinite(clock_period))
    throw RangeError("clock period must be positive");
  if (!(utilization >= 0 && utilization <= 1)) throw RangeError("utilization must lie in [0,1]");
  if (height <= 0 || width <= 0) throw RangeError("layout dimensions must be positive");
  if (macro_count() > max_macros)
    throw RangeError("macro count " + std::to_string(macro_count()) + " exceeds pad length " +
                     std::to_string(max_macros));
  for (const auto& b : macros) {
    if (!(b.xl < b.xu && b.yl < b.yu)) throw RangeError("degenerate macro box");
    if (b.xl < 0 || b.yl < 0 || b.xu > 1 || b.yu > 1)
      throw RangeError("macro box outside the unit square");
  }
}

HeatmapSet::HeatmapSet(std::string id_, CircuitParams params_)
    : id(std::move(id_)), params(std::move(params_)) {
  if (params.height <= 0 || params.width <= 0)
    throw RangeError("layout dimensions must be positive");
  values.assign(kChannels * plane(), 0.0f);
}

std::span<float> HeatmapSet::channel(Channel c) {
  return std::span<float>(values).subspan(idx(c) * plane(), plane());
}

std::span<const float> HeatmapSet::channel(Channel c) const {
  return std::span<const float>(values).subspan(idx(c) * plane(), plane());
}

void check_range(const HeatmapSet& s) {
  if (s.values.size() != kChannels * s.plane())
    throw ShapeError("sample '" + s.id + "' has the wrong number of values");
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    const float v = s.values[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw RangeError("sample '" + s.id + "': value " + std::to_string(v) + " in channel " +
                       kChannelNames[i / s.plane()] + " outside [0,1]");
  }
}

// ---------------------------------------------------------------------------
// DALIPD01

namespace {

json params_to_json(const HeatmapSet& s) {
  json boxes = json::array();
  for (const auto& b : s.params.macros) boxes.push_back({b.xl, b.yl, b.xu, b.yu});
  return {{"id", s.id},
          {"clock_period", s.params.clock_period},
          {"utilization", s.params.utilization},
          {"height", s.params.height},
          {"width", s.params.width},
          {"macros", boxes}};
}

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is, const fs::path& p) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("'" + p.string() + "' is truncated");
  return v;
}

}  // namespace

void save_sample(const HeatmapSet& sample, const fs::path& path) {
  check_range(sample);
  sample.params.validate();
  const std::string blob = params_to_json(sample).dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  os.write(kSampleMagic, 8);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(sample.height()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(sample.width()));
  put<std::uint32_t>(os, kChannels);
  os.write(reinterpret_cast<const char*>(sample.values.data()),
           static_cast<std::streamsize>(sample.values.size() * sizeof(float)));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(blob.size()));
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!os) throw FormatError("failed writing '" + path.string() + "'");
}

HeatmapSet load_sample(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open sample '" + path.string() + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kSampleMagic, 8) != 0)
    throw FormatError("'" + path.string() + "' is not a DALIPD01 sample");
  const auto h = take<std::uint32_t>(is, path);
  const auto w = take<std::uint32_t>(is, path);
  const auto c = take<std::uint32_t>(is, path);
  if (c != kChannels) throw FormatError("'" + path.string() + "': expected 6 channels");
  if (h == 0 || w == 0 || h > 16384 || w > 16384)
    throw FormatError("'" + path.string() + "': implausible extent");
  std::vector<float> values(static_cast<std::size_t>(c) * h * w);
  is.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!is) throw FormatError("'" + path.string() + "' is truncated");
  const auto len = take<std::uint32_t>(is, path);
  std::string blob(len, '\0');
  is.read(blob.data(), len);
  if (!is) throw FormatError("'" + path.string() + "': metadata truncated");

  HeatmapSet s;
  try {
    const json j = json::parse(blob);
    s.id = j.at("id").get<std::string>();
    s.params.clock_period = j.at("clock_period").get<double>();
    s.params.utilization = j.at("utilization").get<double>();
    s.params.height = j.at("height").get<int>();
    s.params.width = j.at("width").get<int>();
    for (const auto& b : j.at("macros"))
      s.params.macros.push_back({b.at(0).get<double>(), b.at(1).get<double>(),
                                 b.at(2).get<double>(), b.at(3).get<double>()});
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "': bad metadata: " + e.what());
  }
  if (s.params.height != static_cast<int>(h) || s.params.width != static_cast<int>(w))
    throw FormatError("'" + path.string() + "': metadata extent disagrees with header");
  s.values = std::move(values);
  check_range(s);
  s.params.validate();
  return s;
}

std::vector<float> rasterize_boxes(const std::vector<Box>& boxes, int height, int width) {
  std::vector<float> plane(static_cast<std::size_t>(height) * width, 0.0f);
  for (const auto& b : boxes) {
    // Pixel (x, y) is covered when its centre lies in [xl, xu) x [yl, yu).
    const int x0 = std::max(0, static_cast<int>(std::ceil(b.xl * width - 0.5)));
    const int x1 = std::min(width, static_cast<int>(std::ceil(b.xu * width - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(b.yl * height - 0.5)));
    const int y1 = std::min(height, static_cast<int>(std::ceil(b.yu * height - 0.5)));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) plane[static_cast<std::size_t>(y) * width + x] = 1.0f;
  }
  return plane;
}

// ---------------------------------------------------------------------------
// Manifests

ManifestEntry make_entry(const HeatmapSet& s, const std::string& path, const std::string& split) {
  return {s.id,           path,          split, s.params.clock_period, s.params.utilization,
          s.params.height, s.params.width, s.params.macro_count()};
}

std::vector<HeatmapSet> DatasetManifest::load_all() const {
  std::vector<HeatmapSet> out;
  out.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) out.push_back(load(i));
  return out;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  json arr = json::array();
  std::set<std::string> ids;
  for (const auto& e : m.entries) {
    if (!ids.insert(e.id).second) throw FormatError("duplicate id '" + e.id + "' in manifest");
    // Entries keep their path relative to the directory the manifest lives in.
    const fs::path target = m.base_dir / e.path;
    const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
    std::string rel = fs::weakly_canonical(dir) == fs::weakly_canonical(m.base_dir)
                          ? e.path
                          : fs::relative(target, dir).generic_string();
    arr.push_back({{"id", e.id},
                   {"path", rel},
                   {"split", e.split},
                   {"clock_period", e.clock_period},
                   {"utilization", e.utilization},
                   {"height", e.height},
                   {"width", e.width},
                   {"num_macros", e.num_macros}});
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  os << arr.dump(2) << '\n';
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open manifest '" + path.string() + "'");
  json arr;
  try {
    arr = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
  if (!arr.is_array()) throw FormatError("manifest '" + path.string() + "' is not a JSON array");
  DatasetManifest m;
  m.base_dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  std::set<std::string> ids;
  for (const auto& j : arr) {
    ManifestEntry e;
    try {
      e.id = j.at("id").get<std::string>();
      e.path = j.at("path").get<std::string>();
      e.split = j.at("split").get<std::string>();
      e.clock_period = j.at("clock_period").get<double>();
      e.utilization = j.at("utilization").get<double>();
      e.height = j.at("height").get<int>();
      e.width = j.at("width").get<int>();
      e.num_macros = j.at("num_macros").get<int>();
    } catch (const json::exception& ex) {
      throw FormatError("manifest '" + path.string() + "': bad entry: " + ex.what());
    }
    if (!ids.insert(e.id).second) throw FormatError("duplicate id '" + e.id + "' in manifest");
    if (!fs::exists(m.base_dir / e.path))
      throw FormatError("manifest entry '" + e.id + "' references missing file '" + e.path + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

DatasetManifest write_dataset(const std::vector<HeatmapSet>& samples, const fs::path& dir,
                              const std::string& split) {
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (!ids.insert(s.id).second) throw FormatError("duplicate sample id '" + s.id + "'");
    check_range(s);
  }
  fs::create_directories(dir);
  DatasetManifest m;
  m.base_dir = dir;
  for (const auto& s : samples) {
    const std::string rel = s.id + ".dpd";
    save_sample(s, dir / rel);
    m.entries.push_back(make_entry(s, rel, split));
  }
  save_manifest(m, dir / "manifest.json");
  return m;
}

std::string design_of(const std::string& id) {
  const auto pos = id.find('_');
  return pos == std::string::npos ? id : id.substr(0, pos);
}

// ---------------------------------------------------------------------------
// Splitting

namespace {

bool matches(const ManifestEntry& e, const ParamOption& o) {
  constexpr double tol = 1e-9;
  if (o.key == "clock_period") return std::abs(e.clock_period - o.value) < tol;
  if (o.key == "utilization") return std::abs(e.utilization - o.value) < tol;
  if (o.key == "num_macros") return std::abs(e.num_macros - o.value) < tol;
  throw ConfigError("unknown parameter option key '" + o.key + "'");
}

}  // namespace

SplitResult split_dataset(const DatasetManifest& m, const std::vector<std::string>& held_out_designs,
                          const std::vector<ParamOption>& held_out_options) {
  if (held_out_designs.empty()) throw ConfigError("split: no held-out designs given");
  const std::set<std::string> held(held_out_designs.begin(), held_out_designs.end());
  SplitResult r;
  r.train.base_dir = m.base_dir;
  r.test.base_dir = m.base_dir;
  for (const auto& e : m.entries) {
    if (held.count(design_of(e.id))) {
      r.test.entries.push_back(e);
      r.test.entries.back().split = "test";
      continue;
    }
    const bool excluded = std::any_of(held_out_options.begin(), held_out_options.end(),
                                      [&](const ParamOption& o) { return matches(e, o); });
    if (!excluded) {
      r.train.entries.push_back(e);
      r.train.entries.back().split = "train";
    }
  }
  if (r.test.empty()) throw ConfigError("split: test set is empty");
  if (r.train.empty()) throw ConfigError("split: train set is empty");
  return r;
}

}  // namespace dali::data
