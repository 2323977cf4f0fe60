#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dali/heatmap.hpp"
#include "dali/pipeline.hpp"
#include "dali/rng.hpp"

namespace dali::data {

std::vector<float> gaussian_blur(std::span<const float> plane, int height, int width,
                                 double sigma) {
  if (!(sigma > 0)) return {plane.begin(), plane.end()};
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double ks = 0;
  for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;

  std::vector<double> tmp(plane.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i)
        acc += k[i + r] * plane[y * width + std::clamp(x + i, 0, width - 1)];
      tmp[y * width + x] = acc;
    }
  std::vector<float> out(plane.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[std::clamp(y + i, 0, height - 1) * width + x];
      out[y * width + x] = static_cast<float>(acc);
    }
  return out;
}

namespace {

// Boxes snapped to the pixel grid with at least one clear pixel between them.
std::vector<Box> toy_boxes(int m, double u, int h, int w, Rng& rng) {
  pipeline::BoxSamplerOptions opt;
  opt.min_gap = std::max(0.02, 3.0 / std::min(h, w));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<Box> boxes;
    try {
      boxes = pipeline::sample_macro_boxes(m, u, rng, opt);
    } catch (const InfeasibleError&) {
      continue;
    }
    bool ok = true;
    for (auto& b : boxes) {
      b = {std::round(b.xl * w) / w, std::round(b.yl * h) / h, std::round(b.xu * w) / w,
           std::round(b.yu * h) / h};
      if (b.width() * w < 4 - 1e-9 || b.height() * h < 4 - 1e-9) ok = false;
    }
    for (std::size_t i = 0; ok && i < boxes.size(); ++i)
      for (std::size_t j = i + 1; ok && j < boxes.size(); ++j)
        if (box_gap(boxes[i], boxes[j]) < 1.0 / std::min(h, w) - 1e-9) ok = false;
    if (ok) return boxes;
  }
  throw InfeasibleError("toy data: could not place " + std::to_string(m) + " macros on a " +
                        std::to_string(h) + "x" + std::to_string(w) + " grid");
}

}  // namespace

HeatmapSet make_toy_sample(const std::string& id, int height, int width, Rng& rng,
                           const ToyOptions& opt) {
  if (height < 16 || width < 16) throw RangeError("toy samples need at least 16x16 pixels");
  CircuitParams p;
  p.height = height;
  p.width = width;
  p.clock_period = opt.clock_periods[rng.below(opt.clock_periods.size())];
  p.utilization = opt.utilizations[rng.below(opt.utilizations.size())];
  const int m = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.max_macros)));
  p.macros = toy_boxes(m, p.utilization, height, width, rng);
  return render_toy_sample(id, p, rng, opt);
}

HeatmapSet render_toy_sample(const std::string& id, const CircuitParams& p, Rng& rng,
                             const ToyOptions& opt) {
  p.validate();
  const int height = p.height, width = p.width;
  const int design = [&] {
    // Designs differ in texture scale; the design index is encoded in the id.
    const std::string d = design_of(id);
    return d.size() > 1 && d[0] == 'd' ? std::atoi(d.c_str() + 1) : 0;
  }();

  HeatmapSet s(id, p);
  const std::size_t n = s.plane();
  auto macro = s.channel(Channel::macro_region);
  const auto mask = rasterize_boxes(p.macros, height, width);
  std::copy(mask.begin(), mask.end(), macro.begin());

  // Cell density: utilization-driven level plus smooth zero-mean texture.
  std::vector<float> noise(n);
  for (auto& v : noise) v = static_cast<float>(rng.normal());
  noise = gaussian_blur(noise, height, width, 2.0 + 0.4 * (design % 6));
  double mean = 0, sq = 0;
  std::size_t open = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i] == 0.0f) {
      mean += noise[i];
      ++open;
    }
  mean /= std::max<std::size_t>(open, 1);
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i] == 0.0f) sq += (noise[i] - mean) * (noise[i] - mean);
  const double sd = std::sqrt(sq / std::max<std::size_t>(open, 1)) + 1e-12;
  auto cd = s.channel(Channel::cell_density);
  const double level = opt.density_gain * p.utilization;
  for (std::size_t i = 0; i < n; ++i)
    cd[i] = mask[i] != 0.0f ? 0.0f
                            : static_cast<float>(std::clamp(
                                  level + opt.density_noise * (noise[i] - mean) / sd, 0.0, 1.0));

  // Power follows density outside macros; macros carry a flat pedestal.
  const double gain = rng.uniform(0.5, 1.0);
  const double pedestal = rng.uniform(0.3, 0.7);
  const double toggle = rng.uniform(0.2, 1.0);
  auto power = s.channel(Channel::power);
  auto scaled = s.channel(Channel::scaled_power);
  for (std::size_t i = 0; i < n; ++i) {
    power[i] = mask[i] != 0.0f ? static_cast<float>(pedestal) : static_cast<float>(cd[i] * gain);
    scaled[i] = static_cast<float>(power[i] * toggle);
  }

  // RUDY: blurred density with emphasis on the ring just outside each macro.
  auto rudy = s.channel(Channel::rudy);
  const auto blurred = gaussian_blur(cd, height, width, 1.5);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      bool edge = false;
      if (mask[i] == 0.0f)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < height && xx >= 0 && xx < width && mask[yy * width + xx] != 0.0f)
              edge = true;
          }
      rudy[i] = static_cast<float>(std::clamp(blurred[i] + (edge ? 0.25 : 0.0), 0.0, 1.0));
    }

  // IR drop: wide blur of power, normalised to a unit peak.
  auto ir = s.channel(Channel::ir_drop);
  const auto drop = gaussian_blur(power, height, width, 4.0);
  const float peak = *std::max_element(drop.begin(), drop.end());
  for (std::size_t i = 0; i < n; ++i)
    ir[i] = peak > 0 ? std::clamp(drop[i] / peak, 0.0f, 1.0f) : 0.0f;
  return s;
}

std::vector<HeatmapSet> make_toy_samples(int n, int height, int width, std::uint64_t seed,
                                         const ToyOptions& opt) {
  if (n < 0) throw RangeError("sample count must be non-negative");
  if (opt.designs < 1 || opt.max_macros < 1 || opt.clock_periods.empty() ||
      opt.utilizations.empty())
    throw ConfigError("invalid toy dataset options");
  std::vector<HeatmapSet> out;
  out.reserve(static_cast<std::size_t>(n));
  const Rng master(seed);
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "d%d_%04d", i % opt.designs, i);
    Rng rng = master.split(static_cast<std::uint64_t>(i));
    out.push_back(make_toy_sample(id, height, width, rng, opt));
  }
  return out;
}

DatasetManifest make_toy_dataset(int n, int height, int width, std::uint64_t seed,
                                 const std::filesystem::path& dir, const ToyOptions& opt) {
  return write_dataset(make_toy_samples(n, height, width, seed, opt), dir, "train");
}

}  // namespace dali::data
