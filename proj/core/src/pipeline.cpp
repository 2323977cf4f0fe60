#include "dali/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numeric>
#include <thread>

namespace dali::pipeline {

using data::Channel;

// ---------------------------------------------------------------------------
// Box sampling

std::vector<Box> sample_macro_boxes_with_area(int m, double total_area, Rng& rng,
                                              const BoxSamplerOptions& opt) {
  if (m < 0) throw RangeError("macro count must be non-negative");
  if (m == 0) return {};
  if (!(total_area > 0 && total_area < 1)) throw RangeError("macro area must lie in (0,1)");
  if (!(opt.aspect_lo > 0 && opt.aspect_lo <= opt.aspect_hi))
    throw RangeError("invalid aspect bounds");

  // Split the area with random weights, then place largest first.
  std::vector<double> weights(static_cast<std::size_t>(m));
  for (auto& w : weights) w = rng.uniform(0.5, 1.5);
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<double> areas;
  for (double w : weights) areas.push_back(total_area * w / wsum);
  std::sort(areas.begin(), areas.end(), std::greater<>());

  const double log_lo = std::log(opt.aspect_lo), log_hi = std::log(opt.aspect_hi);
  std::vector<Box> placed;
  for (double a : areas) {
    bool ok = false;
    for (int t = 0; t < opt.max_tries && !ok; ++t) {
      const double r = std::exp(rng.uniform(log_lo, log_hi));
      const double w = std::sqrt(a * r), h = std::sqrt(a / r);
      if (w >= 1.0 || h >= 1.0) continue;
      const double x = rng.uniform(0.0, 1.0 - w), y = rng.uniform(0.0, 1.0 - h);
      const Box b{x, y, x + w, y + h};
      ok = std::all_of(placed.begin(), placed.end(),
                       [&](const Box& o) { return box_gap(b, o) >= opt.min_gap; });
      if (ok) placed.push_back(b);
    }
    if (!ok)
      throw InfeasibleError("could not place " + std::to_string(m) + " macros with total area " +
                            std::to_string(total_area) + " after " +
                            std::to_string(opt.max_tries) + " tries");
  }
  return placed;
}

std::vector<Box> sample_macro_boxes(int m, double utilization, Rng& rng,
                                    const BoxSamplerOptions& opt) {
  if (m < 0) throw RangeError("macro count must be non-negative");
  if (!(utilization >= 0 && utilization <= 1)) throw RangeError("utilization must lie in [0,1]");
  if (m == 0) return {};
  double hi = std::min(opt.area_hi, 1.0 - utilization);
  if (hi > opt.area_lo - 1e-9) hi = std::max(hi, opt.area_lo);
  if (hi < opt.area_lo)
    throw InfeasibleError("utilization " + std::to_string(utilization) +
                          " leaves no room for the minimum macro area");
  return sample_macro_boxes_with_area(m, rng.uniform(opt.area_lo, hi), rng, opt);
}

// ---------------------------------------------------------------------------
// Components and rectification

std::vector<Component> connected_components(std::span<const float> mask, int height, int width) {
  std::vector<int> label(mask.size(), -1);
  std::vector<Component> out;
  std::vector<int> stack;
  for (int start = 0; start < height * width; ++start) {
    if (mask[start] == 0.0f || label[start] >= 0) continue;
    const int id = static_cast<int>(out.size());
    Component c{{width, height, 0, 0}, 0};
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / width, x = p % width;
      c.pixels++;
      c.bbox.x0 = std::min(c.bbox.x0, x);
      c.bbox.y0 = std::min(c.bbox.y0, y);
      c.bbox.x1 = std::max(c.bbox.x1, x + 1);
      c.bbox.y1 = std::max(c.bbox.y1, y + 1);
      const int nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= height || n[1] < 0 || n[1] >= width) continue;
        const int q = n[0] * width + n[1];
        if (mask[q] != 0.0f && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
    out.push_back(c);
  }
  return out;
}

namespace {

// Shrinks a component's box while its weakest border row or column is less
// than half covered. Strips thin protrusions; tolerates sparse holes.
PixelRect trim(const std::vector<float>& mask, int width, PixelRect r) {
  auto coverage = [&](int x0, int y0, int x1, int y1) {
    int on = 0;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) on += mask[y * width + x] != 0.0f;
    return on / static_cast<double>((x1 - x0) * (y1 - y0));
  };
  while (r.x1 > r.x0 && r.y1 > r.y0) {
    const double c[4] = {coverage(r.x0, r.y0, r.x1, r.y0 + 1), coverage(r.x0, r.y1 - 1, r.x1, r.y1),
                         coverage(r.x0, r.y0, r.x0 + 1, r.y1), coverage(r.x1 - 1, r.y0, r.x1, r.y1)};
    const int k = static_cast<int>(std::min_element(c, c + 4) - c);
    if (c[k] >= 0.5) break;
    if (k == 0) ++r.y0;
    if (k == 1) --r.y1;
    if (k == 2) ++r.x0;
    if (k == 3) --r.x1;
  }
  return r;
}

}  // namespace

std::vector<float> rectify_macros(std::span<const float> macro, int height, int width,
                                  const PostProcessOptions& opt) {
  std::vector<float> mask(macro.size());
  for (std::size_t i = 0; i < macro.size(); ++i)
    mask[i] = macro[i] > opt.threshold ? 1.0f : 0.0f;

  // First pass: drop specks, trim and fill. Later passes only fill, merging
  // rectangles that came to touch or overlap, until every component is a rectangle.
  bool first = true;
  for (;;) {
    const auto comps = connected_components(mask, height, width);
    bool changed = false;
    std::vector<float> next(mask.size(), 0.0f);
    for (const auto& c : comps) {
      PixelRect r = c.bbox;
      if (first) {
        if (c.pixels < opt.min_component) {
          changed = true;
          continue;
        }
        r = trim(mask, width, r);
      }
      if (c.pixels != c.bbox.area() || r.area() != c.bbox.area()) changed = true;
      for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x) next[y * width + x] = 1.0f;
    }
    mask = std::move(next);
    first = false;
    if (!changed) break;
  }
  return mask;
}

HeatmapSet post_process(std::span<const float> raw, const CircuitParams& target,
                        const std::string& id, const PostProcessOptions& opt) {
  HeatmapSet s(id, target);
  const std::size_t plane = s.plane();
  if (raw.size() != data::kChannels * plane)
    throw ShapeError("post_process: raw tensor does not match the requested extent");
  std::copy(raw.begin(), raw.end(), s.values.begin());
  for (auto& v : s.values) v = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);

  auto macro = s.channel(Channel::macro_region);
  const auto rect = rectify_macros(macro, s.height(), s.width(), opt);
  std::copy(rect.begin(), rect.end(), macro.begin());

  auto cd = s.channel(Channel::cell_density);
  for (std::size_t i = 0; i < plane; ++i)
    if (macro[i] != 0.0f) cd[i] = 0.0f;

  for (Channel ch : {Channel::power, Channel::scaled_power}) {
    auto p = s.channel(ch);
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < plane; ++i)
      if (macro[i] != 0.0f) {
        acc += p[i];
        ++n;
      }
    const float pedestal = n ? static_cast<float>(acc / static_cast<double>(n)) : 0.0f;
    for (std::size_t i = 0; i < plane; ++i) {
      if (macro[i] != 0.0f)
        p[i] = std::max(p[i], pedestal);
      else
        p[i] = std::min(p[i], static_cast<float>(opt.power_floor) + cd[i]);
    }
  }
  for (auto& v : s.values) v = std::clamp(v, 0.0f, 1.0f);
  return s;
}

// ---------------------------------------------------------------------------
// Checker

namespace {

double mean_open_density(const HeatmapSet& s) {
  auto cd = s.channel(Channel::cell_density);
  auto macro = s.channel(Channel::macro_region);
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < cd.size(); ++i)
    if (macro[i] <= 0.5f) {
      acc += cd[i];
      ++n;
    }
  return n ? acc / static_cast<double>(n) : 0.0;
}

Verdict reject(char code, std::string why) { return {false, code, std::move(why)}; }

}  // namespace

double utilization_proxy(const HeatmapSet& s, double calibration) {
  if (!(calibration > 0)) throw RangeError("calibration constant must be positive");
  return mean_open_density(s) / calibration;
}

double fit_utilization_calibration(const std::vector<HeatmapSet>& samples) {
  double num = 0, den = 0;
  for (const auto& s : samples) {
    const double u = s.params.utilization;
    num += mean_open_density(s) * u;
    den += u * u;
  }
  if (!(den > 0) || !(num > 0))
    throw RangeError("cannot fit utilization calibration on this sample set");
  return num / den;
}

Verdict check(const HeatmapSet& s, const CircuitParams& target, double calibration,
              const CheckOptions& opt) {
  for (float v : s.values)
    if (!(v >= 0.0f && v <= 1.0f)) return reject('e', "value outside [0,1]");

  auto macro = s.channel(Channel::macro_region);
  std::vector<float> bin(macro.size());
  for (std::size_t i = 0; i < macro.size(); ++i) bin[i] = macro[i] > 0.5f ? 1.0f : 0.0f;
  const auto comps = connected_components(bin, s.height(), s.width());
  for (std::size_t i = 0; i < comps.size(); ++i) {
    if (comps[i].pixels != comps[i].bbox.area())
      return reject('b', "macro region is not a union of disjoint rectangles");
    for (std::size_t j = i + 1; j < comps.size(); ++j) {
      const auto& a = comps[i].bbox;
      const auto& b = comps[j].bbox;
      if (std::min(a.x1, b.x1) > std::max(a.x0, b.x0) && std::min(a.y1, b.y1) > std::max(a.y0, b.y0))
        return reject('b', "macro rectangles overlap");
    }
  }

  // Overlapping rectangles fuse into one non-rectangular component, so (b) runs first.
  if (static_cast<int>(comps.size()) != target.macro_count())
    return reject('a', "found " + std::to_string(comps.size()) + " macro rectangles, expected " +
                           std::to_string(target.macro_count()));

  const double proxy = utilization_proxy(s, calibration);
  if (std::abs(proxy - target.utilization) > opt.utilization_tolerance)
    return reject('c', "utilization proxy " + std::to_string(proxy) + " vs requested " +
                           std::to_string(target.utilization));

  double requested = 0;
  for (const auto& b : target.macros) requested += b.area();
  const double achieved =
      std::count(bin.begin(), bin.end(), 1.0f) / static_cast<double>(bin.size());
  if (requested > 0 ? std::abs(achieved - requested) > opt.area_tolerance * requested
                    : achieved > 0)
    return reject('d', "macro area fraction " + std::to_string(achieved) + " vs requested " +
                           std::to_string(requested));
  return {};
}

// ---------------------------------------------------------------------------
// Generation loop

void validate_request(const GenerationRequest& r, const HeatmapGenerator& g) {
  if (r.height <= 0 || r.width <= 0) throw RangeError("request dimensions must be positive");
  const int f = g.size_multiple();
  if (r.height % f || r.width % f)
    throw RangeError("request dimensions must be divisible by " + std::to_string(f));
  if (r.macro_count < 0 || r.macro_count > g.max_macros())
    throw RangeError("macro count must lie in 0.." + std::to_string(g.max_macros()));
  if (!(r.utilization >= 0 && r.utilization <= 1))
    throw RangeError("utilization must lie in [0,1]");
  if (!(r.clock_period > 0)) throw RangeError("clock period must be positive");
  if (r.max_iterations < 1) throw RangeError("max_iterations must be at least 1");
}

GenerationReport try_generate(const GenerationRequest& r, const HeatmapGenerator& g,
                              const PipelineOptions& opt, const std::string& id) {
  validate_request(r, g);
  GenerationReport rep;
  rep.id = id;
  Rng master(r.seed);
  for (int it = 0; it < r.max_iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = master.split(static_cast<std::uint64_t>(it));
    CircuitParams target;
    target.clock_period = r.clock_period;
    target.utilization = r.utilization;
    target.height = r.height;
    target.width = r.width;
    rep.iterations = it + 1;
    Verdict v;
    try {
      Rng box_rng = rng.split("boxes");
      target.macros = sample_macro_boxes(r.macro_count, r.utilization, box_rng, opt.boxes);
      Rng gen_rng = rng.split("sample");
      const auto raw = g.generate(target, gen_rng);
      HeatmapSet s = post_process(raw, target, id, opt.post);
      v = check(s, target, opt.calibration, opt.check);
      if (v.pass) rep.sample = std::move(s);
    } catch (const InfeasibleError& e) {
      v = {false, 'f', e.what()};
    }
    rep.seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (v.pass) {
      rep.accepted = true;
      return rep;
    }
    rep.rejections.push_back(std::string(1, v.code) + ": " + v.reason);
  }
  return rep;
}

GenerationReport generate_one(const GenerationRequest& r, const HeatmapGenerator& g,
                              const PipelineOptions& opt, const std::string& id) {
  auto rep = try_generate(r, g, opt, id);
  if (!rep.accepted) {
    std::string msg = "no sample accepted after " + std::to_string(rep.iterations) + " iterations:";
    for (const auto& why : rep.rejections) msg += "\n  " + why;
    throw InfeasibleError(msg);
  }
  return rep;
}

DatasetResult generate_dataset(const std::vector<GenerationRequest>& requests,
                               const HeatmapGenerator& g, const PipelineOptions& opt,
                               std::uint64_t master_seed, int workers,
                               const std::filesystem::path& out_dir) {
  for (const auto& r : requests) validate_request(r, g);
  DatasetResult res;
  res.reports.resize(requests.size());
  std::vector<std::string> errors(requests.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      GenerationRequest r = requests[i];
      r.seed = mix64(master_seed ^ mix64(i + 1) ^ mix64(requests[i].seed + 0x9e37));
      char buf[32];
      std::snprintf(buf, sizeof buf, "gen_%05zu", i);
      try {
        res.reports[i] = try_generate(r, g, opt, buf);
      } catch (const Error& e) {
        res.reports[i].id = buf;
        res.reports[i].rejections.push_back(std::string("error: ") + e.what());
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(requests.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  std::vector<HeatmapSet> accepted;
  for (const auto& rep : res.reports)
    if (rep.accepted) accepted.push_back(rep.sample);
  res.manifest = data::write_dataset(accepted, out_dir, "generated");
  return res;
}

std::vector<GenerationRequest> load_requests(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open request file '" + path.string() + "'");
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("request file: " + std::string(e.what()));
  }
  if (!arr.is_array()) throw FormatError("request file must hold a JSON array");
  std::vector<GenerationRequest> out;
  const std::vector<std::string> known = {"height", "width", "clock_period", "utilization",
                                          "macro_count", "seed", "max_iterations"};
  for (const auto& j : arr) {
    if (!j.is_object()) throw FormatError("request entries must be objects");
    for (const auto& [k, _] : j.items())
      if (std::find(known.begin(), known.end(), k) == known.end())
        throw FormatError("unknown request key '" + k + "'");
    GenerationRequest r;
    try {
      r.height = j.value("height", r.height);
      r.width = j.value("width", r.width);
      r.clock_period = j.value("clock_period", r.clock_period);
      r.utilization = j.value("utilization", r.utilization);
      r.macro_count = j.value("macro_count", r.macro_count);
      r.seed = j.value("seed", r.seed);
      r.max_iterations = j.value("max_iterations", r.max_iterations);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("request file: " + std::string(e.what()));
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace dali::pipeline
