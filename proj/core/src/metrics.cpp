#include "dali/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

namespace dali::metrics {

MapRef channel_map(const data::HeatmapSet& s, data::Channel c) {
  return {s.channel(c), s.height(), s.width()};
}

std::vector<MapRef> channel_maps(const std::vector<data::HeatmapSet>& set, data::Channel c) {
  std::vector<MapRef> out;
  out.reserve(set.size());
  for (const auto& s : set) out.push_back(channel_map(s, c));
  return out;
}

namespace {

void require_map(const MapRef& m, const char* what) {
  if (m.height <= 0 || m.width <= 0 || m.values.size() != static_cast<std::size_t>(m.height) * m.width)
    throw ShapeError(std::string(what) + ": empty or malformed map");
}

void require_same(const MapRef& x, const MapRef& y, const char* what) {
  require_map(x, what);
  require_map(y, what);
  if (x.height != y.height || x.width != y.width)
    throw ShapeError(std::string(what) + ": maps differ in size");
}

int bin_of(double v, int bins) {
  return std::clamp(static_cast<int>(std::floor(v * bins)), 0, bins - 1);
}

// Overlap of pixel [p, p + 1) with [lo, hi).
double overlap(int p, double lo, double hi) {
  return std::max(0.0, std::min<double>(p + 1, hi) - std::max<double>(p, lo));
}

}  // namespace

std::vector<double> default_features(const MapRef& map) {
  require_map(map, "default_features");
  const int h = map.height, w = map.width;
  std::vector<double> f;
  f.reserve(kDefaultFeatureDim);
  const double ch = h / 8.0, cw = w / 8.0;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double acc = 0;
      for (int y = static_cast<int>(std::floor(i * ch)); y < std::min(h, static_cast<int>(std::ceil((i + 1) * ch))); ++y) {
        const double wy = overlap(y, i * ch, (i + 1) * ch);
        for (int x = static_cast<int>(std::floor(j * cw)); x < std::min(w, static_cast<int>(std::ceil((j + 1) * cw))); ++x)
          acc += wy * overlap(x, j * cw, (j + 1) * cw) * map.values[y * w + x];
      }
      f.push_back(acc / (ch * cw));
    }
  const double n = static_cast<double>(map.values.size());
  std::vector<double> hist(16, 0.0);
  double mean = 0;
  for (float v : map.values) {
    hist[bin_of(v, 16)] += 1;
    mean += v;
  }
  mean /= n;
  double var = 0;
  for (float v : map.values) var += (v - mean) * (v - mean);
  for (double c : hist) f.push_back(c / n);
  const auto hs = hotspot_fraction(map);
  f.push_back(mean);
  f.push_back(std::sqrt(var / n));
  f.push_back(hs.hot);
  f.push_back(hs.low);
  return f;
}

FeatureExtractor default_extractor() { return {"default", kDefaultFeatureDim, default_features}; }

GaussianSummary fit_gaussian(const std::vector<std::vector<double>>& rows, double shrinkage) {
  if (rows.empty()) throw ShapeError("fit_gaussian: empty set");
  const int d = static_cast<int>(rows[0].size());
  const auto n = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<int>(rows[i].size()) != d) throw ShapeError("fit_gaussian: ragged rows");
    for (int j = 0; j < d; ++j) x(i, j) = rows[i][j];
  }
  const Eigen::VectorXd mu = x.colwise().mean();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  if (n > 1) {
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / static_cast<double>(n - 1);
  }
  if (n < d + 1) cov.diagonal().array() += shrinkage;
  GaussianSummary g;
  g.dim = d;
  g.mu.assign(mu.data(), mu.data() + d);
  g.cov.resize(static_cast<std::size_t>(d) * d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g.cov[i * d + j] = cov(i, j);
  return g;
}

namespace {

Eigen::MatrixXd as_matrix(const GaussianSummary& g) {
  Eigen::MatrixXd m(g.dim, g.dim);
  for (int i = 0; i < g.dim; ++i)
    for (int j = 0; j < g.dim; ++j) m(i, j) = g.cov[i * g.dim + j];
  return m;
}

Eigen::VectorXd psd_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es,
                                const char* what) {
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8) throw NumericError(std::string(what) + ": covariance is not PSD");
    ev(i) = std::max(ev(i), 0.0);
  }
  return ev;
}

}  // namespace

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.dim != b.dim || a.dim < 1) throw ShapeError("frechet_distance: dimension mismatch");
  const Eigen::MatrixXd sa = as_matrix(a), sb = as_matrix(b);
  for (const auto* m : {&sa, &sb})
    if (((*m) - m->transpose()).cwiseAbs().maxCoeff() > 1e-10)
      throw NumericError("frechet_distance: covariance is not symmetric");
  double mean_term = 0;
  for (int i = 0; i < a.dim; ++i) mean_term += (a.mu[i] - b.mu[i]) * (a.mu[i] - b.mu[i]);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
  const Eigen::VectorXd la = psd_eigenvalues(ea, "frechet_distance");
  psd_eigenvalues(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sb, Eigen::EigenvaluesOnly),
                  "frechet_distance");
  const Eigen::MatrixXd root_a =
      ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = root_a * sb * root_a;
  m = 0.5 * (m + m.transpose());
  const Eigen::VectorXd lm =
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues();
  double tr_root = 0;
  for (Eigen::Index i = 0; i < lm.size(); ++i) tr_root += std::sqrt(std::max(lm(i), 0.0));
  return std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * tr_root);
}

double fid(const std::vector<MapRef>& a, const std::vector<MapRef>& b,
           const FeatureExtractor& extractor) {
  if (a.empty() || b.empty()) throw ShapeError("fid: empty set");
  auto features = [&](const std::vector<MapRef>& set) {
    std::vector<std::vector<double>> rows;
    for (const auto& m : set) {
      rows.push_back(extractor.extract(m));
      if (static_cast<int>(rows.back().size()) != extractor.dim)
        throw ShapeError("fid: extractor '" + extractor.name + "' returned the wrong dimension");
    }
    return rows;
  };
  return frechet_distance(fit_gaussian(features(a)), fit_gaussian(features(b)));
}

// ---------------------------------------------------------------------------
// SSIM

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_window() {
  static const std::vector<double> g = [] {
    std::vector<double> k(kSsimWindow);
    double s = 0;
    for (int i = 0; i < kSsimWindow; ++i) {
      const double d = i - kSsimWindow / 2;
      s += k[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
    }
    for (auto& v : k) v /= s;
    return k;
  }();
  return g;
}

// Valid-mode separable Gaussian filter of f(i) over an h x w grid.
template <class F>
std::vector<double> filter_valid(int h, int w, F&& f) {
  const auto& g = gaussian_window();
  const int oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[k] * f(y * w + x + k);
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

// Per-map moments reused across pairs.
struct Moments {
  bool global = false;
  std::vector<double> mu, var;  // local maps, or one entry each when global
};

Moments moments(const MapRef& m) {
  Moments r;
  const auto& v = m.values;
  if (m.height < kSsimWindow || m.width < kSsimWindow) {
    r.global = true;
    double s = 0, sq = 0;
    for (float x : v) s += x, sq += static_cast<double>(x) * x;
    const double n = static_cast<double>(v.size());
    r.mu = {s / n};
    r.var = {sq / n - r.mu[0] * r.mu[0]};
    return r;
  }
  r.mu = filter_valid(m.height, m.width, [&](int i) { return static_cast<double>(v[i]); });
  const auto sq = filter_valid(m.height, m.width,
                               [&](int i) { return static_cast<double>(v[i]) * v[i]; });
  r.var.resize(sq.size());
  for (std::size_t i = 0; i < sq.size(); ++i) r.var[i] = sq[i] - r.mu[i] * r.mu[i];
  return r;
}

double ssim_from(const MapRef& x, const Moments& mx, const MapRef& y, const Moments& my) {
  std::vector<double> cross;
  if (mx.global) {
    double s = 0;
    for (std::size_t i = 0; i < x.values.size(); ++i)
      s += static_cast<double>(x.values[i]) * y.values[i];
    cross = {s / static_cast<double>(x.values.size())};
  } else {
    cross = filter_valid(x.height, x.width, [&](int i) {
      return static_cast<double>(x.values[i]) * y.values[i];
    });
  }
  double acc = 0;
  for (std::size_t i = 0; i < cross.size(); ++i) {
    const double cov = cross[i] - mx.mu[i] * my.mu[i];
    const double num = (2 * mx.mu[i] * my.mu[i] + kC1) * (2 * cov + kC2);
    const double den =
        (mx.mu[i] * mx.mu[i] + my.mu[i] * my.mu[i] + kC1) * (mx.var[i] + my.var[i] + kC2);
    acc += num / den;
  }
  return acc / static_cast<double>(cross.size());
}

}  // namespace

SsimResult ssim(const MapRef& x, const MapRef& y) {
  require_same(x, y, "ssim");
  const Moments mx = moments(x), my = moments(y);
  return {ssim_from(x, mx, y, my), mx.global};
}

double l1_map(const MapRef& x, const MapRef& y) {
  require_same(x, y, "l1_map");
  double acc = 0;
  for (std::size_t i = 0; i < x.values.size(); ++i)
    acc += std::abs(static_cast<double>(x.values[i]) - y.values[i]);
  return acc / static_cast<double>(x.values.size());
}

HotspotFractions hotspot_fraction(const MapRef& map, double hi, double lo) {
  require_map(map, "hotspot_fraction");
  std::size_t hot = 0, low = 0;
  for (float v : map.values) {
    hot += v > hi;
    low += v < lo;
  }
  const double n = static_cast<double>(map.values.size());
  return {static_cast<double>(hot) / n, static_cast<double>(low) / n};
}

PairwiseSsim pairwise_ssim(const std::vector<MapRef>& maps, int workers, int bins) {
  if (maps.size() < 2) throw RangeError("pairwise_ssim needs at least two maps");
  if (bins < 1) throw RangeError("pairwise_ssim needs at least one bin");
  for (const auto& m : maps) require_same(m, maps[0], "pairwise_ssim");
  const std::size_t n = maps.size();
  std::vector<Moments> mom(n);
  for (std::size_t i = 0; i < n; ++i) mom[i] = moments(maps[i]);

  // Pair (i, j), i < j, lives at offset(i) + (j - i - 1).
  std::vector<std::size_t> offset(n, 0);
  for (std::size_t i = 1; i < n; ++i) offset[i] = offset[i - 1] + (n - i);
  std::vector<double> values(n * (n - 1) / 2);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i + 1 < n; i = next++)
      for (std::size_t j = i + 1; j < n; ++j)
        values[offset[i] + (j - i - 1)] = ssim_from(maps[i], mom[i], maps[j], mom[j]);
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::max(1, workers); ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  PairwiseSsim r;
  r.histogram.assign(static_cast<std::size_t>(bins), 0);
  r.comparisons = static_cast<std::int64_t>(values.size());
  double sum = 0;
  for (double v : values) {
    sum += v;
    ++r.histogram[bin_of(v, bins)];
  }
  r.average = sum / static_cast<double>(values.size());
  double sq = 0;
  for (double v : values) sq += (v - r.average) * (v - r.average);
  r.stdv = std::sqrt(sq / static_cast<double>(values.size()));
  return r;
}

HistogramStats histogram_stats(const std::vector<MapRef>& maps, int bins) {
  if (maps.empty()) throw ShapeError("histogram_stats: empty set");
  if (bins < 1) throw RangeError("histogram_stats needs at least one bin");
  HistogramStats h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  double sum = 0;
  for (const auto& m : maps) {
    require_map(m, "histogram_stats");
    for (float v : m.values) {
      ++h.counts[bin_of(v, bins)];
      sum += v;
    }
    h.pixels += static_cast<std::int64_t>(m.values.size());
  }
  h.mean = sum / static_cast<double>(h.pixels);
  double sq = 0;
  for (const auto& m : maps)
    for (float v : m.values) sq += (v - h.mean) * (v - h.mean);
  h.stdv = std::sqrt(sq / static_cast<double>(h.pixels));
  for (auto c : h.counts) h.frequencies.push_back(static_cast<double>(c) / static_cast<double>(h.pixels));
  return h;
}

const std::vector<std::string>& feature_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c;
    for (const char* ch : {"rudy", "ir_drop", "power", "scaled_power"})
      for (const char* stat : {"avg", "std", "hotspot"}) c.push_back(std::string(ch) + "_" + stat);
    c.push_back("aspect_ratio");
    return c;
  }();
  return cols;
}

std::vector<FeatureRow> export_features(const std::vector<data::HeatmapSet>& samples) {
  using data::Channel;
  std::vector<FeatureRow> rows;
  for (const auto& s : samples) {
    FeatureRow r{s.id, {}};
    for (Channel c : {Channel::rudy, Channel::ir_drop, Channel::power, Channel::scaled_power}) {
      const auto m = channel_map(s, c);
      double mean = 0, sq = 0;
      for (float v : m.values) mean += v;
      mean /= static_cast<double>(m.values.size());
      for (float v : m.values) sq += (v - mean) * (v - mean);
      r.values.push_back(mean);
      r.values.push_back(std::sqrt(sq / static_cast<double>(m.values.size())));
      r.values.push_back(hotspot_fraction(m).hot);
    }
    r.values.push_back(static_cast<double>(s.height()) / s.width());
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_features_csv(const std::vector<FeatureRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  const auto& cols = feature_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  os.precision(17);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.values.size(); ++i) os << (i ? "," : "") << r.values[i];
    os << '\n';
  }
}

}  // namespace dali::metrics
