#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dali/metrics.hpp"
#include "dali/rng.hpp"

using namespace dali;
using namespace dali::metrics;

namespace {

struct OwnedMap {
  std::vector<float> v;
  int h, w;
  MapRef ref() const { return {v, h, w}; }
};

OwnedMap constant(int h, int w, float c) { return {std::vector<float>(h * w, c), h, w}; }

OwnedMap random_map(int h, int w, Rng& rng) {
  OwnedMap m{std::vector<float>(h * w), h, w};
  for (auto& x : m.v) x = static_cast<float>(rng.uniform());
  return m;
}

// Area-average by supersampling every pixel 8x: each output cell is then an
// exact block of (h x w) sub-pixels.
std::vector<double> supersampled_downsample(const OwnedMap& m) {
  std::vector<double> out(64, 0.0);
  for (int sy = 0; sy < 8 * m.h; ++sy)
    for (int sx = 0; sx < 8 * m.w; ++sx)
      out[(sy / m.h) * 8 + sx / m.w] += m.v[(sy / 8) * m.w + sx / 8];
  for (auto& v : out) v /= static_cast<double>(m.h) * m.w;
  return out;
}

// Brute-force SSIM with an explicit 2-D window.
double ssim_reference(const OwnedMap& x, const OwnedMap& y) {
  double g[11][11], gs = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) gs += g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  double acc = 0;
  int count = 0;
  for (int oy = 0; oy + 11 <= x.h; ++oy)
    for (int ox = 0; ox + 11 <= x.w; ++ox) {
      double mx = 0, my = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wgt = g[i][j] / gs;
          mx += wgt * x.v[(oy + i) * x.w + ox + j];
          my += wgt * y.v[(oy + i) * x.w + ox + j];
        }
      double vx = 0, vy = 0, cxy = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wgt = g[i][j] / gs;
          const double a = x.v[(oy + i) * x.w + ox + j] - mx, b = y.v[(oy + i) * x.w + ox + j] - my;
          vx += wgt * a * a;
          vy += wgt * b * b;
          cxy += wgt * a * b;
        }
      const double c1 = 1e-4, c2 = 9e-4;
      acc += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return acc / count;
}

GaussianSummary diag(std::vector<double> mu, std::vector<double> var) {
  GaussianSummary g;
  g.dim = static_cast<int>(mu.size());
  g.mu = mu;
  g.cov.assign(g.dim * g.dim, 0.0);
  for (int i = 0; i < g.dim; ++i) g.cov[i * g.dim + i] = var[i];
  return g;
}

}  // namespace

TEST(Features, ConstantMaps) {
  const auto zero = default_features(constant(16, 16, 0.0f).ref());
  ASSERT_EQ(zero.size(), 84u);
  for (int i = 0; i < 64; ++i) EXPECT_EQ(zero[i], 0.0);
  EXPECT_EQ(zero[64], 1.0);
  for (int i = 65; i < 80; ++i) EXPECT_EQ(zero[i], 0.0);
  EXPECT_EQ(zero[80], 0.0);  // mean
  EXPECT_EQ(zero[81], 0.0);  // std
  EXPECT_EQ(zero[82], 0.0);  // hot
  EXPECT_EQ(zero[83], 1.0);  // low
  const auto one = default_features(constant(16, 16, 1.0f).ref());
  EXPECT_EQ(one[79], 1.0);
  EXPECT_EQ(one[82], 1.0);
  EXPECT_EQ(one[83], 0.0);
}

TEST(Features, RandomMapMatchesReference) {
  Rng rng(1);
  for (auto [h, w] : {std::pair{48, 48}, std::pair{20, 12}, std::pair{9, 31}}) {
    const auto m = random_map(h, w, rng);
    const auto f = default_features(m.ref());
    const auto down = supersampled_downsample(m);
    for (int i = 0; i < 64; ++i) EXPECT_NEAR(f[i], down[i], 1e-6);
    std::vector<double> hist(16, 0.0);
    double mean = 0;
    for (float v : m.v) hist[std::min(15, static_cast<int>(v * 16))] += 1.0 / m.v.size(), mean += v;
    mean /= m.v.size();
    double var = 0, hot = 0, low = 0;
    for (float v : m.v) var += (v - mean) * (v - mean), hot += v > 0.9f, low += v < 0.1f;
    for (int i = 0; i < 16; ++i) EXPECT_NEAR(f[64 + i], hist[i], 1e-12);
    EXPECT_NEAR(f[80], mean, 1e-12);
    EXPECT_NEAR(f[81], std::sqrt(var / m.v.size()), 1e-12);
    EXPECT_NEAR(f[82], hot / m.v.size(), 1e-15);
    EXPECT_NEAR(f[83], low / m.v.size(), 1e-15);
  }
  EXPECT_THROW(default_features(MapRef{}), ShapeError);
}

TEST(Frechet, ClosedForms) {
  const auto a = diag({0.0}, {1.0}), b = diag({2.0}, {1.0});
  EXPECT_NEAR(frechet_distance(a, b), 4.0, 1e-8);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
  // 1-D: (mu1 - mu2)^2 + (s1 - s2)^2
  EXPECT_NEAR(frechet_distance(diag({0.5}, {4.0}), diag({-1.0}, {0.25})), 2.25 + 2.25, 1e-8);
  const auto da = diag({1, 2, 3}, {0.5, 2.0, 9.0}), db = diag({0, 2, 5}, {0.5, 8.0, 1.0});
  double expect = 0;
  for (int i = 0; i < 3; ++i)
    expect += std::pow(da.mu[i] - db.mu[i], 2) +
              std::pow(std::sqrt(da.cov[i * 4]) - std::sqrt(db.cov[i * 4]), 2);
  EXPECT_NEAR(frechet_distance(da, db), expect, 1e-8);
  EXPECT_NEAR(frechet_distance(da, db), frechet_distance(db, da), 1e-10);
  EXPECT_THROW(frechet_distance(diag({0}, {-1.0}), a), NumericError);
  EXPECT_THROW(frechet_distance(da, a), ShapeError);
}

TEST(Frechet, SymmetricOnCorrelatedSummaries) {
  Rng rng(2);
  std::vector<std::vector<double>> xa, xb;
  for (int i = 0; i < 30; ++i) {
    const double u = rng.normal(), v = rng.normal();
    xa.push_back({u, u + 0.3 * v, v});
    xb.push_back({2 * v, u - v, 0.5 * u});
  }
  const auto ga = fit_gaussian(xa), gb = fit_gaussian(xb);
  EXPECT_NEAR(frechet_distance(ga, gb), frechet_distance(gb, ga), 1e-8);
  EXPECT_GT(frechet_distance(ga, gb), 0.0);
  EXPECT_NEAR(frechet_distance(ga, ga), 0.0, 1e-6);
}

TEST(Fid, SelfIsZeroAndConstantSetsByHand) {
  Rng rng(3);
  std::vector<OwnedMap> owned;
  for (int i = 0; i < 100; ++i) owned.push_back(random_map(16, 16, rng));
  std::vector<MapRef> refs;
  for (const auto& m : owned) refs.push_back(m.ref());
  EXPECT_NEAR(fid(refs, refs), 0.0, 1e-6);

  // Constant sets have zero covariance plus the shrinkage on both sides, so
  // the trace term cancels. Mean difference: 64 pooled cells (1 each), histogram
  // bins 1 and 16 (1 each), mean 1, std 0, hot 1, low 1 -> 64 + 2 + 1 + 1 + 1.
  const auto z = constant(16, 16, 0.0f), o = constant(16, 16, 1.0f);
  const std::vector<MapRef> zeros(3, z.ref()), ones(3, o.ref());
  EXPECT_NEAR(fid(zeros, ones), 69.0, 1e-9);
  EXPECT_THROW(fid({}, ones), ShapeError);
}

TEST(Ssim, IdentityClosedFormAndSymmetry) {
  Rng rng(4);
  const auto x = random_map(32, 24, rng), y = random_map(32, 24, rng);
  EXPECT_NEAR(ssim(x.ref(), x.ref()).value, 1.0, 1e-9);
  EXPECT_EQ(ssim(x.ref(), y.ref()).value, ssim(y.ref(), x.ref()).value);
  EXPECT_NEAR(ssim(x.ref(), y.ref()).value, ssim_reference(x, y), 1e-10);
  const double c1 = 1e-4;
  EXPECT_NEAR(ssim(constant(16, 16, 0).ref(), constant(16, 16, 1).ref()).value, c1 / (1 + c1), 1e-8);
  EXPECT_FALSE(ssim(x.ref(), y.ref()).global_fallback);
  const auto s1 = random_map(8, 8, rng), s2 = random_map(8, 8, rng);
  const auto r = ssim(s1.ref(), s2.ref());
  EXPECT_TRUE(r.global_fallback);
  EXPECT_GE(r.value, -1.0);
  EXPECT_LE(r.value, 1.0);
  EXPECT_THROW(ssim(x.ref(), s1.ref()), ShapeError);
}

TEST(L1, Examples) {
  Rng rng(5);
  const auto x = random_map(10, 10, rng);
  EXPECT_EQ(l1_map(x.ref(), x.ref()), 0.0);
  const auto a = constant(10, 10, 0.3f), b = constant(10, 10, 0.4f);
  EXPECT_NEAR(l1_map(a.ref(), b.ref()), 0.1, 1e-7);
  EXPECT_THROW(l1_map(a.ref(), constant(5, 10, 0).ref()), ShapeError);
}

TEST(Hotspot, HandCounts) {
  auto m = constant(10, 10, 0.5f);
  m.v[3] = m.v[40] = m.v[99] = 0.95f;
  EXPECT_DOUBLE_EQ(hotspot_fraction(m.ref()).hot, 0.03);
  EXPECT_EQ(hotspot_fraction(constant(10, 10, 0.9f).ref()).hot, 0.0);
  EXPECT_EQ(hotspot_fraction(constant(10, 10, 0.1f).ref()).low, 0.0);
  Rng rng(6);
  const auto r = random_map(13, 7, rng);
  const auto f = hotspot_fraction(r.ref());
  int mid = 0;
  for (float v : r.v) mid += v >= 0.1f && v <= 0.9f;
  EXPECT_EQ(f.hot * 91 + f.low * 91 + mid, 91.0);
}

TEST(Pairwise, CountsAndIdenticalMaps) {
  Rng rng(7);
  const auto x = random_map(16, 16, rng);
  const std::vector<MapRef> same(10, x.ref());
  const auto p = pairwise_ssim(same);
  EXPECT_EQ(p.comparisons, 45);
  EXPECT_NEAR(p.average, 1.0, 1e-9);
  EXPECT_NEAR(p.stdv, 0.0, 1e-9);
  EXPECT_EQ(p.histogram.size(), 20u);
  EXPECT_EQ(p.histogram[19], 45);

  std::vector<OwnedMap> owned;
  for (int i = 0; i < 30; ++i) owned.push_back(random_map(12, 12, rng));
  std::vector<MapRef> refs;
  for (const auto& m : owned) refs.push_back(m.ref());
  const auto one = pairwise_ssim(refs, 1), four = pairwise_ssim(refs, 4);
  EXPECT_EQ(one.comparisons, 435);
  EXPECT_EQ(one.average, four.average);
  EXPECT_EQ(one.histogram, four.histogram);
  double direct = 0;
  for (int i = 0; i < 30; ++i)
    for (int j = i + 1; j < 30; ++j) direct += ssim(refs[i], refs[j]).value;
  EXPECT_NEAR(one.average, direct / 435, 1e-12);
  EXPECT_THROW(pairwise_ssim({x.ref()}), RangeError);
}

TEST(Histogram, ConstantAdditivityAndUniform) {
  const auto half = constant(4, 4, 0.5f);
  const auto h = histogram_stats({half.ref()}, 10);
  EXPECT_EQ(h.counts[5], 16);
  EXPECT_EQ(h.frequencies[5], 1.0);
  EXPECT_EQ(h.mean, 0.5);
  EXPECT_EQ(h.stdv, 0.0);

  Rng rng(8);
  const auto a = random_map(20, 20, rng), b = random_map(10, 30, rng);
  const auto ha = histogram_stats({a.ref()}, 7), hb = histogram_stats({b.ref()}, 7),
             hab = histogram_stats({a.ref(), b.ref()}, 7);
  for (int i = 0; i < 7; ++i) EXPECT_EQ(hab.counts[i], ha.counts[i] + hb.counts[i]);

  const auto u = random_map(200, 200, rng);
  const auto hu = histogram_stats({u.ref()}, 10);
  const double sd = std::sqrt(0.1 * 0.9 / 40000.0);
  for (double f : hu.frequencies) EXPECT_NEAR(f, 0.1, 3 * sd);
  EXPECT_THROW(histogram_stats({}, 10), ShapeError);
}

TEST(FeaturesExport, ColumnsAndRows) {
  data::CircuitParams p;
  p.clock_period = 4;
  p.utilization = 0.7;
  p.height = 16;
  p.width = 32;
  data::HeatmapSet s("x_0", p);
  auto rudy = s.channel(data::Channel::rudy);
  std::fill(rudy.begin(), rudy.end(), 0.5f);
  const auto rows = export_features({s, s, s});
  ASSERT_EQ(rows.size(), 3u);
  ASSERT_EQ(feature_columns().size(), 13u);
  ASSERT_EQ(rows[0].values.size(), 13u);
  EXPECT_EQ(rows[0].values[0], 0.5);
  EXPECT_EQ(rows[0].values[1], 0.0);
  EXPECT_EQ(rows[0].values[2], 0.0);
  EXPECT_EQ(rows[0].values[12], 0.5);

  const auto path = std::filesystem::temp_directory_path() / "dali_features_test.csv";
  write_features_csv(rows, path);
  std::ifstream is(path);
  std::string header, line;
  std::getline(is, header);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 12);
  EXPECT_EQ(header.substr(0, 8), "rudy_avg");
  int n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 3);
  std::filesystem::remove(path);
}
