#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "dali/heatmap.hpp"
#include "dali/rng.hpp"

using namespace dali;
using namespace dali::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dali_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

HeatmapSet random_sample(std::uint64_t seed, int h = 16, int w = 16) {
  Rng rng(seed);
  CircuitParams p{3.5, 0.7, h, w, {{0.1, 0.2, 0.3, 0.4}, {0.5, 0.5, 0.9, 0.75}}};
  HeatmapSet s("d1_0007", p);
  for (auto& v : s.values) v = static_cast<float>(rng.uniform());
  return s;
}

double max_abs_diff(const HeatmapSet& a, const HeatmapSet& b) {
  if (a.values.size() != b.values.size()) return 1e9;
  double m = 0;
  for (size_t i = 0; i < a.values.size(); ++i)
    m = std::max(m, static_cast<double>(std::abs(a.values[i] - b.values[i])));
  return m;
}

}  // namespace

TEST(SampleIo, RoundTripIsBitExact) {
  auto dir = scratch("io");
  auto s = random_sample(1);
  save_sample(s, dir / "a.dpd");
  auto back = load_sample(dir / "a.dpd");
  EXPECT_EQ(back, s);
  save_sample(back, dir / "b.dpd");
  EXPECT_EQ(slurp(dir / "a.dpd"), slurp(dir / "b.dpd"));
}

TEST(SampleIo, RejectsBadMagic) {
  auto dir = scratch("magic");
  auto s = random_sample(2);
  save_sample(s, dir / "a.dpd");
  auto bytes = slurp(dir / "a.dpd");
  bytes.replace(0, 4, "XXXX");
  std::ofstream(dir / "b.dpd", std::ios::binary) << bytes;
  EXPECT_THROW(load_sample(dir / "b.dpd"), FormatError);
}

TEST(SampleIo, RejectsOutOfRangeOnSave) {
  auto dir = scratch("range");
  auto s = random_sample(3);
  s.values[5] = 1.5f;
  EXPECT_THROW(save_sample(s, dir / "a.dpd"), RangeError);
  EXPECT_FALSE(fs::exists(dir / "a.dpd"));
}

TEST(SampleIo, RejectsOutOfRangeOnLoad) {
  auto dir = scratch("range_load");
  auto s = random_sample(4);
  save_sample(s, dir / "a.dpd");
  auto bytes = slurp(dir / "a.dpd");
  const float bad = 1.5f;
  bytes.replace(8 + 12, 4, reinterpret_cast<const char*>(&bad), 4);
  std::ofstream(dir / "b.dpd", std::ios::binary) << bytes;
  EXPECT_THROW(load_sample(dir / "b.dpd"), RangeError);
}

TEST(Boxes, Normalize) {
  auto b = normalize_bboxes({{0, 0, 100, 100}, {10, 20, 30, 40}}, 100, 100);
  EXPECT_EQ(b[0], (Box{0, 0, 1, 1}));
  EXPECT_DOUBLE_EQ(b[1].xl, 0.1);
  EXPECT_DOUBLE_EQ(b[1].yl, 0.2);
  EXPECT_DOUBLE_EQ(b[1].xu, 0.3);
  EXPECT_DOUBLE_EQ(b[1].yu, 0.4);
  EXPECT_THROW(normalize_bboxes({{0, 0, 101, 50}}, 100, 100), RangeError);
  EXPECT_THROW(normalize_bboxes({{5, 5, 5, 9}}, 100, 100), RangeError);
}

TEST(Augment, Rot180IsInvolution) {
  auto s = random_sample(5, 16, 24);
  auto twice = augment(augment(s, 1), 1);
  EXPECT_EQ(twice.values, s.values);
  ASSERT_EQ(twice.params.macros.size(), s.params.macros.size());
  for (size_t i = 0; i < s.params.macros.size(); ++i) {
    EXPECT_NEAR(twice.params.macros[i].xl, s.params.macros[i].xl, 1e-12);
    EXPECT_NEAR(twice.params.macros[i].yu, s.params.macros[i].yu, 1e-12);
  }
}

TEST(Augment, HorizontalFlipBox) {
  Box b = transform_box({0.1, 0.2, 0.3, 0.4}, 4);
  EXPECT_NEAR(b.xl, 0.7, 1e-12);
  EXPECT_NEAR(b.yl, 0.2, 1e-12);
  EXPECT_NEAR(b.xu, 0.9, 1e-12);
  EXPECT_NEAR(b.yu, 0.4, 1e-12);
}

TEST(Augment, AllElevenDistinct) {
  auto s = random_sample(6);
  std::vector<HeatmapSet> outs;
  for (int k = 1; k <= kAugmentations; ++k) outs.push_back(augment(s, k));
  for (auto& o : outs) EXPECT_GT(max_abs_diff(o, s), 0.0);
  for (size_t i = 0; i < outs.size(); ++i)
    for (size_t j = i + 1; j < outs.size(); ++j)
      EXPECT_GT(max_abs_diff(outs[i], outs[j]), 0.0) << i + 1 << " vs " << j + 1;
}

TEST(Augment, DihedralPreservesHistogramsAndKeepsConditioning) {
  auto s = random_sample(7, 16, 24);
  for (int k = 1; k <= 7; ++k) {
    auto o = augment(s, k);
    EXPECT_EQ(o.params.utilization, s.params.utilization);
    EXPECT_EQ(o.params.clock_period, s.params.clock_period);
    EXPECT_EQ(o.plane(), s.plane());
    for (int c = 0; c < kChannels; ++c) {
      auto a = s.channel(static_cast<Channel>(c));
      auto b = o.channel(static_cast<Channel>(c));
      std::vector<float> va(a.begin(), a.end()), vb(b.begin(), b.end());
      std::sort(va.begin(), va.end());
      std::sort(vb.begin(), vb.end());
      EXPECT_EQ(va, vb);
    }
  }
}

TEST(Augment, RotationsSwapExtent) {
  auto s = random_sample(8, 16, 24);
  for (int k : {2, 3, 6, 7}) {
    auto o = augment(s, k);
    EXPECT_EQ(o.height(), 24);
    EXPECT_EQ(o.width(), 16);
  }
}

TEST(Augment, BoxesCommuteWithPixels) {
  auto samples = make_toy_samples(6, 48, 48, 11);
  for (const auto& s : samples)
    for (int k = 1; k <= kAugmentations; ++k) {
      auto o = augment(s, k);
      auto raster = rasterize_boxes(o.params.macros, o.height(), o.width());
      auto macro = o.channel(Channel::macro_region);
      EXPECT_TRUE(std::equal(raster.begin(), raster.end(), macro.begin())) << s.id << " #" << k;
    }
}

TEST(Augment, ShiftSplitsWrappingBox) {
  CircuitParams p{2, 0.7, 16, 16, {{0.25, 0.75, 0.5, 1.0}}};
  HeatmapSet s("w_0", p);
  auto o = augment(s, 8);  // down by 2 rows
  ASSERT_EQ(o.params.macros.size(), 2u);
  EXPECT_NEAR(o.params.macros[0].yl, 0.875, 1e-12);
  EXPECT_NEAR(o.params.macros[0].yu, 1.0, 1e-12);
  EXPECT_NEAR(o.params.macros[1].yl, 0.0, 1e-12);
  EXPECT_NEAR(o.params.macros[1].yu, 0.125, 1e-12);
  EXPECT_THROW(augment(s, 0), RangeError);
  EXPECT_THROW(augment(s, 12), RangeError);
}

namespace {
DatasetManifest synthetic_manifest() {
  DatasetManifest m;
  const char* ids[] = {"a_0", "a_1", "b_0", "b_1", "c_0", "c_1", "d_0", "d_1", "e_0", "e_1"};
  double u = 0.6;
  for (const char* id : ids) {
    m.entries.push_back({id, std::string(id) + ".dpd", "train", 4.0, u, 32, 32, 2});
    u += 0.05;
  }
  return m;
}
}  // namespace

TEST(Split, HeldOutDesigns) {
  auto r = split_dataset(synthetic_manifest(), {"b", "d"}, {});
  ASSERT_EQ(r.test.size(), 4u);
  EXPECT_EQ(r.train.size(), 6u);
  for (const auto& e : r.test.entries) {
    EXPECT_TRUE(design_of(e.id) == "b" || design_of(e.id) == "d");
    EXPECT_EQ(e.split, "test");
  }
  for (const auto& e : r.train.entries) EXPECT_NE(design_of(e.id), "b");
}

TEST(Split, ParamOptionRemovedFromTrainOnly) {
  auto m = synthetic_manifest();
  // "b_1" and "e_1" do not share utilization values; hold out the one of a_0.
  auto r = split_dataset(m, {"a"}, {{"utilization", m.entries[2].utilization}});
  EXPECT_EQ(r.test.size(), 2u);
  EXPECT_EQ(r.train.size(), 7u);
  for (const auto& e : r.train.entries) EXPECT_NE(e.id, "b_0");
}

TEST(Split, EmptyHeldOutIsError) {
  EXPECT_THROW(split_dataset(synthetic_manifest(), {}, {}), ConfigError);
}

TEST(Toy, EmptyAndDeterministic) {
  auto dir = scratch("toy");
  auto m0 = make_toy_dataset(0, 48, 48, 1, dir / "empty");
  EXPECT_TRUE(m0.empty());
  auto a = make_toy_dataset(5, 48, 48, 7, dir / "a");
  auto b = make_toy_dataset(5, 48, 48, 7, dir / "b");
  ASSERT_EQ(a.size(), 5u);
  for (size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(slurp(a.resolve(a.entries[i])), slurp(b.resolve(b.entries[i])));
  EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(dir / "b" / "manifest.json"));
  auto loaded = load_manifest(dir / "a" / "manifest.json");
  EXPECT_EQ(loaded.entries, a.entries);
}

TEST(Toy, MacroAreaAccounting) {
  for (int size : {32, 48, 64}) {
    for (const auto& s : make_toy_samples(12, size, size, 3)) {
      double area = 0;
      for (const auto& b : s.params.macros) area += b.area();
      auto macro = s.channel(Channel::macro_region);
      const double frac = std::count(macro.begin(), macro.end(), 1.0f) / double(macro.size());
      EXPECT_NEAR(frac, area, 2.0 / size) << s.id;
    }
  }
}

TEST(Toy, ValuesInRangeAndConsistent) {
  for (const auto& s : make_toy_samples(12, 48, 48, 5)) {
    check_range(s);
    s.params.validate();
    EXPECT_GE(s.params.macro_count(), 1);
    auto cd = s.channel(Channel::cell_density);
    auto macro = s.channel(Channel::macro_region);
    for (size_t i = 0; i < cd.size(); ++i)
      if (macro[i] != 0.0f) EXPECT_EQ(cd[i], 0.0f);
  }
}

TEST(Manifest, RejectsMissingFileAndDuplicates) {
  auto dir = scratch("manifest");
  auto m = make_toy_dataset(2, 32, 32, 1, dir);
  fs::remove(m.resolve(m.entries[0]));
  EXPECT_THROW(load_manifest(dir / "manifest.json"), FormatError);
  m.entries[1].id = m.entries[0].id;
  EXPECT_THROW(save_manifest(m, dir / "dup.json"), FormatError);
}
