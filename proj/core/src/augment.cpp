#include <cmath>

#include "dali/heatmap.hpp"

namespace dali::data {

namespace {

bool swaps_axes(int index) { return index == 2 || index == 3 || index == 6 || index == 7; }

// Source pixel (i, j) of an H x W input lands at (oi, oj) of the output.
void map_pixel(int index, int h, int w, int i, int j, int& oi, int& oj) {
  switch (index) {
    case 1: oi = h - 1 - i; oj = w - 1 - j; break;
    case 2: oi = w - 1 - j; oj = i; break;
    case 3: oi = j; oj = h - 1 - i; break;
    case 4: oi = i; oj = w - 1 - j; break;
    case 5: oi = h - 1 - i; oj = j; break;
    case 6: oi = j; oj = i; break;
    case 7: oi = w - 1 - j; oj = h - 1 - i; break;
    case 8: oi = (i + h / 8) % h; oj = j; break;
    case 9: oi = (i - h / 8 % h + h) % h; oj = j; break;
    case 10: oi = i; oj = (j + w / 8) % w; break;
    case 11: oi = i; oj = (j - w / 8 % w + w) % w; break;
    default: throw RangeError("augmentation index must lie in 1..11");
  }
}

// Shifts the interval [lo, hi) by d on the unit circle; returns one or two pieces.
std::vector<std::pair<double, double>> wrap(double lo, double hi, double d) {
  constexpr double tol = 1e-12;
  lo += d;
  hi += d;
  if (lo >= 1.0 - tol) return {{lo - 1.0, hi - 1.0}};
  if (hi <= tol) return {{lo + 1.0, hi + 1.0}};
  if (hi > 1.0 + tol) return {{lo, 1.0}, {0.0, hi - 1.0}};
  if (lo < -tol) return {{lo + 1.0, 1.0}, {0.0, hi}};
  return {{std::max(0.0, lo), std::min(1.0, hi)}};
}

std::vector<Box> transform_boxes(const std::vector<Box>& boxes, int index, int h, int w) {
  std::vector<Box> out;
  for (const auto& b : boxes) {
    if (index <= 7) {
      out.push_back(transform_box(b, index));
      continue;
    }
    if (index == 8 || index == 9) {
      const double d = (index == 8 ? 1 : -1) * static_cast<double>(h / 8) / h;
      for (auto [lo, hi] : wrap(b.yl, b.yu, d)) out.push_back({b.xl, lo, b.xu, hi});
    } else {
      const double d = (index == 10 ? 1 : -1) * static_cast<double>(w / 8) / w;
      for (auto [lo, hi] : wrap(b.xl, b.xu, d)) out.push_back({lo, b.yl, hi, b.yu});
    }
  }
  return out;
}

}  // namespace

Box transform_box(const Box& b, int index) {
  switch (index) {
    case 1: return {1 - b.xu, 1 - b.yu, 1 - b.xl, 1 - b.yl};
    case 2: return {b.yl, 1 - b.xu, b.yu, 1 - b.xl};
    case 3: return {1 - b.yu, b.xl, 1 - b.yl, b.xu};
    case 4: return {1 - b.xu, b.yl, 1 - b.xl, b.yu};
    case 5: return {b.xl, 1 - b.yu, b.xu, 1 - b.yl};
    case 6: return {b.yl, b.xl, b.yu, b.xu};
    case 7: return {1 - b.yu, 1 - b.xu, 1 - b.yl, 1 - b.xl};
    default: throw RangeError("transform_box handles the dihedral indices 1..7 only");
  }
}

HeatmapSet augment(const HeatmapSet& sample, int index) {
  if (index < 1 || index > kAugmentations)
    throw RangeError("augmentation index must lie in 1..11");
  const int h = sample.height(), w = sample.width();
  CircuitParams p = sample.params;
  if (swaps_axes(index)) std::swap(p.height, p.width);
  p.macros = transform_boxes(sample.params.macros, index, h, w);
  HeatmapSet out(sample.id, p);
  const int ow = p.width;
  for (int c = 0; c < kChannels; ++c) {
    auto src = sample.channel(static_cast<Channel>(c));
    auto dst = out.channel(static_cast<Channel>(c));
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        int oi, oj;
        map_pixel(index, h, w, i, j, oi, oj);
        dst[static_cast<std::size_t>(oi) * ow + oj] = src[static_cast<std::size_t>(i) * w + j];
      }
  }
  return out;
}

}  // namespace dali::data
