#pragma once

// Internal dense kernels shared by the op implementations. Row-major only.

#include <Eigen/Core>
#include <cstdint>

namespace dali::num::detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

/// C[M,N] = op(A) * op(B) (or += when accumulate). op(A) is [M,K]; when
/// trans_a, A is stored as [K,M]. Likewise for B.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  MutMap<T> cm(c, m, n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      cm.noalias() += lhs * rhs;
    else
      cm.noalias() = lhs * rhs;
  };
  if (!trans_a && !trans_b)
    run(ConstMap<T>(a, m, k), ConstMap<T>(b, k, n));
  else if (trans_a && !trans_b)
    run(ConstMap<T>(a, k, m).transpose(), ConstMap<T>(b, k, n));
  else if (!trans_a && trans_b)
    run(ConstMap<T>(a, m, k), ConstMap<T>(b, n, k).transpose());
  else
    run(ConstMap<T>(a, k, m).transpose(), ConstMap<T>(b, n, k).transpose());
}

struct ConvGeom {
  std::int64_t channels, height, width;  // the spatially larger ("image") side
  std::int64_t kernel, stride, pad;
  std::int64_t out_h, out_w;  // sliding-window positions
};

/// image [C,H,W] -> col [C*K*K, out_h*out_w]
template <class T>
void im2col(const ConvGeom& g, const T* image, T* col) {
  const std::int64_t ohw = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const T* img_c = image + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * ohw;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t h = oh * g.stride - g.pad + ki;
          T* dst = row + oh * g.out_w;
          if (h < 0 || h >= g.height) {
            for (std::int64_t ow = 0; ow < g.out_w; ++ow) dst[ow] = T(0);
            continue;
          }
          const T* src = img_c + h * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t w = ow * g.stride - g.pad + kj;
            dst[ow] = (w >= 0 && w < g.width) ? src[w] : T(0);
          }
        }
      }
    }
  }
}

/// col [C*K*K, out_h*out_w] accumulated into image [C,H,W]
template <class T>
void col2im(const ConvGeom& g, const T* col, T* image) {
  const std::int64_t ohw = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    T* img_c = image + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * ohw;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t h = oh * g.stride - g.pad + ki;
          if (h < 0 || h >= g.height) continue;
          const T* src = row + oh * g.out_w;
          T* dst = img_c + h * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t w = ow * g.stride - g.pad + kj;
            if (w >= 0 && w < g.width) dst[w] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace dali::num::detail
