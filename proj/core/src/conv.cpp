#include <vector>

#include "dali/ops.hpp"
#include "kernels.hpp"

namespace dali::num {

namespace {

void check_conv_weight(const Tensor& weight, const Tensor& bias, std::int64_t bias_extent,
                       const char* op) {
  if (weight.ndim() != 4 || weight.dim(2) != weight.dim(3))
    throw ShapeError(std::string(op) + ": weight must be [O,I,K,K], got " +
                     shape_str(weight.shape()));
  if (bias.defined() && bias.shape() != Shape{bias_extent})
    throw ShapeError(std::string(op) + ": bias must be [" + std::to_string(bias_extent) + "]");
}

template <class T>
void add_bias(T* out, const T* bias, std::int64_t channels, std::int64_t hw) {
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t j = 0; j < hw; ++j) out[c * hw + j] += bias[c];
}

template <class T>
void bias_grad(T* gb, const T* gy, std::int64_t channels, std::int64_t hw) {
  for (std::int64_t c = 0; c < channels; ++c) {
    T acc = 0;
    for (std::int64_t j = 0; j < hw; ++j) acc += gy[c * hw + j];
    gb[c] += acc;
  }
}

bool is_pointwise(const detail::ConvGeom& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Conv2dOptions opt) {
  if (input.ndim() != 4) throw ShapeError("conv2d: input must be [N,C,H,W]");
  const std::int64_t out_ch = weight.ndim() == 4 ? weight.dim(0) : 0;
  check_conv_weight(weight, bias, out_ch, "conv2d");
  if (weight.dim(1) != input.dim(1))
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(input.shape()) + " weight " +
                     shape_str(weight.shape()));
  if (input.dtype() != weight.dtype()) throw ShapeError("conv2d: dtype mismatch");
  if (opt.stride < 1 || opt.padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t k = weight.dim(2);
  if (h + 2 * opt.padding < k || w + 2 * opt.padding < k)
    throw ShapeError("conv2d: kernel does not fit padded input");
  detail::ConvGeom g{c, h, w, k, opt.stride, opt.padding, 0, 0};
  g.out_h = (h + 2 * opt.padding - k) / opt.stride + 1;
  g.out_w = (w + 2 * opt.padding - k) / opt.stride + 1;
  const std::int64_t ohw = g.out_h * g.out_w, ckk = c * k * k;

  Buffer out(input.dtype(), static_cast<std::size_t>(n * out_ch * ohw));
  visit_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.data<T>().data();
    const T* wt = weight.data<T>().data();
    T* y = out.as<T>().data();
    std::vector<T> col(is_pointwise(g) ? 0 : static_cast<std::size_t>(ckk * ohw));
    for (std::int64_t i = 0; i < n; ++i) {
      const T* xi = x + i * c * h * w;
      const T* src = xi;
      if (!is_pointwise(g)) {
        detail::im2col(g, xi, col.data());
        src = col.data();
      }
      detail::gemm<T>(false, false, out_ch, ohw, ckk, wt, src, y + i * out_ch * ohw, false);
      if (bias.defined()) add_bias(y + i * out_ch * ohw, bias.data<T>().data(), out_ch, ohw);
    }
  });

  return make_result(
      {n, out_ch, g.out_h, g.out_w}, std::move(out), {input, weight, bias},
      [input, weight, bias, g, n, out_ch, ohw, ckk](const TensorImpl& self) {
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* gy = self.grad->as<T>().data();
          const T* x = input.data<T>().data();
          const T* wt = weight.data<T>().data();
          const std::int64_t img = g.channels * g.height * g.width;
          std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
          T* gw = weight.requires_grad() ? weight.impl()->grad_buffer().as<T>().data() : nullptr;
          T* gx = input.requires_grad() ? input.impl()->grad_buffer().as<T>().data() : nullptr;
          T* gb = bias.defined() && bias.requires_grad()
                      ? bias.impl()->grad_buffer().as<T>().data()
                      : nullptr;
          for (std::int64_t i = 0; i < n; ++i) {
            const T* gyi = gy + i * out_ch * ohw;
            if (gb) bias_grad(gb, gyi, out_ch, ohw);
            if (gw) {
              const T* src = x + i * img;
              if (!is_pointwise(g)) {
                detail::im2col(g, x + i * img, col.data());
                src = col.data();
              }
              // dW[O, CKK] += dY[O, OHW] * col^T
              detail::gemm<T>(false, true, out_ch, ckk, ohw, gyi, src, gw, true);
            }
            if (gx) {
              if (is_pointwise(g)) {
                detail::gemm<T>(true, false, ckk, ohw, out_ch, wt, gyi, gx + i * img, true);
              } else {
                detail::gemm<T>(true, false, ckk, ohw, out_ch, wt, gyi, col.data(), false);
                detail::col2im(g, col.data(), gx + i * img);
              }
            }
          }
        });
      },
      "conv2d");
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        ConvTranspose2dOptions opt) {
  if (input.ndim() != 4) throw ShapeError("conv_transpose2d: input must be [N,C,H,W]");
  const std::int64_t out_ch = weight.ndim() == 4 ? weight.dim(1) : 0;
  check_conv_weight(weight, bias, out_ch, "conv_transpose2d");
  if (weight.dim(0) != input.dim(1))
    throw ShapeError("conv_transpose2d: channel mismatch, input " + shape_str(input.shape()) +
                     " weight " + shape_str(weight.shape()));
  if (input.dtype() != weight.dtype()) throw ShapeError("conv_transpose2d: dtype mismatch");
  if (opt.stride < 1 || opt.padding < 0 || opt.output_padding < 0 ||
      opt.output_padding >= opt.stride)
    throw ShapeError("conv_transpose2d: invalid stride/padding/output_padding");
  const std::int64_t n = input.dim(0), in_ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t k = weight.dim(2);
  const std::int64_t oh = (h - 1) * opt.stride - 2 * opt.padding + k + opt.output_padding;
  const std::int64_t ow = (w - 1) * opt.stride - 2 * opt.padding + k + opt.output_padding;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: empty output");
  // Geometry of the equivalent forward conv that maps [out_ch, oh, ow] -> [in_ch, h, w].
  detail::ConvGeom g{out_ch, oh, ow, k, opt.stride, opt.padding, h, w};
  const std::int64_t hw = h * w, ckk = out_ch * k * k, out_img = out_ch * oh * ow;

  Buffer out(input.dtype(), static_cast<std::size_t>(n * out_img));
  visit_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.data<T>().data();
    const T* wt = weight.data<T>().data();
    T* y = out.as<T>().data();
    std::vector<T> col(static_cast<std::size_t>(ckk * hw));
    for (std::int64_t i = 0; i < n; ++i) {
      // col[CKK, HW] = W^T[CKK, in_ch] * x[in_ch, HW]
      detail::gemm<T>(true, false, ckk, hw, in_ch, wt, x + i * in_ch * hw, col.data(), false);
      detail::col2im(g, col.data(), y + i * out_img);
      if (bias.defined()) add_bias(y + i * out_img, bias.data<T>().data(), out_ch, oh * ow);
    }
  });

  return make_result(
      {n, out_ch, oh, ow}, std::move(out), {input, weight, bias},
      [input, weight, bias, g, n, in_ch, out_ch, hw, ckk, out_img](const TensorImpl& self) {
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* gy = self.grad->as<T>().data();
          const T* x = input.data<T>().data();
          const T* wt = weight.data<T>().data();
          std::vector<T> col(static_cast<std::size_t>(ckk * hw));
          T* gw = weight.requires_grad() ? weight.impl()->grad_buffer().as<T>().data() : nullptr;
          T* gx = input.requires_grad() ? input.impl()->grad_buffer().as<T>().data() : nullptr;
          T* gb = bias.defined() && bias.requires_grad()
                      ? bias.impl()->grad_buffer().as<T>().data()
                      : nullptr;
          for (std::int64_t i = 0; i < n; ++i) {
            const T* gyi = gy + i * out_img;
            if (gb) bias_grad(gb, gyi, out_ch, g.height * g.width);
            if (!gw && !gx) continue;
            detail::im2col(g, gyi, col.data());
            // dX[in_ch, HW] += W[in_ch, CKK] * col
            if (gx) detail::gemm<T>(false, false, in_ch, hw, ckk, wt, col.data(), gx + i * in_ch * hw, true);
            // dW[in_ch, CKK] += x[in_ch, HW] * col^T
            if (gw) detail::gemm<T>(false, true, in_ch, ckk, hw, x + i * in_ch * hw, col.data(), gw, true);
          }
        });
      },
      "conv_transpose2d");
}

}  // namespace dali::num
