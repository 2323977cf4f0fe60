#pragma once

#include <cstdint>
#include <vector>

#include "dali/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes, produces a new
// tensor and, while grad mode is on, records its backward closure.
namespace dali::num {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
/// Gradient is zero where the input was clamped.
Tensor clamp(const Tensor& x, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
Tensor l1_loss(const Tensor& pred, const Tensor& target);

// Layout.
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
/// out[i, :] = x[rows[i], :] for 2-D x.
Tensor index_rows(const Tensor& x, const std::vector<std::int64_t>& rows);
/// Multiplies x[b, ...] by factors[b] (constant, not differentiated).
Tensor scale_leading(const Tensor& x, const std::vector<double>& factors);

// Linear algebra.
/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B,M,K] x [B,K,N] -> [B,M,N]
Tensor bmm(const Tensor& a, const Tensor& b);
/// x[M,in] * w[in,out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// x[N,C,H,W] + v[N,C] broadcast over H, W.
Tensor add_channel(const Tensor& x, const Tensor& v);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};

struct ConvTranspose2dOptions {
  int stride = 1;
  int padding = 0;
  int output_padding = 0;
};

/// Cross-correlation. input [N,C,H,W], weight [O,C,K,K], bias [O] or undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Conv2dOptions opt = {});

/// Adjoint of conv2d with the same weight. input [N,O,H,W], weight [O,C,K,K],
/// output [N,C,(H-1)s-2p+K+op, ...].
Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        ConvTranspose2dOptions opt = {});

/// Group normalisation over [N,C,H,W] with per-channel affine gamma/beta [C].
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

Tensor avg_pool2d(const Tensor& x, int kernel);
Tensor upsample_nearest2d(const Tensor& x, int factor);

}  // namespace dali::num
