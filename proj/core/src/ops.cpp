#include "dali/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kernels.hpp"

namespace dali::num {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined()) throw ShapeError(std::string(op) + ": undefined operand");
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  if (a.dtype() != b.dtype()) throw ShapeError(std::string(op) + ": dtype mismatch");
}

void require_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw ShapeError(std::string(op) + ": dtype mismatch");
}

template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ys = out.as<T>();
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = static_cast<T>(fwd(xs[i]));
  });
  return make_result(
      x.shape(), std::move(out), {x},
      [x, bwd](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        Buffer& gx = x.impl()->grad_buffer();
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto xs = x.data<T>();
          auto ys = self.data.as<T>();
          auto gy = self.grad->as<T>();
          auto g = gx.as<T>();
          for (std::size_t i = 0; i < xs.size(); ++i)
            g[i] += static_cast<T>(bwd(xs[i], ys[i], gy[i]));
        });
      },
      name);
}

template <class Fwd, class BwdA, class BwdB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA bwd_a,
              BwdB bwd_b) {
  require_same(a, b, name);
  Buffer out(a.dtype(), static_cast<std::size_t>(a.numel()));
  visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto as = a.data<T>();
    auto bs = b.data<T>();
    auto ys = out.as<T>();
    for (std::size_t i = 0; i < as.size(); ++i) ys[i] = static_cast<T>(fwd(as[i], bs[i]));
  });
  return make_result(
      a.shape(), std::move(out), {a, b},
      [a, b, bwd_a, bwd_b](const TensorImpl& self) {
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto as = a.data<T>();
          auto bs = b.data<T>();
          auto gy = self.grad->as<T>();
          if (a.requires_grad()) {
            auto g = a.impl()->grad_buffer().as<T>();
            for (std::size_t i = 0; i < as.size(); ++i)
              g[i] += static_cast<T>(bwd_a(as[i], bs[i], gy[i]));
          }
          if (b.requires_grad()) {
            auto g = b.impl()->grad_buffer().as<T>();
            for (std::size_t i = 0; i < bs.size(); ++i)
              g[i] += static_cast<T>(bwd_b(as[i], bs[i], gy[i]));
          }
        });
      },
      name);
}

std::int64_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::int64_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

int norm_axis(int axis, int ndim, const char* op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](auto x, auto y) { return x + y; }, [](auto, auto, auto g) { return g; },
      [](auto, auto, auto g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](auto x, auto y) { return x - y; }, [](auto, auto, auto g) { return g; },
      [](auto, auto, auto g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](auto x, auto y) { return x * y; },
      [](auto, auto y, auto g) { return g * y; }, [](auto x, auto, auto g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](auto x, auto y) { return x / y; },
      [](auto, auto y, auto g) { return g / y; },
      [](auto x, auto y, auto g) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary(
      x, "neg", [](auto v) { return -v; }, [](auto, auto, auto g) { return -g; });
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, "scale", [s](auto v) { return v * static_cast<decltype(v)>(s); },
      [s](auto, auto, auto g) { return g * static_cast<decltype(g)>(s); });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      x, "add_scalar", [s](auto v) { return v + static_cast<decltype(v)>(s); },
      [](auto, auto, auto g) { return g; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](auto v) { return std::exp(v); }, [](auto, auto y, auto g) { return g * y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](auto v) { return std::log(v); }, [](auto v, auto, auto g) { return g / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, "sqrt", [](auto v) { return std::sqrt(v); },
      [](auto, auto y, auto g) { return g / (2 * y); });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](auto v) { return v * v; }, [](auto v, auto, auto g) { return 2 * v * g; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](auto v) { return std::abs(v); },
      [](auto v, auto, auto g) {
        using T = decltype(v);
        return v > T(0) ? g : (v < T(0) ? -g : T(0));
      });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu",
      [](auto v) {
        using T = decltype(v);
        return v / (T(1) + std::exp(-v));
      },
      [](auto v, auto, auto g) {
        using T = decltype(v);
        const T s = T(1) / (T(1) + std::exp(-v));
        return g * (s * (T(1) + v * (T(1) - s)));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](auto v) {
        using T = decltype(v);
        return T(1) / (T(1) + std::exp(-v));
      },
      [](auto, auto y, auto g) {
        using T = decltype(y);
        return g * y * (T(1) - y);
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](auto v) { return std::tanh(v); },
      [](auto, auto y, auto g) {
        using T = decltype(y);
        return g * (T(1) - y * y);
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu",
      [](auto v) {
        using T = decltype(v);
        return v > T(0) ? v : T(0);
      },
      [](auto v, auto, auto g) {
        using T = decltype(v);
        return v > T(0) ? g : T(0);
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw RangeError("clamp: lo > hi");
  return unary(
      x, "clamp",
      [lo, hi](auto v) {
        using T = decltype(v);
        return std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
      },
      [lo, hi](auto v, auto, auto g) {
        using T = decltype(v);
        return (v >= static_cast<T>(lo) && v <= static_cast<T>(hi)) ? g : T(0);
      });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  Buffer out(x.dtype(), 1);
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    double acc = 0.0;
    for (T v : x.data<T>()) acc += static_cast<double>(v);
    out.as<T>()[0] = static_cast<T>(acc);
  });
  return make_result(
      {}, std::move(out), {x},
      [x](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        const double g = self.grad->get(0);
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          for (auto& v : x.impl()->grad_buffer().as<T>()) v += static_cast<T>(g);
        });
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  return mean(square(sub(pred, target)));
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) { return mean(abs(sub(pred, target))); }

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result(
      shape, x.buffer(), {x},
      [x](const TensorImpl& self) {
        if (x.requires_grad()) x.impl()->grad_buffer().accumulate(*self.grad);
      },
      "reshape");
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int n = x.ndim();
  if (static_cast<int>(perm.size()) != n) throw ShapeError("permute: rank mismatch");
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  for (int p : perm) {
    if (p < 0 || p >= n || used[static_cast<std::size_t>(p)])
      throw ShapeError("permute: invalid permutation");
    used[static_cast<std::size_t>(p)] = true;
  }
  const Shape& in = x.shape();
  Shape out_shape(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out_shape[static_cast<std::size_t>(i)] = in[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(n), 1);
  for (int i = n - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * in[static_cast<std::size_t>(i + 1)];
  // map[out_flat] = in_flat
  const std::int64_t total = x.numel();
  auto index_map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(total));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n), 0);
  for (std::int64_t o = 0; o < total; ++o) {
    std::int64_t src = 0;
    for (int i = 0; i < n; ++i)
      src += idx[static_cast<std::size_t>(i)] * in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    (*index_map)[static_cast<std::size_t>(o)] = src;
    for (int i = n - 1; i >= 0; --i) {
      if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
      idx[static_cast<std::size_t>(i)] = 0;
    }
  }
  Buffer out(x.dtype(), static_cast<std::size_t>(total));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ys = out.as<T>();
    for (std::size_t o = 0; o < ys.size(); ++o) ys[o] = xs[static_cast<std::size_t>((*index_map)[o])];
  });
  return make_result(
      out_shape, std::move(out), {x},
      [x, index_map](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = x.impl()->grad_buffer().as<T>();
          auto gy = self.grad->as<T>();
          for (std::size_t o = 0; o < gy.size(); ++o) g[static_cast<std::size_t>((*index_map)[o])] += gy[o];
        });
      },
      "permute");
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int n = xs[0].ndim();
  axis = norm_axis(axis, n, "concat");
  Shape out_shape = xs[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& t : xs) {
    if (t.ndim() != n) throw ShapeError("concat: rank mismatch");
    require_dtype(t, xs[0], "concat");
    for (int i = 0; i < n; ++i)
      if (i != axis && t.shape()[static_cast<std::size_t>(i)] != xs[0].shape()[static_cast<std::size_t>(i)])
        throw ShapeError("concat: extent mismatch " + shape_str(t.shape()) + " vs " +
                         shape_str(xs[0].shape()));
    out_shape[static_cast<std::size_t>(axis)] += t.shape()[static_cast<std::size_t>(axis)];
  }
  const std::int64_t outer = prod(out_shape, 0, static_cast<std::size_t>(axis));
  const std::int64_t inner = prod(out_shape, static_cast<std::size_t>(axis) + 1, out_shape.size());
  const std::int64_t out_row = out_shape[static_cast<std::size_t>(axis)] * inner;
  Buffer out(xs[0].dtype(), static_cast<std::size_t>(shape_numel(out_shape)));
  visit_dtype(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto ys = out.as<T>();
    std::int64_t offset = 0;
    for (const auto& t : xs) {
      const std::int64_t row = t.shape()[static_cast<std::size_t>(axis)] * inner;
      auto src = t.data<T>();
      for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(src.begin() + o * row, row, ys.begin() + o * out_row + offset);
      offset += row;
    }
  });
  return make_result(
      out_shape, std::move(out), xs,
      [xs, axis, outer, inner, out_row](const TensorImpl& self) {
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gy = self.grad->as<T>();
          std::int64_t offset = 0;
          for (const auto& t : xs) {
            const std::int64_t row = t.shape()[static_cast<std::size_t>(axis)] * inner;
            if (t.requires_grad()) {
              auto g = t.impl()->grad_buffer().as<T>();
              for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t j = 0; j < row; ++j) g[static_cast<std::size_t>(o * row + j)] += gy[static_cast<std::size_t>(o * out_row + offset + j)];
            }
            offset += row;
          }
        });
      },
      "concat");
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  axis = norm_axis(axis, x.ndim(), "slice");
  const std::int64_t extent = x.shape()[static_cast<std::size_t>(axis)];
  if (start < 0 || length < 0 || start + length > extent)
    throw ShapeError("slice: range out of bounds for " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  const std::int64_t outer = prod(x.shape(), 0, static_cast<std::size_t>(axis));
  const std::int64_t inner = prod(x.shape(), static_cast<std::size_t>(axis) + 1, x.shape().size());
  Buffer out(x.dtype(), static_cast<std::size_t>(shape_numel(out_shape)));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ys = out.as<T>();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(xs.begin() + (o * extent + start) * inner, length * inner,
                  ys.begin() + o * length * inner);
  });
  return make_result(
      out_shape, std::move(out), {x},
      [x, outer, inner, extent, start, length](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = x.impl()->grad_buffer().as<T>();
          auto gy = self.grad->as<T>();
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t j = 0; j < length * inner; ++j)
              g[static_cast<std::size_t>((o * extent + start) * inner + j)] += gy[static_cast<std::size_t>(o * length * inner + j)];
        });
      },
      "slice");
}

Tensor index_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
  if (x.ndim() != 2) throw ShapeError("index_rows: expects a 2-D tensor");
  const std::int64_t r = x.dim(0), c = x.dim(1);
  for (auto i : rows)
    if (i < 0 || i >= r) throw ShapeError("index_rows: row index out of range");
  Buffer out(x.dtype(), rows.size() * static_cast<std::size_t>(c));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ys = out.as<T>();
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(xs.begin() + rows[i] * c, c, ys.begin() + static_cast<std::int64_t>(i) * c);
  });
  return make_result(
      {static_cast<std::int64_t>(rows.size()), c}, std::move(out), {x},
      [x, rows, c](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = x.impl()->grad_buffer().as<T>();
          auto gy = self.grad->as<T>();
          for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::int64_t j = 0; j < c; ++j) g[static_cast<std::size_t>(rows[i] * c + j)] += gy[i * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)];
        });
      },
      "index_rows");
}

Tensor scale_leading(const Tensor& x, const std::vector<double>& factors) {
  if (x.ndim() < 1 || x.dim(0) != static_cast<std::int64_t>(factors.size()))
    throw ShapeError("scale_leading: factor count does not match leading extent");
  const std::int64_t inner = factors.empty() ? 0 : x.numel() / x.dim(0);
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ys = out.as<T>();
    for (std::size_t b = 0; b < factors.size(); ++b)
      for (std::int64_t j = 0; j < inner; ++j) {
        const auto k = b * static_cast<std::size_t>(inner) + static_cast<std::size_t>(j);
        ys[k] = xs[k] * static_cast<T>(factors[b]);
      }
  });
  return make_result(
      x.shape(), std::move(out), {x},
      [x, factors, inner](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = x.impl()->grad_buffer().as<T>();
          auto gy = self.grad->as<T>();
          for (std::size_t b = 0; b < factors.size(); ++b)
            for (std::int64_t j = 0; j < inner; ++j) {
              const auto k = b * static_cast<std::size_t>(inner) + static_cast<std::size_t>(j);
              g[k] += gy[k] * static_cast<T>(factors[b]);
            }
        });
      },
      "scale_leading");
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  require_dtype(a, b, "matmul");
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(a.dtype(), static_cast<std::size_t>(m * n));
  visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    detail::gemm<T>(false, false, m, n, k, a.data<T>().data(), b.data<T>().data(),
                    out.as<T>().data(), false);
  });
  return make_result(
      {m, n}, std::move(out), {a, b},
      [a, b, m, n, k](const TensorImpl& self) {
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* gy = self.grad->as<T>().data();
          if (a.requires_grad())  // dA = dY B^T
            detail::gemm<T>(false, true, m, k, n, gy, b.data<T>().data(),
                            a.impl()->grad_buffer().as<T>().data(), true);
          if (b.requires_grad())  // dB = A^T dY
            detail::gemm<T>(true, false, k, n, m, a.data<T>().data(), gy,
                            b.impl()->grad_buffer().as<T>().data(), true);
        });
      },
      "matmul");
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  require_dtype(a, b, "bmm");
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Buffer out(a.dtype(), static_cast<std::size_t>(batch * m * n));
  visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (std::int64_t i = 0; i < batch; ++i)
      detail::gemm<T>(false, false, m, n, k, a.data<T>().data() + i * m * k,
                      b.data<T>().data() + i * k * n, out.as<T>().data() + i * m * n, false);
  });
  return make_result(
      {batch, m, n}, std::move(out), {a, b},
      [a, b, batch, m, n, k](const TensorImpl& self) {
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* gy = self.grad->as<T>().data();
          for (std::int64_t i = 0; i < batch; ++i) {
            if (a.requires_grad())
              detail::gemm<T>(false, true, m, k, n, gy + i * m * n, b.data<T>().data() + i * k * n,
                              a.impl()->grad_buffer().as<T>().data() + i * m * k, true);
            if (b.requires_grad())
              detail::gemm<T>(true, false, k, n, m, a.data<T>().data() + i * m * k, gy + i * m * n,
                              b.impl()->grad_buffer().as<T>().data() + i * k * n, true);
          }
        });
      },
      "bmm");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  if (!bias.defined()) return y;
  if (bias.ndim() != 1 || bias.dim(0) != w.dim(1)) throw ShapeError("linear: bias shape");
  const std::int64_t m = y.dim(0), n = y.dim(1);
  // Broadcast the bias across rows via a row-repeat gather.
  std::vector<std::int64_t> rows(static_cast<std::size_t>(m), 0);
  Tensor b2 = index_rows(reshape(bias, {1, n}), rows);
  return add(y, b2);
}

Tensor add_channel(const Tensor& x, const Tensor& v) {
  if (x.ndim() != 4 || v.ndim() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1))
    throw ShapeError("add_channel: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
  require_dtype(x, v, "add_channel");
  const std::int64_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto vs = v.data<T>();
    auto ys = out.as<T>();
    for (std::int64_t i = 0; i < nc; ++i)
      for (std::int64_t j = 0; j < hw; ++j) ys[static_cast<std::size_t>(i * hw + j)] = xs[static_cast<std::size_t>(i * hw + j)] + vs[static_cast<std::size_t>(i)];
  });
  return make_result(
      x.shape(), std::move(out), {x, v},
      [x, v, nc, hw](const TensorImpl& self) {
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto gy = self.grad->as<T>();
          if (x.requires_grad()) {
            auto g = x.impl()->grad_buffer().as<T>();
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
          }
          if (v.requires_grad()) {
            auto g = v.impl()->grad_buffer().as<T>();
            for (std::int64_t i = 0; i < nc; ++i) {
              T acc = 0;
              for (std::int64_t j = 0; j < hw; ++j) acc += gy[static_cast<std::size_t>(i * hw + j)];
              g[static_cast<std::size_t>(i)] += acc;
            }
          }
        });
      },
      "add_channel");
}

// ---------------------------------------------------------------------------
// Normalisation, softmax, resampling

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.ndim() != 4) throw ShapeError("group_norm: expects [N,C,H,W]");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups <= 0 || c % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("group_norm: affine parameters must be [C]");
  require_dtype(x, gamma, "group_norm");
  require_dtype(x, beta, "group_norm");
  const std::int64_t cpg = c / groups, group_size = cpg * hw;
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * n * groups));
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto gs = gamma.data<T>();
    auto bs = beta.data<T>();
    auto ys = out.as<T>();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t g = 0; g < groups; ++g) {
        const std::int64_t base = (i * c + g * cpg) * hw;
        double m = 0.0, v = 0.0;
        for (std::int64_t j = 0; j < group_size; ++j) m += xs[static_cast<std::size_t>(base + j)];
        m /= static_cast<double>(group_size);
        for (std::int64_t j = 0; j < group_size; ++j) {
          const double d = xs[static_cast<std::size_t>(base + j)] - m;
          v += d * d;
        }
        v /= static_cast<double>(group_size);
        const double inv = 1.0 / std::sqrt(v + eps);
        (*stats)[static_cast<std::size_t>(2 * (i * groups + g))] = m;
        (*stats)[static_cast<std::size_t>(2 * (i * groups + g) + 1)] = inv;
        for (std::int64_t ch = 0; ch < cpg; ++ch) {
          const std::int64_t cc = g * cpg + ch;
          for (std::int64_t j = 0; j < hw; ++j) {
            const auto k = static_cast<std::size_t>(base + ch * hw + j);
            ys[k] = static_cast<T>((xs[k] - m) * inv * gs[static_cast<std::size_t>(cc)] + bs[static_cast<std::size_t>(cc)]);
          }
        }
      }
  });
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, stats, n, c, hw, groups, cpg, group_size](const TensorImpl& self) {
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto xs = x.data<T>();
          auto gs = gamma.data<T>();
          auto gy = self.grad->as<T>();
          T* gx = x.requires_grad() ? x.impl()->grad_buffer().as<T>().data() : nullptr;
          T* ggamma = gamma.requires_grad() ? gamma.impl()->grad_buffer().as<T>().data() : nullptr;
          T* gbeta = beta.requires_grad() ? beta.impl()->grad_buffer().as<T>().data() : nullptr;
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t g = 0; g < groups; ++g) {
              const std::int64_t base = (i * c + g * cpg) * hw;
              const double m = (*stats)[static_cast<std::size_t>(2 * (i * groups + g))];
              const double inv = (*stats)[static_cast<std::size_t>(2 * (i * groups + g) + 1)];
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (std::int64_t ch = 0; ch < cpg; ++ch) {
                const std::int64_t cc = g * cpg + ch;
                double acc_gamma = 0.0, acc_beta = 0.0;
                for (std::int64_t j = 0; j < hw; ++j) {
                  const auto k = static_cast<std::size_t>(base + ch * hw + j);
                  const double xhat = (xs[k] - m) * inv;
                  const double dy = gy[k];
                  const double dxhat = dy * gs[static_cast<std::size_t>(cc)];
                  sum_dxhat += dxhat;
                  sum_dxhat_xhat += dxhat * xhat;
                  acc_gamma += dy * xhat;
                  acc_beta += dy;
                }
                if (ggamma) ggamma[cc] += static_cast<T>(acc_gamma);
                if (gbeta) gbeta[cc] += static_cast<T>(acc_beta);
              }
              if (!gx) continue;
              const double mean_dxhat = sum_dxhat / static_cast<double>(group_size);
              const double mean_dxhat_xhat = sum_dxhat_xhat / static_cast<double>(group_size);
              for (std::int64_t ch = 0; ch < cpg; ++ch) {
                const std::int64_t cc = g * cpg + ch;
                for (std::int64_t j = 0; j < hw; ++j) {
                  const auto k = static_cast<std::size_t>(base + ch * hw + j);
                  const double xhat = (xs[k] - m) * inv;
                  const double dxhat = gy[k] * gs[static_cast<std::size_t>(cc)];
                  gx[k] += static_cast<T>(inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                }
              }
            }
        });
      },
      "group_norm");
}

Tensor softmax(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.ndim(), "softmax");
  const std::int64_t outer = prod(x.shape(), 0, static_cast<std::size_t>(axis));
  const std::int64_t len = x.shape()[static_cast<std::size_t>(axis)];
  const std::int64_t inner = prod(x.shape(), static_cast<std::size_t>(axis) + 1, x.shape().size());
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ys = out.as<T>();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T mx = xs[static_cast<std::size_t>(base)];
        for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, xs[static_cast<std::size_t>(base + j * inner)]);
        double z = 0.0;
        for (std::int64_t j = 0; j < len; ++j) {
          const double e = std::exp(static_cast<double>(xs[static_cast<std::size_t>(base + j * inner)] - mx));
          ys[static_cast<std::size_t>(base + j * inner)] = static_cast<T>(e);
          z += e;
        }
        for (std::int64_t j = 0; j < len; ++j)
          ys[static_cast<std::size_t>(base + j * inner)] = static_cast<T>(ys[static_cast<std::size_t>(base + j * inner)] / z);
      }
  });
  return make_result(
      x.shape(), std::move(out), {x},
      [x, outer, len, inner](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto ys = self.data.as<T>();
          auto gy = self.grad->as<T>();
          auto g = x.impl()->grad_buffer().as<T>();
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
              const std::int64_t base = o * len * inner + in;
              double dot = 0.0;
              for (std::int64_t j = 0; j < len; ++j) {
                const auto k = static_cast<std::size_t>(base + j * inner);
                dot += static_cast<double>(gy[k]) * ys[k];
              }
              for (std::int64_t j = 0; j < len; ++j) {
                const auto k = static_cast<std::size_t>(base + j * inner);
                g[k] += static_cast<T>(ys[k] * (gy[k] - dot));
              }
            }
        });
      },
      "softmax");
}

Tensor avg_pool2d(const Tensor& x, int kernel) {
  if (x.ndim() != 4 || kernel <= 0 || x.dim(2) % kernel != 0 || x.dim(3) % kernel != 0)
    throw ShapeError("avg_pool2d: extents must be divisible by the kernel");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h / kernel, ow = w / kernel;
  const double inv = 1.0 / (kernel * kernel);
  Buffer out(x.dtype(), static_cast<std::size_t>(nc * oh * ow));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ys = out.as<T>();
    for (std::int64_t p = 0; p < nc; ++p)
      for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w; ++j)
          ys[static_cast<std::size_t>((p * oh + i / kernel) * ow + j / kernel)] += static_cast<T>(xs[static_cast<std::size_t>((p * h + i) * w + j)] * inv);
  });
  return make_result(
      {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
      [x, nc, h, w, oh, ow, kernel, inv](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = x.impl()->grad_buffer().as<T>();
          auto gy = self.grad->as<T>();
          for (std::int64_t p = 0; p < nc; ++p)
            for (std::int64_t i = 0; i < h; ++i)
              for (std::int64_t j = 0; j < w; ++j)
                g[static_cast<std::size_t>((p * h + i) * w + j)] += static_cast<T>(gy[static_cast<std::size_t>((p * oh + i / kernel) * ow + j / kernel)] * inv);
        });
      },
      "avg_pool2d");
}

Tensor upsample_nearest2d(const Tensor& x, int factor) {
  if (x.ndim() != 4 || factor <= 0) throw ShapeError("upsample_nearest2d: expects [N,C,H,W]");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  Buffer out(x.dtype(), static_cast<std::size_t>(nc * oh * ow));
  visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    auto ys = out.as<T>();
    for (std::int64_t p = 0; p < nc; ++p)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j)
          ys[static_cast<std::size_t>((p * oh + i) * ow + j)] = xs[static_cast<std::size_t>((p * h + i / factor) * w + j / factor)];
  });
  return make_result(
      {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
      [x, nc, h, w, oh, ow, factor](const TensorImpl& self) {
        if (!x.requires_grad()) return;
        visit_dtype(self.data.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = x.impl()->grad_buffer().as<T>();
          auto gy = self.grad->as<T>();
          for (std::int64_t p = 0; p < nc; ++p)
            for (std::int64_t i = 0; i < oh; ++i)
              for (std::int64_t j = 0; j < ow; ++j)
                g[static_cast<std::size_t>((p * h + i / factor) * w + j / factor)] += gy[static_cast<std::size_t>((p * oh + i) * ow + j)];
        });
      },
      "upsample_nearest2d");
}

}  // namespace dali::num
