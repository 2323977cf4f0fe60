#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dali/error.hpp"

namespace dali {
class Rng;
}

namespace dali::num {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dt);

/// Process-wide precision used by tensor factories when no dtype is given.
/// Tests run in f64 so finite differences are meaningful; training uses f32.
DType default_dtype();
void set_default_dtype(DType dt);

class PrecisionScope {
 public:
  explicit PrecisionScope(DType dt) : saved_(default_dtype()) { set_default_dtype(dt); }
  ~PrecisionScope() { set_default_dtype(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  DType saved_;
};

/// Disables graph recording on the current thread (inference, EMA, sampling).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};
bool grad_enabled();

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Typed flat storage. Exactly one of float / double is active.
class Buffer {
 public:
  Buffer() = default;
  Buffer(DType dt, std::size_t n);

  DType dtype() const { return data_.index() == 0 ? DType::f32 : DType::f64; }
  std::size_t size() const;

  template <class T>
  std::span<T> as() {
    return std::span<T>(std::get<std::vector<T>>(data_));
  }
  template <class T>
  std::span<const T> as() const {
    return std::span<const T>(std::get<std::vector<T>>(data_));
  }

  double get(std::size_t i) const;
  void set(std::size_t i, double v);
  void fill(double v);
  /// this += other, elementwise.
  void accumulate(const Buffer& other);

 private:
  std::variant<std::vector<float>, std::vector<double>> data_;
};

/// Calls f(float{}) or f(double{}) so kernels can be written once as
/// generic lambdas: visit_dtype(dt, [&](auto tag) { using T = decltype(tag); ... }).
template <class F>
decltype(auto) visit_dtype(DType dt, F&& f) {
  if (dt == DType::f32) return std::forward<F>(f)(float{});
  return std::forward<F>(f)(double{});
}

struct TensorImpl;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  /// Receives the output tensor (its data and populated grad) and
  /// accumulates into the grads of `inputs`.
  std::function<void(const TensorImpl& out)> backward;
  const char* name = "";
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  bool requires_grad = false;
  std::optional<Buffer> grad;
  std::shared_ptr<Node> grad_fn;

  /// Zero-initialised on first access.
  Buffer& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, DType dt = default_dtype());
  static Tensor full(const Shape& shape, double value, DType dt = default_dtype());
  static Tensor scalar(double value, DType dt = default_dtype());
  static Tensor from_vector(const Shape& shape, std::span<const double> values,
                            DType dt = default_dtype());
  static Tensor from_vector(const Shape& shape, std::initializer_list<double> values,
                            DType dt = default_dtype());
  static Tensor from_buffer(const Shape& shape, Buffer data);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                      DType dt = default_dtype());
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi,
                        DType dt = default_dtype());

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return shape_numel(impl_->shape); }
  DType dtype() const { return impl_->data.dtype(); }

  template <class T>
  std::span<const T> data() const {
    return impl_->data.template as<T>();
  }
  /// In-place access. Only optimizers, initialisers and loaders use this;
  /// tensors are otherwise immutable once produced.
  template <class T>
  std::span<T> mutable_data() {
    return impl_->data.template as<T>();
  }
  const Buffer& buffer() const { return impl_->data; }
  Buffer& mutable_buffer() { return impl_->data; }

  double item() const;
  double at(std::size_t flat_index) const { return impl_->data.get(flat_index); }
  std::vector<double> to_vector() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return impl_->grad.has_value(); }
  /// Copy of the accumulated gradient as a plain tensor.
  Tensor grad() const;
  const Buffer* grad_buffer() const { return impl_->grad ? &*impl_->grad : nullptr; }
  void zero_grad() { impl_->grad.reset(); }

  /// Deep copy without graph history.
  Tensor detach() const;
  Tensor to(DType dt) const;

  void backward() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Throws NumericError if any value is NaN or infinite.
void check_finite(const Buffer& b, const char* where);

/// Builds an op result and, when recording, attaches its backward closure.
Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward, const char* name);

}  // namespace dali::num
