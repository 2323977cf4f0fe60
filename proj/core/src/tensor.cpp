#include "dali/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "dali/rng.hpp"

namespace dali::num {

namespace {
std::atomic<DType> g_default_dtype{DType::f32};
thread_local bool t_grad_enabled = true;
}  // namespace

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

DType default_dtype() { return g_default_dtype.load(); }
void set_default_dtype(DType dt) { g_default_dtype.store(dt); }

NoGradGuard::NoGradGuard() : saved_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = saved_; }
bool grad_enabled() { return t_grad_enabled; }

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Buffer

Buffer::Buffer(DType dt, std::size_t n) {
  if (dt == DType::f32)
    data_ = std::vector<float>(n, 0.0f);
  else
    data_ = std::vector<double>(n, 0.0);
}

std::size_t Buffer::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Buffer::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, data_);
}

void Buffer::set(std::size_t i, double x) {
  std::visit([i, x](auto& v) { v[i] = static_cast<typename std::decay_t<decltype(v)>::value_type>(x); },
             data_);
}

void Buffer::fill(double x) {
  std::visit(
      [x](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::fill(v.begin(), v.end(), static_cast<T>(x));
      },
      data_);
}

void Buffer::accumulate(const Buffer& other) {
  if (other.dtype() != dtype() || other.size() != size())
    throw ShapeError("gradient accumulation: buffer mismatch");
  visit_dtype(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto dst = as<T>();
    auto src = other.as<T>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  });
}

void check_finite(const Buffer& b, const char* where) {
  const bool ok = visit_dtype(b.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : b.as<T>())
      if (!std::isfinite(v)) return false;
    return true;
  });
  if (!ok) throw NumericError(std::string("non-finite value produced by ") + where);
}

Buffer& TensorImpl::grad_buffer() {
  if (!grad) grad.emplace(data.dtype(), data.size());
  return *grad;
}

// ---------------------------------------------------------------------------
// Tensor factories

namespace {
std::shared_ptr<TensorImpl> new_impl(const Shape& shape, DType dt) {
  for (auto e : shape)
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = Buffer(dt, static_cast<std::size_t>(shape_numel(shape)));
  return impl;
}
}  // namespace

Tensor Tensor::zeros(const Shape& shape, DType dt) { return Tensor(new_impl(shape, dt)); }

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
  auto impl = new_impl(shape, dt);
  impl->data.fill(value);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

Tensor Tensor::from_vector(const Shape& shape, std::span<const double> values, DType dt) {
  auto impl = new_impl(shape, dt);
  if (values.size() != impl->data.size())
    throw ShapeError("from_vector: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  for (std::size_t i = 0; i < values.size(); ++i) impl->data.set(i, values[i]);
  check_finite(impl->data, "from_vector");
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(const Shape& shape, std::initializer_list<double> values, DType dt) {
  return from_vector(shape, std::span<const double>(values.begin(), values.size()), dt);
}

Tensor Tensor::from_buffer(const Shape& shape, Buffer data) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
    throw ShapeError("from_buffer: size mismatch for shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, DType dt) {
  auto impl = new_impl(shape, dt);
  for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data.set(i, stddev * rng.normal());
  return Tensor(std::move(impl));
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, double lo, double hi, DType dt) {
  auto impl = new_impl(shape, dt);
  for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data.set(i, rng.uniform(lo, hi));
  return Tensor(std::move(impl));
}

std::int64_t Tensor::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError("axis out of range for shape " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data.get(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(impl_->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = impl_->data.get(i);
  return out;
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->grad_fn && !on) throw Error("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  if (!impl_->grad) throw Error("tensor has no gradient");
  return from_buffer(shape(), *impl_->grad);
}

Tensor Tensor::detach() const { return from_buffer(shape(), impl_->data); }

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return detach();
  Buffer b(dt, impl_->data.size());
  for (std::size_t i = 0; i < b.size(); ++i) b.set(i, impl_->data.get(i));
  return from_buffer(shape(), std::move(b));
}

Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward, const char* name) {
  check_finite(data, name);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      auto node = std::make_shared<Node>();
      node->name = name;
      for (auto& t : inputs)
        if (t.defined()) node->inputs.push_back(t.impl_ptr());
      node->backward = std::move(backward);
      impl->requires_grad = true;
      impl->grad_fn = std::move(node);
    }
  }
  return Tensor(std::move(impl));
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
  if (!requires_grad()) throw Error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  // Owning pointers: releasing a node's graph may drop the last other reference.
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(impl_, 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      std::shared_ptr<TensorImpl> child = node->grad_fn->inputs[next++];
      if (child->requires_grad && seen.insert(child.get()).second)
        stack.emplace_back(std::move(child), 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  impl_->grad_buffer().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = it->get();
    if (!t->grad_fn) continue;
    if (t->grad) {
      t->grad_fn->backward(*t);
    }
    // Interior nodes release their graph and gradient once consumed.
    t->grad_fn.reset();
    t->grad.reset();
  }
}

}  // namespace dali::num
