#include "dali/nn.hpp"

#include <cmath>

namespace dali::nn {

using num::DType;
using num::Shape;

int norm_groups(int channels) {
  for (int g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

namespace {

Tensor fan_in_uniform(const Shape& shape, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  return Tensor::uniform(shape, rng, -bound, bound);
}

}  // namespace

void init_conv(ParamStore& ps, const std::string& name, int in, int out, int kernel, Rng& rng,
               bool bias) {
  const double fan_in = static_cast<double>(in) * kernel * kernel;
  ps.add(name + ".weight", fan_in_uniform({out, in, kernel, kernel}, fan_in, rng));
  if (bias) ps.add(name + ".bias", fan_in_uniform({out}, fan_in, rng));
}

Tensor conv(const ParamStore& ps, const std::string& name, const Tensor& x, int stride,
            int padding) {
  const Tensor& w = ps.get(name + ".weight");
  const Tensor b = ps.contains(name + ".bias") ? ps.get(name + ".bias") : Tensor();
  if (padding < 0) padding = static_cast<int>(w.dim(2) / 2);
  return num::conv2d(x, w, b, {stride, padding});
}

void init_conv_transpose(ParamStore& ps, const std::string& name, int in, int out, int kernel,
                         Rng& rng) {
  const double fan_in = static_cast<double>(out) * kernel * kernel;
  ps.add(name + ".weight", fan_in_uniform({in, out, kernel, kernel}, fan_in, rng));
  ps.add(name + ".bias", fan_in_uniform({out}, fan_in, rng));
}

Tensor conv_transpose(const ParamStore& ps, const std::string& name, const Tensor& x, int stride,
                      int padding, int output_padding) {
  return num::conv_transpose2d(x, ps.get(name + ".weight"), ps.get(name + ".bias"),
                               {stride, padding, output_padding});
}

void init_linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias) {
  ps.add(name + ".weight", fan_in_uniform({in, out}, in, rng));
  if (bias) ps.add(name + ".bias", fan_in_uniform({out}, in, rng));
}

Tensor linear(const ParamStore& ps, const std::string& name, const Tensor& x) {
  const Tensor b = ps.contains(name + ".bias") ? ps.get(name + ".bias") : Tensor();
  if (x.ndim() == 3) return linear3(x, ps.get(name + ".weight"), b);
  return num::linear(x, ps.get(name + ".weight"), b);
}

void init_group_norm(ParamStore& ps, const std::string& name, int channels) {
  ps.add(name + ".gamma", Tensor::full({channels}, 1.0));
  ps.add(name + ".beta", Tensor::zeros({channels}));
}

Tensor group_norm(const ParamStore& ps, const std::string& name, const Tensor& x) {
  return num::group_norm(x, norm_groups(static_cast<int>(x.dim(1))), ps.get(name + ".gamma"),
                         ps.get(name + ".beta"));
}

void init_resblock(ParamStore& ps, const std::string& name, int in, int out, int temb_dim,
                   Rng& rng) {
  init_group_norm(ps, name + ".norm1", in);
  init_conv(ps, name + ".conv1", in, out, 3, rng);
  if (temb_dim > 0) init_linear(ps, name + ".temb", temb_dim, out, rng);
  init_group_norm(ps, name + ".norm2", out);
  init_conv(ps, name + ".conv2", out, out, 3, rng);
  if (in != out) init_conv(ps, name + ".skip", in, out, 1, rng);
}

Tensor resblock(const ParamStore& ps, const std::string& name, const Tensor& x,
                const Tensor& temb) {
  Tensor h = conv(ps, name + ".conv1", num::silu(group_norm(ps, name + ".norm1", x)));
  if (temb.defined() && ps.contains(name + ".temb.weight"))
    h = num::add_channel(h, linear(ps, name + ".temb", num::silu(temb)));
  h = conv(ps, name + ".conv2", num::silu(group_norm(ps, name + ".norm2", h)));
  const Tensor skip = ps.contains(name + ".skip.weight") ? conv(ps, name + ".skip", x) : x;
  return num::add(skip, h);
}

Tensor to_tokens(const Tensor& x) {
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return num::permute(num::reshape(x, {n, c, hw}), {0, 2, 1});
}

Tensor from_tokens(const Tensor& t, std::int64_t height, std::int64_t width) {
  const auto n = t.dim(0), c = t.dim(2);
  return num::reshape(num::permute(t, {0, 2, 1}), {n, c, height, width});
}

Tensor linear3(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const auto b = x.dim(0), n = x.dim(1), f = x.dim(2);
  Tensor y = num::linear(num::reshape(x, {b * n, f}), w, bias);
  return num::reshape(y, {b, n, w.dim(1)});
}

}  // namespace dali::nn
