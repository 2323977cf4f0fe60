#pragma once

#include <string>

#include "dali/ops.hpp"
#include "dali/param_store.hpp"
#include "dali/rng.hpp"

// Layer helpers over a ParamStore. init_* registers parameters under a name
// prefix; the matching forward function looks them up by the same prefix.
namespace dali::nn {

using num::ParamStore;
using num::Tensor;

/// Largest divisor of `channels` not above 8.
int norm_groups(int channels);

void init_conv(ParamStore& ps, const std::string& name, int in, int out, int kernel, Rng& rng,
               bool bias = true);
Tensor conv(const ParamStore& ps, const std::string& name, const Tensor& x, int stride = 1,
            int padding = -1);  // -1: same padding for odd kernels

/// Weight layout [in, out, K, K].
void init_conv_transpose(ParamStore& ps, const std::string& name, int in, int out, int kernel,
                         Rng& rng);
Tensor conv_transpose(const ParamStore& ps, const std::string& name, const Tensor& x, int stride,
                      int padding, int output_padding = 0);

void init_linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                 bool bias = true);
Tensor linear(const ParamStore& ps, const std::string& name, const Tensor& x);

void init_group_norm(ParamStore& ps, const std::string& name, int channels);
Tensor group_norm(const ParamStore& ps, const std::string& name, const Tensor& x);

/// GN -> SiLU -> conv3 -> (+ time projection) -> GN -> SiLU -> conv3, plus a
/// 1x1 skip when the channel count changes. temb_dim 0 disables the time input.
void init_resblock(ParamStore& ps, const std::string& name, int in, int out, int temb_dim,
                   Rng& rng);
Tensor resblock(const ParamStore& ps, const std::string& name, const Tensor& x,
                const Tensor& temb = Tensor());

/// [N, C, H, W] -> [N, H*W, C]
Tensor to_tokens(const Tensor& x);
/// [N, H*W, C] -> [N, C, H, W]
Tensor from_tokens(const Tensor& t, std::int64_t height, std::int64_t width);

/// Row-wise linear map over the last axis of a 3-D tensor.
Tensor linear3(const Tensor& x, const Tensor& w, const Tensor& bias);

}  // namespace dali::nn
