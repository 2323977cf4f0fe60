#pragma once

#include <string>
#include <vector>

#include "dali/heatmap.hpp"
#include "dali/param_store.hpp"
#include "dali/rng.hpp"

namespace dali::model {

using num::ParamStore;
using num::Tensor;

struct EncoderConfig {
  int k = 64;    // pad length, upper bound on macro count
  int d_L = 64;  // embedding width
  double max_clock_period = 10.0;  // ns; clock period is divided by this
  bool identity_phi = false;       // SiLU otherwise
};

/// Registers `<prefix>.W_b` [4, d_L] and `<prefix>.W_cu` [2, d_L].
void init_encoder(ParamStore& ps, const EncoderConfig& cfg, Rng& rng,
                  const std::string& prefix = "enc");

/// Conditioning matrix L [k, d_L]. Row j is phi(b_j W_b) + phi((c, u) W_cu)
/// with b_j the j-th normalized box, or (0, 0, 0, 0) past the last macro.
Tensor encode(const data::CircuitParams& params, const ParamStore& ps, const EncoderConfig& cfg,
              const std::string& prefix = "enc");

/// Stacked embeddings [B, k, d_L].
Tensor encode_batch(const std::vector<data::CircuitParams>& params, const ParamStore& ps,
                    const EncoderConfig& cfg, const std::string& prefix = "enc");

/// The unconditional embedding used for guidance: zeros [B, k, d_L].
Tensor null_embedding(int batch, const EncoderConfig& cfg);

}  // namespace dali::model
