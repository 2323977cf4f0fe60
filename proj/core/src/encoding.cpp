#include "dali/encoding.hpp"

#include <cmath>

#include "dali/ops.hpp"

namespace dali::model {

void init_encoder(ParamStore& ps, const EncoderConfig& cfg, Rng& rng, const std::string& prefix) {
  if (cfg.k < 1 || cfg.d_L < 1) throw ConfigError("encoder needs k >= 1 and d_L >= 1");
  ps.add(prefix + ".W_b", Tensor::randn({4, cfg.d_L}, rng, 1.0 / std::sqrt(4.0)));
  ps.add(prefix + ".W_cu", Tensor::randn({2, cfg.d_L}, rng, 1.0 / std::sqrt(2.0)));
}

Tensor encode_batch(const std::vector<data::CircuitParams>& params, const ParamStore& ps,
                    const EncoderConfig& cfg, const std::string& prefix) {
  if (params.empty()) throw ShapeError("encode: empty batch");
  const auto b = static_cast<std::int64_t>(params.size());
  std::vector<double> boxes(static_cast<std::size_t>(b * cfg.k * 4), 0.0);
  std::vector<double> cu(static_cast<std::size_t>(b * cfg.k * 2), 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& p = params[static_cast<std::size_t>(i)];
    if (p.macro_count() > cfg.k)
      throw RangeError("encode: " + std::to_string(p.macro_count()) + " macros exceed k = " +
                       std::to_string(cfg.k));
    for (int j = 0; j < cfg.k; ++j) {
      const std::size_t row = static_cast<std::size_t>(i * cfg.k + j);
      if (j < p.macro_count()) {
        const auto& m = p.macros[static_cast<std::size_t>(j)];
        boxes[row * 4 + 0] = m.xl;
        boxes[row * 4 + 1] = m.yl;
        boxes[row * 4 + 2] = m.xu;
        boxes[row * 4 + 3] = m.yu;
      }
      cu[row * 2 + 0] = p.clock_period / cfg.max_clock_period;
      cu[row * 2 + 1] = p.utilization;
    }
  }
  const Tensor& wb = ps.get(prefix + ".W_b");
  const Tensor& wcu = ps.get(prefix + ".W_cu");
  const auto dt = wb.dtype();
  Tensor bl = num::matmul(Tensor::from_vector({b * cfg.k, 4}, boxes, dt), wb);
  Tensor cul = num::matmul(Tensor::from_vector({b * cfg.k, 2}, cu, dt), wcu);
  if (!cfg.identity_phi) {
    bl = num::silu(bl);
    cul = num::silu(cul);
  }
  return num::reshape(num::add(bl, cul), {b, cfg.k, cfg.d_L});
}

Tensor encode(const data::CircuitParams& params, const ParamStore& ps, const EncoderConfig& cfg,
              const std::string& prefix) {
  return num::reshape(encode_batch({params}, ps, cfg, prefix), {cfg.k, cfg.d_L});
}

Tensor null_embedding(int batch, const EncoderConfig& cfg) {
  return Tensor::zeros({batch, cfg.k, cfg.d_L});
}

}  // namespace dali::model
