#include <benchmark/benchmark.h>

#include "dali/diffusion.hpp"
#include "dali/encoding.hpp"
#include "dali/ldm.hpp"
#include "dali/ops.hpp"
#include "dali/vae.hpp"

using namespace dali;
using num::Tensor;

// One denoiser evaluation at the default configuration on the 6 x 6 latent of a 48 x 48 frame.
static void BM_UNetStep(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  model::ModelConfig cfg;
  auto m = model::init_model(cfg, 1);
  Rng rng(4, 0);
  data::CircuitParams p{4.0, 0.7, 48, 48, {{0.1, 0.1, 0.4, 0.3}}};
  const Tensor L = model::encode_batch(std::vector<data::CircuitParams>(batch, p), m.diffusion, cfg.encoder);
  const Tensor x = Tensor::randn({batch, cfg.vae.latent_channels, 6, 6}, rng);
  const std::vector<int> t(batch, 500);
  num::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(model::predict_noise(m.diffusion, cfg.unet, x, t, L));
}
BENCHMARK(BM_UNetStep)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

static void BM_VaeDecode(benchmark::State& state) {
  model::VaeConfig cfg;
  num::ParamStore ps;
  Rng rng(5, 0);
  model::init_vae(ps, cfg, rng);
  const Tensor z = Tensor::randn({1, cfg.latent_channels, 6, 6}, rng);
  num::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(model::vae_decode(ps, cfg, z));
}
BENCHMARK(BM_VaeDecode)->Unit(benchmark::kMillisecond);

static void BM_VaeTrainStep(benchmark::State& state) {
  model::VaeConfig cfg;
  num::ParamStore ps;
  Rng rng(6, 0);
  model::init_vae(ps, cfg, rng);
  const Tensor x = Tensor::uniform({8, cfg.in_channels, 24, 24}, rng, 0, 1);
  for (auto _ : state) {
    ps.zero_grad();
    const auto post = model::vae_encode(ps, cfg, x);
    model::elbo_loss(x, post, model::vae_decode(ps, cfg, post.mu), cfg.kl_weight).loss.backward();
  }
}
BENCHMARK(BM_VaeTrainStep)->Unit(benchmark::kMillisecond);
