#include <benchmark/benchmark.h>

#include "dali/ops.hpp"
#include "dali/rng.hpp"

using namespace dali;
using num::Tensor;

static void BM_Conv2d(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), hw = static_cast<int>(state.range(1));
  Rng rng(1, 0);
  const Tensor x = Tensor::randn({8, c, hw, hw}, rng);
  const Tensor w = Tensor::randn({c, c, 3, 3}, rng, 0.1);
  const Tensor b = Tensor::zeros({c});
  num::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(num::conv2d(x, w, b, {1, 1}));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2d)->Args({32, 24})->Args({64, 12})->Args({128, 6})->Unit(benchmark::kMillisecond);

static void BM_Conv2dBackward(benchmark::State& state) {
  Rng rng(2, 0);
  Tensor x = Tensor::randn({8, 32, 24, 24}, rng);
  Tensor w = Tensor::randn({32, 32, 3, 3}, rng, 0.1);
  w.set_requires_grad();
  for (auto _ : state) {
    w.zero_grad();
    num::sum(num::conv2d(x, w, Tensor(), {1, 1})).backward();
  }
}
BENCHMARK(BM_Conv2dBackward)->Unit(benchmark::kMillisecond);

static void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(3, 0);
  const Tensor a = Tensor::randn({n, n}, rng), b = Tensor::randn({n, n}, rng);
  num::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(num::matmul(a, b));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
