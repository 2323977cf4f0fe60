#include <benchmark/benchmark.h>

#include <vector>

#include "dali/metrics.hpp"
#include "dali/rng.hpp"

using namespace dali;

static std::vector<std::vector<float>> random_maps(int n, int hw) {
  Rng rng(7, 0);
  std::vector<std::vector<float>> maps(n, std::vector<float>(static_cast<std::size_t>(hw * hw)));
  for (auto& m : maps)
    for (auto& v : m) v = static_cast<float>(rng.uniform());
  return maps;
}

static void BM_Ssim(benchmark::State& state) {
  const int hw = static_cast<int>(state.range(0));
  const auto maps = random_maps(2, hw);
  for (auto _ : state)
    benchmark::DoNotOptimize(metrics::ssim({maps[0], hw, hw}, {maps[1], hw, hw}));
}
BENCHMARK(BM_Ssim)->Arg(48)->Arg(256)->Unit(benchmark::kMicrosecond);

static void BM_PairwiseSsim(benchmark::State& state) {
  const auto maps = random_maps(static_cast<int>(state.range(0)), 48);
  std::vector<metrics::MapRef> refs;
  for (const auto& m : maps) refs.push_back({m, 48, 48});
  for (auto _ : state) benchmark::DoNotOptimize(metrics::pairwise_ssim(refs, 1));
  state.SetItemsProcessed(state.iterations() * state.range(0) * (state.range(0) - 1) / 2);
}
BENCHMARK(BM_PairwiseSsim)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_Fid(benchmark::State& state) {
  const auto maps = random_maps(128, 48);
  std::vector<metrics::MapRef> a, b;
  for (int i = 0; i < 64; ++i) a.push_back({maps[i], 48, 48}), b.push_back({maps[64 + i], 48, 48});
  for (auto _ : state) benchmark::DoNotOptimize(metrics::fid(a, b));
}
BENCHMARK(BM_Fid)->Unit(benchmark::kMillisecond);
