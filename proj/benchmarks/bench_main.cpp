#include <benchmark/benchmark.h>

#include <random>

#include "ctlab/metrics.hpp"
#include "ctlab/phantom.hpp"
#include "ctlab/preprocess.hpp"
#include "ctlab/segnet.hpp"

using namespace ctlab;

namespace {

UNetConfig bench_config(int side) {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_width = 8;
  cfg.image_side = side;
  return cfg;
}

Tensor<float> random_tensor(int n, int c, int side, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  Tensor<float> t(n, c, side, side);
  for (auto& x : t.data) x = unit(gen);
  return t;
}

void BM_Forward(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  const auto params = init_unet<float>(bench_config(side), 1);
  const auto batch = random_tensor(10, 4, side, 2);
  for (auto _ : state) benchmark::DoNotOptimize(forward(params, batch));
  state.SetItemsProcessed(state.iterations() * batch.n);
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Backward(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  const auto params = init_unet<float>(bench_config(side), 1);
  const auto batch = random_tensor(10, 4, side, 2);
  auto target = random_tensor(10, 2, side, 3);
  const int plane = side * side;
  for (int n = 0; n < target.n; ++n) {
    float* t = target.sample(n);
    for (int k = 0; k < plane; ++k) {
      t[k] = t[k] < 0.3f ? 1.0f : 0.0f;
      t[plane + k] = 1.0f - t[k];
    }
  }
  for (auto _ : state) benchmark::DoNotOptimize(backward(params, batch, target));
  state.SetItemsProcessed(state.iterations() * batch.n);
}
BENCHMARK(BM_Backward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_MakeSample(benchmark::State& state) {
  PhantomSpec spec;
  spec.side = 128;
  spec.depth = 4;
  spec.volumes = 1;
  const auto vol = generate_dataset(spec).front();
  PreprocessOptions po;
  po.side = static_cast<int>(state.range(0));
  const SlideId id{"P", 0, 1};
  for (auto _ : state) benchmark::DoNotOptimize(make_sample(vol.ct, vol.lung, vol.lesion, id, po));
}
BENCHMARK(BM_MakeSample)->Arg(32)->Arg(128);

void BM_Lint(benchmark::State& state) {
  PhantomSpec spec;
  spec.side = 128;
  spec.depth = 16;
  spec.volumes = 1;
  spec.inject_faults = true;
  const auto vol = generate_dataset(spec).front();
  for (auto _ : state) benchmark::DoNotOptimize(lint_annotations(vol.lung, vol.lesion));
}
BENCHMARK(BM_Lint);

void BM_Confusion(benchmark::State& state) {
  std::mt19937_64 gen(4);
  BinaryGrid pred(320, 320), gt(320, 320);
  for (auto& x : pred.data) x = gen() % 2;
  for (auto& x : gt.data) x = gen() % 2;
  for (auto _ : state) benchmark::DoNotOptimize(slice_metrics(confusion(pred, gt)));
}
BENCHMARK(BM_Confusion);

}  // namespace

BENCHMARK_MAIN();
