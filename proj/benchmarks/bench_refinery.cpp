#include <benchmark/benchmark.h>

#include "refinery/blocks.hpp"
#include "refinery/cascade.hpp"
#include "refinery/dataio.hpp"
#include "refinery/ops.hpp"
#include "refinery/trainer.hpp"

namespace refinery {
namespace {

Tensor random_tensor(Shape s, SplitMix64& rng) {
  Tensor t(s);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

// 3x3 same convolution; args: channels, side.
void conv_forward(benchmark::State& state, ConvAlgo algo) {
  const int c = static_cast<int>(state.range(0));
  const int side = static_cast<int>(state.range(1));
  SplitMix64 rng(1);
  const ConvSpec spec = ConvSpec::same3x3(c, c, true);
  const Tensor x = random_tensor({1, c, side, side}, rng);
  const Tensor w = random_tensor(spec.weight_shape(), rng);
  const Tensor b = random_tensor({1, c, 1, 1}, rng);
  for (auto _ : state) {
    Tape tape(Tape::Mode::kInference);
    benchmark::DoNotOptimize(ops::conv2d(tape, x, w, b, spec, algo));
  }
  state.SetItemsProcessed(state.iterations() * 2LL * c * c * 9 * side * side);
}

void BM_ConvDirect(benchmark::State& state) { conv_forward(state, ConvAlgo::kDirect); }
void BM_ConvGemm(benchmark::State& state) { conv_forward(state, ConvAlgo::kGemm); }
BENCHMARK(BM_ConvDirect)->Args({16, 16})->Args({16, 64})->Args({64, 16});
BENCHMARK(BM_ConvGemm)->Args({16, 16})->Args({16, 64})->Args({64, 16});

void BM_ConvBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  SplitMix64 rng(2);
  const ConvSpec spec = ConvSpec::same3x3(c, c, true);
  Tensor x = random_tensor({1, c, 32, 32}, rng);
  Tensor w = random_tensor(spec.weight_shape(), rng);
  Tensor b = random_tensor({1, c, 1, 1}, rng);
  for (Tensor* t : {&x, &w, &b}) t->set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    const Tensor y = ops::conv2d(tape, x, w, b, spec);
    tape.backward(ops::weighted_sum(tape, y, y));
  }
}
BENCHMARK(BM_ConvBackward)->Arg(16)->Arg(32);

void BM_CrpForward(benchmark::State& state) {
  SplitMix64 rng(3);
  ParamRegistry reg;
  const Crp crp = make_crp(reg, "crp", 16, 2, PoolSpec{}, rng);
  const Tensor x = random_tensor({1, 16, 16, 16}, rng);
  for (auto _ : state) {
    Tape tape(Tape::Mode::kInference);
    benchmark::DoNotOptimize(crp_forward(tape, x, crp));
  }
}
BENCHMARK(BM_CrpForward);

ConfigSection toy_model(const char* variant) {
  ConfigSection s;
  s.set("variant", variant);
  s.set("num_classes", "4");
  s.set("stem_channels", "8");
  s.set("block_channels", "16,16,32,32");
  s.set("base_width", "16");
  return s;
}

constexpr const char* kVariants[] = {"single", "cascade2", "cascade4", "cascade4-2scale"};

// Inference on one 64x64 image; arg: variant index.
void BM_ModelForward(benchmark::State& state) {
  const char* v = kVariants[state.range(0)];
  state.SetLabel(v);
  auto model = build_model(toy_model(v), 1);
  SplitMix64 rng(4);
  const Tensor img = random_tensor({1, 3, 64, 64}, rng);
  for (auto _ : state) {
    Tape tape(Tape::Mode::kInference);
    benchmark::DoNotOptimize(model->forward(tape, img));
  }
}
BENCHMARK(BM_ModelForward)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

// One SGD step at batch 4 on the toy data; arg: variant index.
void BM_TrainStep(benchmark::State& state) {
  const char* v = kVariants[state.range(0)];
  state.SetLabel(v);
  const Dataset data = gen_synthetic(16, 64, 64, 4, 5);
  auto model = build_model(toy_model(v), 1);
  TrainConfig c;
  c.batch_size = 4;
  c.iterations = 1 << 30;
  Trainer trainer(*model, data, c);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step());
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace refinery

BENCHMARK_MAIN();
