#include <benchmark/benchmark.h>

#include "cfcm/conv_lstm.hpp"
#include "cfcm/loss.hpp"
#include "cfcm/metrics.hpp"
#include "cfcm/model.hpp"
#include "cfcm/optim.hpp"
#include "cfcm/rng.hpp"

using namespace cfcm;

namespace {

ModelConfig toy_config() {
  ModelConfig mc;
  mc.depth = 18;
  mc.width_mult = 0.125;
  mc.in_channels = 1;
  mc.num_classes = 1;
  mc.hidden_channels = 4;
  mc.decoder = DecoderKind::kCfcm;
  return mc;
}

void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(1);
  auto x = Tensor4<float>::randn({16, 8, 32, 32}, rng);
  auto w = Tensor4<float>::randn({8, 8, 3, 3}, rng, 0.2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d<float>(x, w, nullptr, 1, 1));
  }
}
BENCHMARK(BM_Conv2dForward);

void BM_ConvLSTMCellStep(benchmark::State& state) {
  SeedStream seeds(2);
  auto cell = make_conv_lstm_cell<float>(8, 4, seeds);
  Rng rng(3);
  auto x = Tensor4<float>::randn({16, 8, 16, 16}, rng);
  auto s = zero_state<float>(16, 4, 16, 16);
  for (auto _ : state) {
    benchmark::DoNotOptimize(cell_step(cell, x, s));
  }
}
BENCHMARK(BM_ConvLSTMCellStep);

void BM_CfcmForwardEval(benchmark::State& state) {
  auto model = build_model<float>(toy_config(), 4u);
  Rng rng(5);
  auto x = Tensor4<float>::randn({1, 1, 64, 64}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward(x, Mode::kEval));
  }
}
BENCHMARK(BM_CfcmForwardEval);

void BM_TrainStepBatch16(benchmark::State& state) {
  auto model = build_model<float>(toy_config(), 6u);
  auto params = model.parameters();
  AdamState<float> opt = make_adam_state(params);
  Rng rng(7);
  auto x = Tensor4<float>::randn({16, 1, 64, 64}, rng);
  LabelBatch labels(16, 64, 64);
  for (auto& v : labels.v) v = rng.uniform() < 0.2 ? 1 : 0;

  for (auto _ : state) {
    Tape<float> tape;
    auto loss = soft_dice_loss(model.forward(x, Mode::kTrain, &tape), labels, 1e-7, &tape);
    tape.backward(loss);
    adam_step(params, tape, opt, 1e-4);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_TrainStepBatch16)->Unit(benchmark::kMillisecond);

void BM_SurfaceDistances64(benchmark::State& state) {
  Rng rng(8);
  BinaryMask a(64, 64), b(64, 64);
  for (std::int64_t y = 20; y < 44; ++y)
    for (std::int64_t x = 18; x < 40; ++x) a.at(y, x) = 1;
  for (std::int64_t y = 22; y < 46; ++y)
    for (std::int64_t x = 22; x < 44; ++x) b.at(y, x) = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(surface_distances(a, b));
  }
}
BENCHMARK(BM_SurfaceDistances64);

void BM_SurfaceDistancesBruteforce64(benchmark::State& state) {
  BinaryMask a(64, 64), b(64, 64);
  for (std::int64_t y = 20; y < 44; ++y)
    for (std::int64_t x = 18; x < 40; ++x) a.at(y, x) = 1;
  for (std::int64_t y = 22; y < 46; ++y)
    for (std::int64_t x = 22; x < 44; ++x) b.at(y, x) = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(surface_distances_bruteforce(a, b));
  }
}
BENCHMARK(BM_SurfaceDistancesBruteforce64);

void BM_SynthSampleBinary(benchmark::State& state) {
  SynthConfig cfg;
  cfg.count = 1;
  cfg.image_size = 64;
  cfg.folds = 2;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    cfg.seed = seed++;
    cfg.count = 2;  // folds require count >= 2
    benchmark::DoNotOptimize(generate_synthetic(cfg));
  }
}
BENCHMARK(BM_SynthSampleBinary);

}  // namespace

BENCHMARK_MAIN();
