#include <doctest.h>

#include <cmath>

#include "cfcm/loss.hpp"
#include "cfcm/model.hpp"
#include "cfcm/rng.hpp"

using namespace cfcm;

namespace {

ModelConfig tiny_config(DecoderKind kind, std::int64_t classes = 1) {
  ModelConfig mc;
  mc.depth = 18;
  mc.width_mult = 0.125;
  mc.in_channels = 1;
  mc.num_classes = classes;
  mc.hidden_channels = 4;
  mc.decoder = kind;
  return mc;
}

FeaturePyramid<float> random_pyramid(Rng& rng, std::int64_t n = 1) {
  FeaturePyramid<float> pyr;
  pyr.levels = {Tensor4<float>::randn({n, 64, 2, 2}, rng), Tensor4<float>::randn({n, 32, 4, 4}, rng),
                Tensor4<float>::randn({n, 16, 8, 8}, rng), Tensor4<float>::randn({n, 8, 16, 16}, rng)};
  return pyr;
}

void zero_params(std::vector<ParamRef<float>> params) {
  for (auto& p : params)
    for (auto& v : p.tensor->mutable_data()) v = 0.0f;
}

}  // namespace

TEST_CASE("cfcm logits come back at input resolution") {
  auto model = build_model<float>(tiny_config(DecoderKind::kCfcm), 17u);
  auto x = Tensor4<float>::zeros({2, 1, 64, 64});
  auto logits = model.forward(x, Mode::kEval);
  CHECK(logits.shape() == Shape4{2, 1, 64, 64});

  auto multi = build_model<float>(tiny_config(DecoderKind::kCfcm, 3), 17u);
  // 3-class mode pairs with 3-channel input.
  auto cfg3 = tiny_config(DecoderKind::kCfcm, 3);
  cfg3.in_channels = 3;
  multi = build_model<float>(cfg3, 17u);
  auto x3 = Tensor4<float>::zeros({1, 3, 96, 96});
  CHECK(multi.forward(x3, Mode::kEval).shape() == Shape4{1, 3, 96, 96});
}

TEST_CASE("all-zero parameters produce all-zero logits") {
  auto model = build_model<float>(tiny_config(DecoderKind::kCfcm), 19u);
  zero_params(model.parameters());
  Rng rng(61);
  auto x = Tensor4<float>::randn({1, 1, 64, 64}, rng);
  auto logits = model.forward(x, Mode::kTrain);
  for (const auto v : logits.data()) CHECK(v == 0.0f);
}

TEST_CASE("perturbing the coarsest level changes the logits") {
  auto model = build_model<float>(tiny_config(DecoderKind::kCfcm), 23u);
  Rng rng(62);
  auto pyr = random_pyramid(rng);
  const auto base = model.cfcm->forward(pyr, Mode::kEval);

  auto moved = pyr;
  moved.levels[0] = add(pyr.levels[0], Tensor4<float>::ones(pyr.levels[0].shape()));
  const auto shifted = model.cfcm->forward(moved, Mode::kEval);

  double diff = 0.0;
  for (std::size_t i = 0; i < base.data().size(); ++i) {
    diff += std::abs(static_cast<double>(base.data()[i]) - shifted.data()[i]);
  }
  CHECK(diff > 0.0);
}

TEST_CASE("decoder forward is a pure function of its inputs") {
  auto model = build_model<float>(tiny_config(DecoderKind::kCfcm), 29u);
  Rng rng(63);
  auto pyr = random_pyramid(rng);
  const auto a = model.cfcm->forward(pyr, Mode::kEval);
  const auto b = model.cfcm->forward(pyr, Mode::kEval);
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);

  auto moved = pyr;
  moved.levels[3] = add(pyr.levels[3], Tensor4<float>::ones(pyr.levels[3].shape()));
  const auto c = model.cfcm->forward(moved, Mode::kEval);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    diff += std::abs(static_cast<double>(a.data()[i]) - c.data()[i]);
  }
  CHECK(diff > 0.0);
}

TEST_CASE("pyramid/cell count mismatch is rejected") {
  auto model = build_model<float>(tiny_config(DecoderKind::kCfcm), 31u);
  Rng rng(64);
  auto pyr = random_pyramid(rng);
  pyr.levels.pop_back();
  CHECK_THROWS_AS(model.cfcm->forward(pyr, Mode::kEval), InvalidArgument);

  auto wrong = random_pyramid(rng);
  wrong.levels[0] = Tensor4<float>::randn({1, 60, 2, 2}, rng);
  CHECK_THROWS_AS(model.cfcm->forward(wrong, Mode::kEval), InvalidArgument);
}

TEST_CASE("skip decoder with zeroed fusion convs yields zero logits") {
  for (const auto kind : {DecoderKind::kSkipSum, DecoderKind::kSkipConcat}) {
    auto model = build_model<float>(tiny_config(kind), 37u);
    zero_params(model.parameters());
    Rng rng(65);
    auto pyr = random_pyramid(rng);
    auto logits = model.skip->forward(pyr, Mode::kTrain);
    CHECK(logits.shape() == Shape4{1, 1, 64, 64});
    for (const auto v : logits.data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("concat fusion channel bookkeeping") {
  auto model = build_model<float>(tiny_config(DecoderKind::kSkipConcat), 41u);
  const auto& dec = *model.skip;
  // Mixing conv input channels = upsampled decoder channels + tap channels.
  CHECK(dec.mix[0].weight.shape() == Shape4{32, 64 + 32, 3, 3});
  CHECK(dec.mix[1].weight.shape() == Shape4{16, 32 + 16, 3, 3});
  CHECK(dec.mix[2].weight.shape() == Shape4{8, 16 + 8, 3, 3});

  auto sum_model = build_model<float>(tiny_config(DecoderKind::kSkipSum), 41u);
  REQUIRE(sum_model.skip->adapters[0].has_value());
  CHECK(sum_model.skip->adapters[0]->weight.shape() == Shape4{32, 64, 1, 1});
  CHECK(sum_model.skip->mix[0].weight.shape() == Shape4{32, 32, 3, 3});
}

TEST_CASE("sum and concat decoders disagree on identical inputs") {
  auto a = build_model<float>(tiny_config(DecoderKind::kSkipSum), 43u);
  auto b = build_model<float>(tiny_config(DecoderKind::kSkipConcat), 43u);
  Rng rng(66);
  auto x = Tensor4<float>::randn({1, 1, 64, 64}, rng);
  auto la = a.forward(x, Mode::kEval);
  auto lb = b.forward(x, Mode::kEval);
  double diff = 0.0;
  for (std::size_t i = 0; i < la.data().size(); ++i) {
    diff += std::abs(static_cast<double>(la.data()[i]) - lb.data()[i]);
  }
  CHECK(diff > 0.0);
}

TEST_CASE("resolution invariant across sizes and depths") {
  Rng rng(67);
  for (const int depth : {18, 34, 50}) {
    for (const std::int64_t size : {std::int64_t(64), std::int64_t(96)}) {
      auto cfg = tiny_config(DecoderKind::kCfcm);
      cfg.depth = depth;
      auto model = build_model<float>(cfg, 47u);
      auto x = Tensor4<float>::randn({1, 1, size, size}, rng);
      CHECK(model.forward(x, Mode::kEval).shape() == Shape4{1, 1, size, size});
    }
  }
}

TEST_CASE("count_parameters small fixtures") {
  SeedStream seeds(1);
  auto conv = make_conv_layer<float>(2, 3, 1, 1, 0, true, seeds);
  CHECK(conv.weight.numel() + conv.bias->numel() == 9);  // 2*3 + 3

  auto cell = make_conv_lstm_cell<float>(2, 3, seeds);
  CHECK(cell.gates.weight.numel() + cell.gates.bias->numel() == 552);  // (2+3)*(4*3)*9 + 12
}

TEST_CASE("CFCM-18 parameter count matches an independent layer-list sum") {
  auto model = build_model<float>(tiny_config(DecoderKind::kCfcm), 53u);

  // Hand-summed oracle over the architecture plan, written without touching
  // the model's own bookkeeping.
  std::int64_t oracle = 0;
  oracle += 7 * 7 * 1 * 8;  // stem conv
  oracle += 2 * 8;          // stem bn

  const std::int64_t widths[4] = {8, 16, 32, 64};
  std::int64_t in = 8;
  for (int stage = 0; stage < 4; ++stage) {
    for (int block = 0; block < 2; ++block) {
      const std::int64_t out = widths[stage];
      const bool strided = stage > 0 && block == 0;
      oracle += 3 * 3 * in * out + 2 * out;    // conv1 + bn1
      oracle += 3 * 3 * out * out + 2 * out;   // conv2 + bn2
      if (strided || in != out) {
        oracle += 1 * 1 * in * out + 2 * out;  // projection + bn
      }
      in = out;
    }
  }

  const std::int64_t hidden = 4;
  for (const std::int64_t c_x : {64, 32, 16, 8}) {
    oracle += (c_x + hidden) * (4 * hidden) * 9 + 4 * hidden;  // gate conv + bias
  }
  oracle += 3 * 3 * hidden * hidden + hidden;  // head conv
  oracle += hidden * 1 + 1;                    // head 1x1 to classes

  CHECK(count_parameters(model) == oracle);
}

TEST_CASE("dice loss through the cfcm decoder has finite gradients everywhere") {
  auto model = build_model<float>(tiny_config(DecoderKind::kCfcm), 59u);
  Rng rng(68);
  auto x = Tensor4<float>::randn({2, 1, 64, 64}, rng);
  LabelBatch labels(2, 64, 64);
  for (auto& v : labels.v) v = rng.uniform() < 0.3 ? 1 : 0;

  Tape<float> tape;
  auto loss = soft_dice_loss(model.forward(x, Mode::kTrain, &tape), labels, 1e-7, &tape);
  tape.backward(loss);
  for (auto& p : model.parameters()) {
    REQUIRE(tape.has_grad(*p.tensor));
    const auto& g = tape.grad(*p.tensor);
    REQUIRE(g.shape() == p.tensor->shape());
    for (const auto v : g.data()) CHECK(std::isfinite(v));
  }
}
