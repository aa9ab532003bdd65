#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "cfcm/encoder.hpp"
#include "cfcm/gradcheck.hpp"
#include "cfcm/rng.hpp"

using namespace cfcm;

namespace {

struct LayerSpec {
  std::int64_t k, s, p;
};

// Input-pixel range feeding output unit [0,0], walked backward through the
// layer chain. Independent receptive-field oracle for the perturbation test.
std::pair<std::int64_t, std::int64_t> receptive_field_of_unit0(const std::vector<LayerSpec>& layers) {
  std::int64_t lo = 0, hi = 0;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    lo = lo * it->s - it->p;
    hi = hi * it->s - it->p + it->k - 1;
  }
  return {lo, hi};
}

// conv7/2, pool2, then depth-18 stages: [3x3]x4 per stage, stride 2 entering
// stages 2..4.
std::vector<LayerSpec> resnet18_layer_chain() {
  std::vector<LayerSpec> layers = {{7, 2, 3}, {2, 2, 0}};
  for (int stage = 0; stage < 4; ++stage) {
    for (int conv = 0; conv < 4; ++conv) {
      const std::int64_t stride = (stage > 0 && conv == 0) ? 2 : 1;
      layers.push_back({3, stride, 1});
    }
  }
  return layers;
}

}  // namespace

TEST_CASE("encoder taps at full width on a 256x256 input") {
  Encoder<float> enc = build_encoder<float>(EncoderConfig{18, 1.0, 1}, 3u);
  auto x = Tensor4<float>::zeros({1, 1, 256, 256});
  auto pyramid = enc.forward(x, Mode::kEval);
  REQUIRE(pyramid.levels.size() == 4);
  CHECK(pyramid.levels[0].shape() == Shape4{1, 512, 8, 8});
  CHECK(pyramid.levels[1].shape() == Shape4{1, 256, 16, 16});
  CHECK(pyramid.levels[2].shape() == Shape4{1, 128, 32, 32});
  CHECK(pyramid.levels[3].shape() == Shape4{1, 64, 64, 64});
}

TEST_CASE("encoder channel ladder scales with width_mult") {
  Encoder<float> enc = build_encoder<float>(EncoderConfig{18, 0.125, 1}, 3u);
  CHECK(enc.stage_channels == std::array<std::int64_t, 4>{8, 16, 32, 64});

  Encoder<float> wide = build_encoder<float>(EncoderConfig{50, 0.125, 1}, 3u);
  CHECK(wide.stage_channels == std::array<std::int64_t, 4>{32, 64, 128, 256});

  CHECK_THROWS_AS(build_encoder<float>(EncoderConfig{18, 0.01, 1}, 3u), InvalidArgument);
  CHECK_THROWS_AS(build_encoder<float>(EncoderConfig{19, 1.0, 1}, 3u), InvalidArgument);
}

TEST_CASE("depth 101 stays constructible with four taps") {
  Encoder<float> enc = build_encoder<float>(EncoderConfig{101, 0.125, 1}, 3u);
  CHECK(enc.stage_channels == std::array<std::int64_t, 4>{32, 64, 128, 256});
  CHECK(enc.stages[2].size() == 23);
  auto x = Tensor4<float>::zeros({1, 1, 32, 32});
  CHECK(enc.forward(x, Mode::kEval).levels.size() == 4);
}

TEST_CASE("encoder parameters are deterministic per seed") {
  Encoder<float> a = build_encoder<float>(EncoderConfig{18, 0.125, 1}, 11u);
  Encoder<float> b = build_encoder<float>(EncoderConfig{18, 0.125, 1}, 11u);
  std::vector<ParamRef<float>> pa, ba, pb, bb;
  a.collect("e", pa, ba);
  b.collect("e", pb, bb);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].name == pb[i].name);
    const auto da = pa[i].tensor->data();
    const auto db = pb[i].tensor->data();
    for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
  }
}

TEST_CASE("encoder forward shapes on a 64x64 batch") {
  Encoder<float> enc = build_encoder<float>(EncoderConfig{18, 0.125, 1}, 5u);
  auto x = Tensor4<float>::zeros({2, 1, 64, 64});
  auto pyramid = enc.forward(x, Mode::kEval);
  CHECK(pyramid.levels[0].shape() == Shape4{2, 64, 2, 2});
  CHECK(pyramid.levels[1].shape() == Shape4{2, 32, 4, 4});
  CHECK(pyramid.levels[2].shape() == Shape4{2, 16, 8, 8});
  CHECK(pyramid.levels[3].shape() == Shape4{2, 8, 16, 16});

  for (const auto& level : pyramid.levels)
    for (const auto v : level.data()) CHECK(std::isfinite(v));

  auto bad = Tensor4<float>::zeros({1, 1, 48, 48});
  CHECK_THROWS_AS(enc.forward(bad, Mode::kEval), InvalidArgument);
}

TEST_CASE("pyramid ordering and channel monotonicity") {
  for (const int depth : {18, 34, 50}) {
    Encoder<float> enc = build_encoder<float>(EncoderConfig{depth, 0.125, 1}, 9u);
    auto x = Tensor4<float>::zeros({1, 1, 64, 64});
    auto pyramid = enc.forward(x, Mode::kEval);
    REQUIRE(pyramid.levels.size() == 4);
    for (std::size_t i = 0; i + 1 < pyramid.levels.size(); ++i) {
      CHECK(pyramid.levels[i].shape().h * 2 == pyramid.levels[i + 1].shape().h);
      CHECK(pyramid.levels[i].shape().w * 2 == pyramid.levels[i + 1].shape().w);
      CHECK(pyramid.levels[i].shape().c >= pyramid.levels[i + 1].shape().c);
    }
    CHECK(pyramid.levels[0].shape().h == 64 / 32);
    CHECK(pyramid.levels[3].shape().h == 64 / 4);
  }
}

TEST_CASE("gradient reaches the stem from the coarsest tap") {
  Encoder<double> enc = build_encoder<double>(EncoderConfig{18, 0.125, 1}, 13u);
  Rng rng(40);
  auto x = Tensor4<double>::randn({1, 1, 64, 64}, rng);
  Tape<double> tape;
  auto pyramid = enc.forward(x, Mode::kTrain, &tape);
  auto loss = reduce_sum(pyramid.levels[0], &tape);
  tape.backward(loss);
  const auto& grad = tape.grad(enc.stem.weight);
  double magnitude = 0.0;
  for (const auto v : grad.data()) magnitude += std::abs(v);
  CHECK(magnitude > 0.0);
}

TEST_CASE("residual block with zero weights is relu(x)") {
  SeedStream seeds(4);
  auto block = make_residual_block<float>(false, 8, 8, 8, 1, seeds);
  for (auto& conv : block.convs)
    for (auto& v : conv.weight.mutable_data()) v = 0.0f;
  REQUIRE_FALSE(block.proj.has_value());

  Rng rng(41);
  auto x = Tensor4<float>::randn({2, 8, 6, 6}, rng);
  auto y = block.forward(x, Mode::kTrain);
  for (std::size_t i = 0; i < y.data().size(); ++i) {
    CHECK(y.data()[i] == std::max(0.0f, x.data()[i]));
  }
}

TEST_CASE("strided residual block halves the spatial size") {
  SeedStream seeds(6);
  auto block = make_residual_block<float>(false, 8, 16, 16, 2, seeds);
  REQUIRE(block.proj.has_value());
  Rng rng(42);
  auto x = Tensor4<float>::randn({1, 8, 8, 8}, rng);
  auto y = block.forward(x, Mode::kTrain);
  CHECK(y.shape() == Shape4{1, 16, 4, 4});
}

TEST_CASE("bottleneck block structure") {
  SeedStream seeds(8);
  auto block = make_residual_block<double>(true, 16, 4, 16, 1, seeds);
  REQUIRE(block.convs.size() == 3);
  CHECK(block.convs[0].weight.shape() == Shape4{4, 16, 1, 1});
  CHECK(block.convs[1].weight.shape() == Shape4{4, 4, 3, 3});
  CHECK(block.convs[2].weight.shape() == Shape4{16, 4, 1, 1});
  CHECK_FALSE(block.proj.has_value());
}

TEST_CASE("single residual block gradient check") {
  SeedStream seeds(10);
  auto block = make_residual_block<double>(false, 2, 3, 3, 2, seeds);
  Rng rng(43);
  auto x = Tensor4<double>::randn({2, 2, 4, 4}, rng);
  x.set_requires_grad(true);
  std::vector<ParamRef<double>> params, buffers;
  block.collect("b", params, buffers);
  std::vector<Tensor4<double>*> tensors = {&x};
  for (auto& p : params) tensors.push_back(p.tensor);
  const auto r = Tensor4<double>::randn({2, 3, 2, 2}, rng);
  const double err = finite_diff_check(
      tensors,
      [&](Tape<double>* t) {
        return reduce_sum(mul(block.forward(x, Mode::kTrain, t), r, t), t);
      },
      1e-4, 16, rng);
  CHECK(err < 1e-4);
}

TEST_CASE("perturbations outside the receptive field leave a unit unchanged") {
  Encoder<float> enc = build_encoder<float>(EncoderConfig{18, 0.125, 1}, 15u);

  const auto [lo, hi] = receptive_field_of_unit0(resnet18_layer_chain());
  CHECK(lo < 0);
  REQUIRE(hi < 255);  // an outside pixel exists on a 256x256 input

  Rng rng(44);
  auto x = Tensor4<float>::randn({1, 1, 256, 256}, rng);
  const auto base = enc.forward(x, Mode::kEval).levels[0];

  // Inside pixel: the corner unit must react.
  auto inside = x.clone();
  inside.at_mut(0, 0, 1, 1) += 2.0f;
  const auto moved = enc.forward(inside, Mode::kEval).levels[0];
  bool changed = false;
  for (std::int64_t c = 0; c < moved.shape().c; ++c)
    changed |= moved.at(0, c, 0, 0) != base.at(0, c, 0, 0);
  CHECK(changed);

  // Outside pixel: bit-identical corner unit.
  auto outside = x.clone();
  outside.at_mut(0, 0, hi + 2, hi + 2) += 2.0f;
  const auto still = enc.forward(outside, Mode::kEval).levels[0];
  for (std::int64_t c = 0; c < still.shape().c; ++c) {
    CHECK(still.at(0, c, 0, 0) == base.at(0, c, 0, 0));
  }
}
