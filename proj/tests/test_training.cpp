#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfcm/checkpoint.hpp"
#include "cfcm/gradcheck.hpp"
#include "cfcm/loss.hpp"
#include "cfcm/train.hpp"

using namespace cfcm;

namespace {

ModelConfig tiny_config(std::int64_t classes = 1) {
  ModelConfig mc;
  mc.depth = 18;
  mc.width_mult = 0.125;
  mc.in_channels = classes == 3 ? 3 : 1;
  mc.num_classes = classes;
  mc.hidden_channels = 4;
  mc.decoder = DecoderKind::kCfcm;
  return mc;
}

Dataset blob_dataset(std::int64_t count, std::int64_t size, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.count = count;
  cfg.image_size = size;
  cfg.num_classes = 1;
  cfg.seed = seed;
  cfg.folds = 2;
  return generate_synthetic(cfg);
}

std::vector<std::int64_t> all_indices(const Dataset& d) {
  std::vector<std::int64_t> ids(d.samples.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
  return ids;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("dice loss on exact predictions is epsilon-limited") {
  Tensor4<float> logits({1, 1, 4, 4}, -40.0f);
  LabelBatch labels(1, 4, 4);
  labels.at(0, 1, 1) = 1;
  labels.at(0, 1, 2) = 1;
  labels.at(0, 2, 1) = 1;
  labels.at(0, 2, 2) = 1;
  for (std::int64_t y = 0; y < 4; ++y)
    for (std::int64_t x = 0; x < 4; ++x)
      if (labels.at(0, y, x)) logits.at_mut(0, 0, y, x) = 40.0f;

  CHECK(soft_dice_loss(logits, labels, 1e-7).item() < 1e-6f);
}

TEST_CASE("dice loss on hard half-overlap is 0.5") {
  // p = [1,1,0,0], g = [1,0,1,0] -> d = 2*1 / (2 + 2) = 0.5.
  Tensor4<float> logits = Tensor4<float>::from_data({1, 1, 2, 2}, {40.0f, 40.0f, -40.0f, -40.0f});
  LabelBatch labels(1, 2, 2);
  labels.at(0, 0, 0) = 1;
  labels.at(0, 1, 0) = 1;
  CHECK(soft_dice_loss(logits, labels, 1e-7).item() == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("dice loss on an all-background prediction is 1") {
  Tensor4<float> logits({1, 1, 4, 4}, -40.0f);
  LabelBatch labels(1, 4, 4);
  labels.at(0, 0, 0) = 1;
  CHECK(soft_dice_loss(logits, labels, 1e-7).item() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("dice loss rejects out-of-range labels") {
  Tensor4<float> logits({1, 1, 2, 2}, 0.0f);
  LabelBatch bad(1, 2, 2);
  bad.at(0, 0, 0) = 2;
  CHECK_THROWS_AS(soft_dice_loss(logits, bad, 1e-7), InvalidArgument);

  Tensor4<float> multi({1, 3, 2, 2}, 0.0f);
  LabelBatch bad3(1, 2, 2);
  bad3.at(0, 0, 0) = 3;
  CHECK_THROWS_AS(soft_dice_loss(multi, bad3, 1e-7), InvalidArgument);
}

TEST_CASE("dice loss stays in [0, 1]") {
  Rng rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t classes = rng.uniform_int(0, 1) ? 1 : 3;
    Tensor4<float> logits = Tensor4<float>::randn({2, classes, 8, 8}, rng, 3.0);
    LabelBatch labels(2, 8, 8);
    for (auto& v : labels.v)
      v = static_cast<std::uint8_t>(rng.uniform_int(0, classes == 1 ? 1 : 2));
    const float loss = soft_dice_loss(logits, labels, 1e-7).item();
    CHECK(loss >= 0.0f);
    CHECK(loss <= 1.0f + 1e-6f);
  }
}

TEST_CASE("dice loss gradient vs finite differences on (1,2,8,8)") {
  Rng rng(72);
  auto logits = Tensor4<double>::randn({1, 2, 8, 8}, rng);
  logits.set_requires_grad(true);
  LabelBatch labels(1, 8, 8);
  for (auto& v : labels.v) v = rng.uniform() < 0.4 ? 1 : 0;
  const double err = finite_diff_check(
      {&logits}, [&](Tape<double>* t) { return soft_dice_loss(logits, labels, 1e-7, t); }, 1e-4,
      128, rng);
  CHECK(err < 1e-4);
}

TEST_CASE("dice loss is bit-invariant under pixel permutation") {
  Rng rng(73);
  for (const std::int64_t classes : {std::int64_t(1), std::int64_t(3)}) {
    auto logits = Tensor4<float>::randn({1, classes, 8, 8}, rng, 2.0);
    LabelBatch labels(1, 8, 8);
    for (auto& v : labels.v)
      v = static_cast<std::uint8_t>(rng.uniform_int(0, classes == 1 ? 1 : 2));

    std::vector<std::int64_t> perm(64);
    for (std::int64_t i = 0; i < 64; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);

    auto shuffled_logits = Tensor4<float>(logits.shape());
    LabelBatch shuffled_labels(1, 8, 8);
    for (std::int64_t i = 0; i < 64; ++i) {
      const std::int64_t j = perm[static_cast<std::size_t>(i)];
      for (std::int64_t c = 0; c < classes; ++c) {
        shuffled_logits.at_mut(0, c, i / 8, i % 8) = logits.at(0, c, j / 8, j % 8);
      }
      shuffled_labels.at(0, i / 8, i % 8) = labels.at(0, j / 8, j % 8);
    }

    const float a = soft_dice_loss(logits, labels, 1e-7).item();
    const float b = soft_dice_loss(shuffled_logits, shuffled_labels, 1e-7).item();
    CHECK(a == b);
  }
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  Rng rng(74);
  auto x = Tensor4<float>::randn({1, 1, 3, 3}, rng);
  x.set_requires_grad(true);
  const auto before = std::vector<float>(x.data().begin(), x.data().end());

  std::vector<ParamRef<float>> params = {{"x", &x}};
  AdamState<float> state = make_adam_state(params);
  Tape<float> tape;
  auto loss = reduce_sum(mul(x, Tensor4<float>::zeros(x.shape()), &tape), &tape);
  tape.backward(loss);
  adam_step(params, tape, state, 0.1);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(x.data()[i] == before[i]);
}

TEST_CASE("adam steady-state step size approaches lr under constant gradients") {
  auto x = Tensor4<double>({1, 1, 1, 1}, 0.0);
  x.set_requires_grad(true);
  std::vector<ParamRef<double>> params = {{"x", &x}};
  AdamState<double> state = make_adam_state(params);

  double prev = x.item();
  double step = 0.0;
  for (int i = 0; i < 200; ++i) {
    Tape<double> tape;
    auto loss = reduce_sum(x, &tape);  // gradient is exactly 1 forever
    tape.backward(loss);
    adam_step(params, tape, state, 0.01);
    step = prev - x.item();
    prev = x.item();
  }
  CHECK(step == doctest::Approx(0.01).epsilon(0.02));
}

TEST_CASE("adam drives a scalar quadratic to zero and tracks the oracle") {
  auto w = Tensor4<double>({1, 1, 1, 1}, 1.0);
  w.set_requires_grad(true);
  std::vector<ParamRef<double>> params = {{"w", &w}};
  AdamState<double> state = make_adam_state(params);

  // Independent scalar Adam simulation.
  double ow = 1.0, om = 0.0, ov = 0.0;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  for (int step = 1; step <= 500; ++step) {
    Tape<double> tape;
    auto loss = reduce_sum(mul(w, w, &tape), &tape);
    tape.backward(loss);
    adam_step(params, tape, state, lr);

    const double g = 2.0 * ow;
    om = b1 * om + (1 - b1) * g;
    ov = b2 * ov + (1 - b2) * g * g;
    ow -= lr * (om / (1 - std::pow(b1, step))) / (std::sqrt(ov / (1 - std::pow(b2, step))) + eps);
    CHECK(w.item() == doctest::Approx(ow).epsilon(1e-9));
  }
  CHECK(std::abs(w.item()) < 0.01);
}

TEST_CASE("adam reports missing gradients by name") {
  Rng rng(75);
  auto x = Tensor4<float>::randn({1, 1, 2, 2}, rng);
  auto y = Tensor4<float>::randn({1, 1, 2, 2}, rng);
  x.set_requires_grad(true);
  y.set_requires_grad(true);
  std::vector<ParamRef<float>> params = {{"x", &x}, {"unused_param", &y}};
  AdamState<float> state = make_adam_state(params);

  Tape<float> tape;
  auto loss = reduce_sum(x, &tape);
  tape.backward(loss);
  CHECK_THROWS_WITH_AS(adam_step(params, tape, state, 0.1),
                       doctest::Contains("unused_param"), InvalidArgument);
}

TEST_CASE("train_epoch is deterministic and honors lr=0") {
  const Dataset data = blob_dataset(32, 32, 91);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 7;

  auto run = [&](double lr) {
    auto model = build_model<float>(tiny_config(), 7u);
    AdamState<float> opt = make_adam_state(model.parameters());
    TrainConfig c = cfg;
    c.learning_rate = lr;
    std::vector<double> losses;
    for (int epoch = 0; epoch < 2; ++epoch) {
      losses.push_back(train_epoch(model, data, all_indices(data), c, opt, epoch).mean_loss);
    }
    return losses;
  };

  const auto a = run(1e-3);
  const auto b = run(1e-3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // lr = 0 leaves every parameter untouched.
  auto model = build_model<float>(tiny_config(), 7u);
  std::vector<std::vector<float>> before;
  for (auto& p : model.parameters())
    before.emplace_back(p.tensor->data().begin(), p.tensor->data().end());
  AdamState<float> opt = make_adam_state(model.parameters());
  TrainConfig zero = cfg;
  zero.learning_rate = 0.0;
  // learning_rate = 0 is rejected by the config schema but legal here to
  // probe the optimizer contract.
  train_epoch(model, data, all_indices(data), zero, opt, 0);
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto now = params[i].tensor->data();
    for (std::size_t j = 0; j < now.size(); ++j) CHECK(now[j] == before[i][j]);
  }
}

TEST_CASE("train_epoch drops partial batches and rejects undersized datasets") {
  const Dataset data = blob_dataset(20, 32, 92);
  auto model = build_model<float>(tiny_config(), 7u);
  AdamState<float> opt = make_adam_state(model.parameters());
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;

  std::ostringstream log;
  train_epoch(model, data, all_indices(data), cfg, opt, 0, &log);
  // 20 samples, batch 16 -> exactly one step logged.
  CHECK(log.str().rfind("0,0,", 0) == 0);
  std::size_t lines = 0;
  for (const char ch : log.str()) lines += ch == '\n';
  CHECK(lines == 1);

  const Dataset small = blob_dataset(8, 32, 93);
  CHECK_THROWS_AS(train_epoch(model, small, all_indices(small), cfg, opt, 0), ConfigError);
}

TEST_CASE("mean loss decreases over the first epochs of a tiny run") {
  const Dataset data = blob_dataset(64, 32, 94);
  auto model = build_model<float>(tiny_config(), 7u);
  AdamState<float> opt = make_adam_state(model.parameters());
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;
  cfg.seed = 7;

  std::vector<double> losses;
  for (int epoch = 0; epoch < 5; ++epoch) {
    losses.push_back(train_epoch(model, data, all_indices(data), cfg, opt, epoch).mean_loss);
  }
  for (std::size_t i = 0; i + 1 < losses.size(); ++i) {
    CHECK(losses[i + 1] < losses[i]);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  auto model = build_model<float>(tiny_config(), 97u);
  const std::string path = temp_path("cfcm_test_roundtrip.cfcm");
  save_checkpoint(path, model, nullptr, "depth = 18\n");

  auto reloaded = build_model<float>(tiny_config(), 1234u);  // different init
  load_into(reloaded, read_checkpoint(path));

  auto pa = model.parameters();
  auto pb = reloaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto da = pa[i].tensor->data();
    const auto db = pb[i].tensor->data();
    for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint parse failures are structured") {
  const std::string path = temp_path("cfcm_test_corrupt.cfcm");
  {
    std::ofstream out(path, std::ios::binary);
    out << "CFCMxx";
  }
  CHECK_THROWS_AS(read_checkpoint(path), ParseError);

  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(read_checkpoint(path), ParseError);

  auto model = build_model<float>(tiny_config(), 98u);
  save_checkpoint(path, model, nullptr, "");
  // Truncate the payload.
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CHECK_THROWS_AS(read_checkpoint(path), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("loading into a mismatched model names the offending tensor") {
  auto model = build_model<float>(tiny_config(), 99u);
  const std::string path = temp_path("cfcm_test_mismatch.cfcm");
  save_checkpoint(path, model, nullptr, "");

  auto wider = tiny_config();
  wider.width_mult = 0.25;
  auto other = build_model<float>(wider, 99u);
  CHECK_THROWS_WITH_AS(load_into(other, read_checkpoint(path)),
                       doctest::Contains("encoder.stem.weight"), InvalidArgument);
  std::filesystem::remove(path);
}

TEST_CASE("optimizer state rides along in checkpoints when requested") {
  auto model = build_model<float>(tiny_config(), 100u);
  auto params = model.parameters();
  AdamState<float> opt = make_adam_state(params);
  opt.step = 3;
  const std::string path = temp_path("cfcm_test_opt.cfcm");
  save_checkpoint(path, model, &opt, "");
  const auto data = read_checkpoint(path);
  bool found_step = false;
  std::size_t moments = 0;
  for (const auto& [name, tensor] : data.tensors) {
    if (name == "optim.step") {
      found_step = true;
      CHECK(tensor.item() == 3.0f);
    }
    moments += name.rfind("optim.m.", 0) == 0;
  }
  CHECK(found_step);
  CHECK(moments == params.size());
  std::filesystem::remove(path);
}
