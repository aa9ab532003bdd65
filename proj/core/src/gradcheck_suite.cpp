#include "cfcm/gradcheck_suite.hpp"

#include <chrono>
#include <functional>

#include "cfcm/conv_lstm.hpp"
#include "cfcm/errors.hpp"
#include "cfcm/gradcheck.hpp"
#include "cfcm/loss.hpp"
#include "cfcm/model.hpp"

namespace cfcm {

namespace {

using D = double;
using TensorD = Tensor4<D>;

TensorD rand_tensor(Shape4 shape, Rng& rng, double scale = 1.0) {
  return TensorD::randn(shape, rng, scale);
}

// Weighted sum turns linear ops into non-trivial gradient targets.
TensorD weighted_sum(const TensorD& x, const TensorD& weights, Tape<D>* tape) {
  return reduce_sum(mul(x, weights, tape), tape);
}

double check_conv(Rng& rng) {
  TensorD x = rand_tensor({1, 2, 5, 5}, rng);
  TensorD w = rand_tensor({3, 2, 3, 3}, rng, 0.5);
  TensorD b = rand_tensor({1, 3, 1, 1}, rng, 0.1);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  const TensorD r1 = rand_tensor({1, 3, 5, 5}, rng);
  const TensorD r2 = rand_tensor({1, 3, 3, 3}, rng);

  double worst = 0.0;
  worst = std::max(worst, finite_diff_check(
                              {&x, &w, &b},
                              [&](Tape<D>* t) {
                                return weighted_sum(conv2d(x, w, &b, 1, 1, t), r1, t);
                              },
                              1e-4, 64, rng));
  worst = std::max(worst, finite_diff_check(
                              {&x, &w, &b},
                              [&](Tape<D>* t) {
                                return weighted_sum(conv2d(x, w, &b, 2, 1, t), r2, t);
                              },
                              1e-4, 64, rng));
  return worst;
}

double check_pool(Rng& rng) {
  TensorD x({1, 2, 6, 6});
  // Keep a clear margin between window max and runner-up so the finite
  // difference does not cross an argmax switch.
  for (bool ok = false; !ok;) {
    x = rand_tensor({1, 2, 6, 6}, rng);
    ok = true;
    const auto& s = x.shape();
    for (std::int64_t c = 0; c < s.c && ok; ++c)
      for (std::int64_t oy = 0; oy < s.h / 2 && ok; ++oy)
        for (std::int64_t ox = 0; ox < s.w / 2 && ok; ++ox) {
          double top = -1e30, second = -1e30;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double v = x.at(0, c, 2 * oy + dy, 2 * ox + dx);
              if (v > top) {
                second = top;
                top = v;
              } else {
                second = std::max(second, v);
              }
            }
          ok = top - second > 1e-2;
        }
  }
  x.set_requires_grad(true);
  const TensorD r = rand_tensor({1, 2, 3, 3}, rng);
  return finite_diff_check(
      {&x}, [&](Tape<D>* t) { return weighted_sum(max_pool2(x, t), r, t); }, 1e-4, 72, rng);
}

double check_upsample(Rng& rng) {
  TensorD x = rand_tensor({1, 2, 3, 3}, rng);
  x.set_requires_grad(true);
  double worst = 0.0;
  for (const auto mode : {UpsampleMode::kNearest, UpsampleMode::kBilinear}) {
    for (const std::int64_t factor : {std::int64_t(2), std::int64_t(4)}) {
      const TensorD r = rand_tensor({1, 2, 3 * factor, 3 * factor}, rng);
      worst = std::max(worst, finite_diff_check(
                                  {&x},
                                  [&](Tape<D>* t) {
                                    return weighted_sum(upsample(x, factor, mode, t), r, t);
                                  },
                                  1e-4, 18, rng));
    }
  }
  return worst;
}

double check_batchnorm(Rng& rng) {
  TensorD x = rand_tensor({4, 3, 5, 5}, rng);
  x.set_requires_grad(true);
  NormLayer<D> norm = make_norm_layer<D>(3);
  {
    auto g = norm.gamma.mutable_data();
    auto b = norm.beta.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = 0.5 + 0.5 * rng.uniform();
      b[i] = rng.normal() * 0.3;
    }
  }
  const TensorD r = rand_tensor({4, 3, 5, 5}, rng);
  return finite_diff_check(
      {&x, &norm.gamma, &norm.beta},
      [&](Tape<D>* t) { return weighted_sum(batchnorm_forward(x, norm, Mode::kTrain, t), r, t); },
      1e-4, 64, rng);
}

double check_convlstm(Rng& rng) {
  SeedStream seeds(rng.next_u64());
  ConvLSTMCell<D> cell = make_conv_lstm_cell<D>(2, 3, seeds);
  TensorD x = rand_tensor({1, 2, 4, 4}, rng);
  LSTMState<D> state{rand_tensor({1, 3, 4, 4}, rng, 0.5), rand_tensor({1, 3, 4, 4}, rng, 0.5)};
  x.set_requires_grad(true);
  state.hidden.set_requires_grad(true);
  state.cell.set_requires_grad(true);
  const TensorD r = rand_tensor({1, 3, 4, 4}, rng);
  return finite_diff_check(
      {&cell.gates.weight, &*cell.gates.bias, &x, &state.hidden, &state.cell},
      [&](Tape<D>* t) { return weighted_sum(cell_step(cell, x, state, t).hidden, r, t); }, 1e-4,
      48, rng);
}

double check_dice(Rng& rng) {
  double worst = 0.0;
  {
    TensorD logits = rand_tensor({1, 1, 8, 8}, rng);
    logits.set_requires_grad(true);
    LabelBatch labels(1, 8, 8);
    for (auto& v : labels.v) v = rng.uniform() < 0.4 ? 1 : 0;
    worst = std::max(worst, finite_diff_check(
                                {&logits},
                                [&](Tape<D>* t) { return soft_dice_loss(logits, labels, 1e-7, t); },
                                1e-4, 64, rng));
  }
  {
    TensorD logits = rand_tensor({1, 2, 8, 8}, rng);
    logits.set_requires_grad(true);
    LabelBatch labels(1, 8, 8);
    for (auto& v : labels.v) v = rng.uniform() < 0.4 ? 1 : 0;
    worst = std::max(worst, finite_diff_check(
                                {&logits},
                                [&](Tape<D>* t) { return soft_dice_loss(logits, labels, 1e-7, t); },
                                1e-4, 64, rng));
  }
  return worst;
}

double check_pointwise(Rng& rng) {
  double worst = 0.0;
  {
    TensorD x = rand_tensor({1, 2, 4, 4}, rng);
    TensorD y = rand_tensor({1, 2, 4, 4}, rng);
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    worst = std::max(worst, finite_diff_check(
                                {&x, &y},
                                [&](Tape<D>* t) { return reduce_sum(mul(x, y, t), t); }, 1e-4, 32,
                                rng));
    worst = std::max(worst, finite_diff_check(
                                {&x, &y},
                                [&](Tape<D>* t) {
                                  return reduce_mean(mul(add(x, y, t), tanh(x, t), t), t);
                                },
                                1e-4, 32, rng));
  }
  {
    // conv + sigmoid chain.
    TensorD x = rand_tensor({1, 2, 5, 5}, rng);
    TensorD w = rand_tensor({2, 2, 3, 3}, rng, 0.5);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    const TensorD r = rand_tensor({1, 2, 5, 5}, rng);
    worst = std::max(worst, finite_diff_check(
                                {&x, &w},
                                [&](Tape<D>* t) {
                                  return weighted_sum(
                                      sigmoid(conv2d<D>(x, w, nullptr, 1, 1, t), t), r, t);
                                },
                                1e-4, 48, rng));
  }
  return worst;
}

double check_relu(Rng& rng) {
  // Coordinates stay away from the kink at zero.
  TensorD x({1, 2, 4, 4});
  {
    auto xd = x.mutable_data();
    for (auto& v : xd) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
  }
  x.set_requires_grad(true);
  const TensorD r = rand_tensor({1, 2, 4, 4}, rng);
  return finite_diff_check(
      {&x}, [&](Tape<D>* t) { return weighted_sum(relu(x, t), r, t); }, 1e-4, 32, rng);
}

double check_concat_slice(Rng& rng) {
  TensorD a = rand_tensor({1, 2, 3, 3}, rng);
  TensorD b = rand_tensor({1, 3, 3, 3}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  const TensorD r = rand_tensor({1, 2, 3, 3}, rng);
  return finite_diff_check(
      {&a, &b},
      [&](Tape<D>* t) {
        return weighted_sum(slice_channels(concat_channels(a, b, t), 1, 2, t), r, t);
      },
      1e-4, 45, rng);
}

double check_e2e(Rng& rng) {
  ModelConfig mc;
  mc.depth = 18;
  mc.width_mult = 0.125;
  mc.in_channels = 1;
  mc.num_classes = 1;
  mc.hidden_channels = 4;
  mc.decoder = DecoderKind::kCfcm;
  SegModel<D> model = build_model<D>(mc, 31u);

  TensorD x = rand_tensor({1, 1, 64, 64}, rng, 0.5);
  LabelBatch labels(1, 64, 64);
  for (std::int64_t y = 0; y < 64; ++y)
    for (std::int64_t xx = 0; xx < 64; ++xx)
      labels.at(0, y, xx) = ((y - 30) * (y - 30) + (xx - 34) * (xx - 34) < 220) ? 1 : 0;

  std::vector<TensorD*> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);

  return finite_diff_check(
      params,
      [&](Tape<D>* t) {
        return soft_dice_loss(model.forward(x, Mode::kTrain, t), labels, 1e-7, t);
      },
      1e-4, 2, rng);
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(const std::string& only) {
  struct Entry {
    const char* name;
    double threshold;
    std::function<double(Rng&)> run;
  };
  const std::vector<Entry> entries = {
      {"conv2d", 1e-4, check_conv},
      {"max_pool2", 1e-4, check_pool},
      {"upsample", 1e-4, check_upsample},
      {"batchnorm", 1e-4, check_batchnorm},
      {"convlstm", 1e-4, check_convlstm},
      {"dice", 1e-4, check_dice},
      {"pointwise", 1e-4, check_pointwise},
      {"relu", 1e-4, check_relu},
      {"concat_slice", 1e-4, check_concat_slice},
      {"e2e_cfcm18", 1e-3, check_e2e},
  };

  std::vector<GradCheckCase> results;
  for (const auto& entry : entries) {
    if (!only.empty() && std::string(entry.name).find(only) == std::string::npos) continue;
    Rng rng(0x9c0ffee1u);
    const auto start = std::chrono::steady_clock::now();
    GradCheckCase result;
    result.name = entry.name;
    result.threshold = entry.threshold;
    result.max_rel_error = entry.run(rng);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    results.push_back(std::move(result));
  }
  if (results.empty()) {
    std::string names;
    for (const auto& entry : entries) names += std::string(names.empty() ? "" : ", ") + entry.name;
    throw ConfigError("gradcheck filter '" + only + "' matches nothing; cases: " + names);
  }
  return results;
}

bool all_passed(const std::vector<GradCheckCase>& cases) {
  for (const auto& c : cases) {
    if (!c.passed()) return false;
  }
  return true;
}

}  // namespace cfcm
