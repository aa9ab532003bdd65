#include "cfcm/train.hpp"

#include <cstdio>
#include <ostream>

#include "cfcm/errors.hpp"
#include "cfcm/loss.hpp"
#include "cfcm/metrics.hpp"
#include "cfcm/rng.hpp"

namespace cfcm {

namespace {

// Stacks dataset samples into one batch tensor and label batch.
void assemble_batch(const Dataset& dataset, const std::vector<std::int64_t>& order,
                    std::size_t first, std::int64_t batch_size, Tensor4<float>& x,
                    LabelBatch& labels) {
  const auto& shape = dataset.samples.front().image.shape();
  x = Tensor4<float>({batch_size, shape.c, shape.h, shape.w});
  labels = LabelBatch(batch_size, shape.h, shape.w);
  auto xd = x.mutable_data();
  const std::int64_t sample_len = shape.c * shape.h * shape.w;
  for (std::int64_t b = 0; b < batch_size; ++b) {
    const auto& sample = dataset.samples[static_cast<std::size_t>(order[first + b])];
    const auto src = sample.image.data();
    std::copy(src.begin(), src.end(), xd.begin() + b * sample_len);
    std::copy(sample.mask.v.begin(), sample.mask.v.end(),
              labels.v.begin() + b * shape.h * shape.w);
  }
}

// Hard dice of a batch of logits, averaged over samples.
double batch_dice(const Tensor4<float>& logits, const LabelBatch& labels, int num_classes) {
  const auto& s = logits.shape();
  double acc = 0.0;
  for (std::int64_t n = 0; n < s.n; ++n) {
    LabelImage pred(s.h, s.w);
    if (s.c == 1) {
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x)
          pred.at(y, x) = logits.at(n, 0, y, x) > 0.0f ? 1 : 0;
    } else {
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) {
          std::uint8_t best = 0;
          float bv = logits.at(n, 0, y, x);
          for (std::int64_t c = 1; c < s.c; ++c) {
            const float v = logits.at(n, c, y, x);
            if (v > bv) {
              bv = v;
              best = static_cast<std::uint8_t>(c);
            }
          }
          pred.at(y, x) = best;
        }
    }
    acc += mean_foreground_dice(pred, labels.slice(n), num_classes);
  }
  return acc / static_cast<double>(s.n);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

EpochStats train_epoch(SegModel<float>& model, const Dataset& dataset,
                       const std::vector<std::int64_t>& train_indices, const TrainConfig& cfg,
                       AdamState<float>& optimizer, std::int64_t epoch, std::ostream* log) {
  if (static_cast<std::int64_t>(train_indices.size()) < cfg.batch_size) {
    throw ConfigError("training set of " + std::to_string(train_indices.size()) +
                      " samples is smaller than one batch of " + std::to_string(cfg.batch_size));
  }

  std::vector<std::int64_t> order = train_indices;
  Rng shuffle_rng(mix_seed(mix_seed(cfg.seed, 0x5u), static_cast<std::uint64_t>(epoch)));
  shuffle_rng.shuffle(order);

  auto params = model.parameters();
  const std::int64_t steps = static_cast<std::int64_t>(order.size()) / cfg.batch_size;

  EpochStats stats;
  Tensor4<float> x;
  LabelBatch labels;
  for (std::int64_t step = 0; step < steps; ++step) {
    assemble_batch(dataset, order, static_cast<std::size_t>(step * cfg.batch_size),
                   cfg.batch_size, x, labels);

    Tape<float> tape;
    Tensor4<float> logits = model.forward(x, Mode::kTrain, &tape);
    Tensor4<float> loss = soft_dice_loss(logits, labels, cfg.dice_eps, &tape);
    tape.backward(loss);
    adam_step(params, tape, optimizer, cfg.learning_rate);

    const double loss_value = loss.item();
    const double dice = batch_dice(logits, labels, static_cast<int>(cfg.num_classes));
    stats.mean_loss += loss_value;
    stats.mean_dice += dice;
    if (log) {
      (*log) << epoch << ',' << step << ',' << fmt(loss_value) << ',' << fmt(dice) << '\n';
    }
  }
  stats.mean_loss /= static_cast<double>(steps);
  stats.mean_dice /= static_cast<double>(steps);
  return stats;
}

double validation_dice(SegModel<float>& model, const Dataset& dataset,
                       const std::vector<std::int64_t>& indices, int num_classes) {
  if (indices.empty()) return 0.0;
  double acc = 0.0;
  for (const auto idx : indices) {
    const Sample& sample = dataset.samples[static_cast<std::size_t>(idx)];
    acc += mean_foreground_dice(predict_labels(model, sample.image), sample.mask, num_classes);
  }
  return acc / static_cast<double>(indices.size());
}

TrainResult train_model(SegModel<float>& model, const Dataset& dataset,
                        const std::vector<std::int64_t>& train_indices,
                        const std::vector<std::int64_t>& val_indices, const TrainConfig& cfg,
                        std::ostream* log) {
  TrainResult result;
  AdamState<float> optimizer = make_adam_state(model.parameters());
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    result.epochs.push_back(train_epoch(model, dataset, train_indices, cfg, optimizer, epoch, log));
    if (!val_indices.empty()) {
      const double dice =
          validation_dice(model, dataset, val_indices, static_cast<int>(cfg.num_classes));
      result.val_dice.push_back(dice);
      result.best_val_dice = std::max(result.best_val_dice, dice);
      result.final_val_dice = dice;
    }
  }
  return result;
}

}  // namespace cfcm
