#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "cfcm/data.hpp"
#include "cfcm/model.hpp"
#include "cfcm/optim.hpp"

namespace cfcm {

struct TrainConfig {
  std::int64_t batch_size = 16;
  double learning_rate = 1e-5;
  std::int64_t epochs = 30;
  std::uint64_t seed = 7;
  std::int64_t num_classes = 1;
  double dice_eps = 1e-7;
};

struct EpochStats {
  double mean_loss = 0.0;
  double mean_dice = 0.0;  // hard dice of the argmax predictions, per batch
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::vector<double> val_dice;  // one entry per epoch; empty without a val set
  double best_val_dice = 0.0;
  double final_val_dice = 0.0;
};

// One pass over the train indices: deterministic per-(seed, epoch) shuffle,
// full batches only (a trailing partial batch is dropped), one
// forward/backward/Adam step per batch. Appends one CSV row per step to
// `log` when given: epoch,step,loss,train_dice.
EpochStats train_epoch(SegModel<float>& model, const Dataset& dataset,
                       const std::vector<std::int64_t>& train_indices, const TrainConfig& cfg,
                       AdamState<float>& optimizer, std::int64_t epoch,
                       std::ostream* log = nullptr);

// Mean foreground dice of eval-mode predictions over the given samples.
double validation_dice(SegModel<float>& model, const Dataset& dataset,
                       const std::vector<std::int64_t>& indices, int num_classes);

// Full training loop with per-epoch validation.
TrainResult train_model(SegModel<float>& model, const Dataset& dataset,
                        const std::vector<std::int64_t>& train_indices,
                        const std::vector<std::int64_t>& val_indices, const TrainConfig& cfg,
                        std::ostream* log = nullptr);

}  // namespace cfcm
