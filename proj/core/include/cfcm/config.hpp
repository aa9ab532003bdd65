#pragma once

#include <cstdint>
#include <string>

#include "cfcm/data.hpp"
#include "cfcm/model.hpp"
#include "cfcm/train.hpp"

namespace cfcm {

// Flat run configuration shared by every command. Values come from defaults,
// then a key=value config file, then command-line overrides, in that order.
struct RunConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "out";

  // synthetic corpus
  std::int64_t count = 320;
  std::int64_t image_size = 64;
  int classes = 1;  // 1 binary, 3 instrument
  std::int64_t blobs_min = 2;
  std::int64_t blobs_max = 2;
  double noise = 0.08;
  int folds = 5;

  // model
  int depth = 18;
  double width_mult = 0.125;
  std::int64_t hidden_channels = 0;  // 0 = scale the default of 32 by width_mult
  std::string decoder = "cfcm";      // cfcm | skip_sum | skip_concat
  std::string state_upsample = "bilinear";

  // training
  std::int64_t batch_size = 16;
  double learning_rate = 1e-5;
  std::int64_t epochs = 30;
  int val_fold = 0;
  double dice_eps = 1e-7;

  // paths (empty = derived from out_dir)
  std::string dataset;
  std::string checkpoint;
  std::string report;
  std::string image;
  std::string mask_out;

  // gradcheck filter
  std::string only;

  std::string dataset_path() const;
  std::string checkpoint_path() const;
  std::string report_path() const;
  std::string mask_out_path() const;
};

// Applies one key=value assignment. Unknown keys and malformed values throw
// ConfigError.
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);

// Loads a plain-text key=value file ('#' comments, blank lines allowed).
void load_config_file(RunConfig& cfg, const std::string& path);

// Cross-field validation; throws ConfigError on the first violation.
void validate(const RunConfig& cfg);

// Canonical key=value serialization (fixed key order). Embedded into
// checkpoints and logs so a run can be reproduced from its artifacts.
std::string serialize_config(const RunConfig& cfg);

DecoderKind decoder_kind_from(const std::string& name);
UpsampleMode upsample_mode_from(const std::string& name);

// Resolved channel width of the ConvLSTM state.
std::int64_t resolved_hidden_channels(const RunConfig& cfg);

ModelConfig model_config_from(const RunConfig& cfg);
SynthConfig synth_config_from(const RunConfig& cfg);
TrainConfig train_config_from(const RunConfig& cfg);

}  // namespace cfcm
