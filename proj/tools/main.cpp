#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cfcm/checkpoint.hpp"
#include "cfcm/config.hpp"
#include "cfcm/data.hpp"
#include "cfcm/errors.hpp"
#include "cfcm/gradcheck_suite.hpp"
#include "cfcm/metrics.hpp"
#include "cfcm/train.hpp"

namespace fs = std::filesystem;
using namespace cfcm;

namespace {

// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct CliState {
  RunConfig cfg;
  // Tracks which model keys were given explicitly, to detect conflicts with
  // a loaded checkpoint.
  bool depth_given = false;
  bool decoder_given = false;
  bool classes_given = false;
  bool width_given = false;
};

void add_shared_options(CLI::App* cmd, CliState& state) {
  cmd->add_option("--config", "key=value config file (applied before flags)")
      ->type_name("PATH");
  cmd->add_option_function<std::uint64_t>(
         "--seed", [&state](std::uint64_t v) { state.cfg.seed = v; }, "RNG seed");
  cmd->add_option_function<std::string>(
         "--out-dir", [&state](const std::string& v) { state.cfg.out_dir = v; },
         "output directory");
  cmd->add_option_function<std::string>(
         "--dataset", [&state](const std::string& v) { state.cfg.dataset = v; },
         "dataset directory");
}

void add_model_options(CLI::App* cmd, CliState& state) {
  cmd->add_option_function<int>(
         "--depth",
         [&state](int v) {
           state.cfg.depth = v;
           state.depth_given = true;
         },
         "encoder depth (18, 34, 50, 101)");
  cmd->add_option_function<std::string>(
         "--decoder",
         [&state](const std::string& v) {
           state.cfg.decoder = v;
           state.decoder_given = true;
         },
         "decoder kind (cfcm, skip_sum, skip_concat)");
  cmd->add_option_function<int>(
         "--classes",
         [&state](int v) {
           state.cfg.classes = v;
           state.classes_given = true;
         },
         "class count (1 or 3)");
  cmd->add_option_function<double>(
         "--width-mult",
         [&state](double v) {
           state.cfg.width_mult = v;
           state.width_given = true;
         },
         "channel width multiplier");
  cmd->add_option_function<std::int64_t>(
         "--hidden-channels",
         [&state](std::int64_t v) { state.cfg.hidden_channels = v; },
         "ConvLSTM state channels (0 = auto)");
}

std::vector<std::int64_t> fold_indices(const Dataset& dataset, int fold, bool invert) {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const bool in_fold = dataset.samples[i].fold == fold;
    if (in_fold != invert) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

int cmd_synth(const CliState& state) {
  const RunConfig& cfg = state.cfg;
  const Dataset dataset = generate_synthetic(synth_config_from(cfg));
  save_dataset(dataset, cfg.dataset_path());
  std::printf("wrote %zu samples to %s\n", dataset.samples.size(), cfg.dataset_path().c_str());
  return 0;
}

int cmd_train(const CliState& state) {
  const RunConfig& cfg = state.cfg;
  const Dataset dataset = load_dataset(cfg.dataset_path());
  if (dataset.num_classes != cfg.classes) {
    throw ConfigError("dataset has " + std::to_string(dataset.num_classes) +
                      " classes but config says " + std::to_string(cfg.classes));
  }

  SegModel<float> model = build_model<float>(model_config_from(cfg), cfg.seed);
  const auto train_ids = fold_indices(dataset, cfg.val_fold, true);
  const auto val_ids = fold_indices(dataset, cfg.val_fold, false);

  fs::create_directories(cfg.out_dir);
  const std::string log_path = (fs::path(cfg.out_dir) / "train_log.csv").string();
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw IoError("cannot open " + log_path + " for writing");
  log << "epoch,step,loss,train_dice\n";

  const TrainResult result =
      train_model(model, dataset, train_ids, val_ids, train_config_from(cfg), &log);

  save_checkpoint(cfg.checkpoint_path(), model, nullptr, serialize_config(cfg));
  std::printf("decoder=%s depth=%d best_val_dice=%.4f\n", cfg.decoder.c_str(), cfg.depth,
              result.best_val_dice);
  return 0;
}

// Rebuilds the model recorded in a checkpoint, rejecting explicit flags that
// contradict it.
SegModel<float> model_from_checkpoint(const CliState& state, const CheckpointData& data,
                                      RunConfig& effective) {
  RunConfig stored;
  std::istringstream config(data.config_text);
  std::string line;
  while (std::getline(config, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    apply_config_entry(stored, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  if (state.depth_given && state.cfg.depth != stored.depth) {
    throw ConfigError("checkpoint was trained with depth " + std::to_string(stored.depth) +
                      ", got --depth " + std::to_string(state.cfg.depth));
  }
  if (state.decoder_given && state.cfg.decoder != stored.decoder) {
    throw ConfigError("checkpoint was trained with decoder " + stored.decoder + ", got --decoder " +
                      state.cfg.decoder);
  }
  if (state.classes_given && state.cfg.classes != stored.classes) {
    throw ConfigError("checkpoint was trained with " + std::to_string(stored.classes) +
                      " classes, got --classes " + std::to_string(state.cfg.classes));
  }
  if (state.width_given && state.cfg.width_mult != stored.width_mult) {
    throw ConfigError("checkpoint width_mult differs from --width-mult");
  }

  effective.depth = stored.depth;
  effective.decoder = stored.decoder;
  effective.classes = stored.classes;
  effective.width_mult = stored.width_mult;
  effective.hidden_channels = stored.hidden_channels;
  effective.state_upsample = stored.state_upsample;
  effective.image_size = stored.image_size;

  SegModel<float> model = build_model<float>(model_config_from(effective), stored.seed);
  load_into(model, data);
  return model;
}

int cmd_eval(const CliState& state, int folds_requested) {
  RunConfig cfg = state.cfg;
  if (!fs::exists(cfg.checkpoint_path())) {
    throw ConfigError("checkpoint file not found: " + cfg.checkpoint_path());
  }
  const CheckpointData data = read_checkpoint(cfg.checkpoint_path());
  SegModel<float> model = model_from_checkpoint(state, data, cfg);
  const Dataset dataset = load_dataset(cfg.dataset_path());
  if (dataset.num_classes != cfg.classes) {
    throw ConfigError("dataset classes do not match the checkpoint");
  }

  fs::create_directories(fs::path(cfg.report_path()).parent_path().string().empty()
                             ? "."
                             : fs::path(cfg.report_path()).parent_path().string());

  if (folds_requested > 0) {
    // Per-fold aggregates of the same model, one report per fold.
    for (int fold = 0; fold < folds_requested; ++fold) {
      const auto ids = fold_indices(dataset, fold, false);
      if (ids.empty()) {
        throw ConfigError("dataset has no samples in fold " + std::to_string(fold));
      }
      const MetricReport report = evaluate_samples(model, dataset, ids, cfg.classes);
      const fs::path base(cfg.report_path());
      fs::path per_fold = base.parent_path() / (base.stem().string() + "_fold" +
                                                std::to_string(fold) + base.extension().string());
      write_metric_csv(report, per_fold.string());
      for (const auto& [cls, agg] : report.per_class) {
        std::printf("fold=%d class=%d dice=%.4f±%.4f\n", fold, cls, agg.dice.mean,
                    agg.dice.stddev);
      }
    }
    return 0;
  }

  const MetricReport report = evaluate_model(model, dataset, cfg.classes);
  write_metric_csv(report, cfg.report_path());
  for (const auto& [cls, agg] : report.per_class) {
    std::printf("class=%d dice=%.4f±%.4f mad=%.3f rms=%.3f hd=%.3f\n", cls, agg.dice.mean,
                agg.dice.stddev, agg.mad.mean, agg.rms.mean, agg.hd.mean);
  }
  if (report.surface_exclusions > 0) {
    std::printf("surface distances undefined for %lld prediction/truth pairs (excluded)\n",
                static_cast<long long>(report.surface_exclusions));
  }
  return 0;
}

int cmd_predict(const CliState& state) {
  RunConfig cfg = state.cfg;
  if (cfg.image.empty()) throw ConfigError("predict requires --image");
  if (!fs::exists(cfg.checkpoint_path())) {
    throw ConfigError("checkpoint file not found: " + cfg.checkpoint_path());
  }
  const CheckpointData data = read_checkpoint(cfg.checkpoint_path());
  SegModel<float> model = model_from_checkpoint(state, data, cfg);

  const Tensor4<float> original = load_image(cfg.image);
  if (original.shape().c != model.config.in_channels) {
    throw ConfigError("image has " + std::to_string(original.shape().c) +
                      " channels, model expects " + std::to_string(model.config.in_channels));
  }
  const Tensor4<float> resized = resize_bilinear(original, cfg.image_size, cfg.image_size);
  const LabelImage pred = predict_labels(model, resized);
  const LabelImage restored = resize_nearest(pred, original.shape().h, original.shape().w);

  fs::create_directories(fs::path(cfg.mask_out_path()).parent_path().string().empty()
                             ? "."
                             : fs::path(cfg.mask_out_path()).parent_path().string());
  save_mask(restored, cfg.mask_out_path());
  std::printf("wrote %s\n", cfg.mask_out_path().c_str());
  return 0;
}

int cmd_gradcheck(const CliState& state) {
  const auto cases = run_gradcheck_suite(state.cfg.only);
  for (const auto& c : cases) {
    std::printf("%-14s max_rel_error=%.3e threshold=%.0e %s (%.2fs)\n", c.name.c_str(),
                c.max_rel_error, c.threshold, c.passed() ? "PASS" : "FAIL", c.seconds);
  }
  return all_passed(cases) ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine context memory segmentation"};
  app.require_subcommand(1);

  CliState state;

  // The config file must apply before flag overrides bind, so scan for it
  // up front.
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    try {
      if (arg == "--config" && i + 1 < argc) {
        load_config_file(state.cfg, argv[i + 1]);
      } else if (arg.rfind("--config=", 0) == 0) {
        load_config_file(state.cfg, arg.substr(9));
      }
    } catch (const ConfigError& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return kExitUsage;
    }
  }

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_shared_options(synth, state);
  synth->add_option_function<std::int64_t>(
      "--count", [&state](std::int64_t v) { state.cfg.count = v; }, "sample count");
  synth->add_option_function<int>(
      "--classes", [&state](int v) { state.cfg.classes = v; }, "class count (1 or 3)");
  synth->add_option_function<std::int64_t>(
      "--image-size", [&state](std::int64_t v) { state.cfg.image_size = v; },
      "square image size, multiple of 32");
  synth->add_option_function<int>(
      "--folds", [&state](int v) { state.cfg.folds = v; }, "cross-validation folds");
  synth->add_option_function<double>(
      "--noise", [&state](double v) { state.cfg.noise = v; }, "noise amplitude");

  auto* train = app.add_subcommand("train", "train a model on a dataset");
  add_shared_options(train, state);
  add_model_options(train, state);
  train->add_option_function<std::int64_t>(
      "--epochs", [&state](std::int64_t v) { state.cfg.epochs = v; }, "epoch count");
  train->add_option_function<std::int64_t>(
      "--batch-size", [&state](std::int64_t v) { state.cfg.batch_size = v; }, "batch size");
  train->add_option_function<double>(
      "--learning-rate", [&state](double v) { state.cfg.learning_rate = v; }, "Adam step size");
  train->add_option_function<int>(
      "--val-fold", [&state](int v) { state.cfg.val_fold = v; }, "held-out fold");
  train->add_option_function<std::string>(
      "--checkpoint", [&state](const std::string& v) { state.cfg.checkpoint = v; },
      "checkpoint output path");
  train->add_option_function<std::int64_t>(
      "--image-size", [&state](std::int64_t v) { state.cfg.image_size = v; },
      "model input size");

  int eval_folds = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_shared_options(eval, state);
  add_model_options(eval, state);
  eval->add_option_function<std::string>(
      "--checkpoint", [&state](const std::string& v) { state.cfg.checkpoint = v; },
      "checkpoint path");
  eval->add_option_function<std::string>(
      "--report", [&state](const std::string& v) { state.cfg.report = v; }, "report CSV path");
  eval->add_option("--folds", eval_folds, "evaluate each fold separately");

  auto* predict = app.add_subcommand("predict", "segment one image");
  add_shared_options(predict, state);
  add_model_options(predict, state);
  predict->add_option_function<std::string>(
      "--checkpoint", [&state](const std::string& v) { state.cfg.checkpoint = v; },
      "checkpoint path");
  predict->add_option_function<std::string>(
      "--image", [&state](const std::string& v) { state.cfg.image = v; }, "input image (PGM/PPM)");
  predict->add_option_function<std::string>(
      "--mask-out", [&state](const std::string& v) { state.cfg.mask_out = v; },
      "output mask path");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_shared_options(gradcheck, state);
  gradcheck->add_option_function<std::string>(
      "--only", [&state](const std::string& v) { state.cfg.only = v; }, "restrict to one case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }

  try {
    validate(state.cfg);
    if (*synth) return cmd_synth(state);
    if (*train) return cmd_train(state);
    if (*eval) return cmd_eval(state, eval_folds);
    if (*predict) return cmd_predict(state);
    if (*gradcheck) return cmd_gradcheck(state);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
