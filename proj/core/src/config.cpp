#include "cfcm/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "cfcm/errors.hpp"

namespace cfcm {

namespace {

std::int64_t parse_int(const std::string& key, const std::string& value) {
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not an integer");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not an unsigned integer");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double out = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not a number");
  }
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct SchemaEntry {
  Setter set;
  Getter get;
};

#define INT_ENTRY(field)                                                                  \
  SchemaEntry{[](RunConfig& c, const std::string& k, const std::string& v) {              \
                c.field = parse_int(k, v);                                                \
              },                                                                          \
              [](const RunConfig& c) { return std::to_string(c.field); }}
#define DOUBLE_ENTRY(field)                                                               \
  SchemaEntry{[](RunConfig& c, const std::string& k, const std::string& v) {              \
                c.field = parse_double(k, v);                                             \
              },                                                                          \
              [](const RunConfig& c) { return fmt_double(c.field); }}
#define STRING_ENTRY(field)                                                               \
  SchemaEntry{[](RunConfig& c, const std::string&, const std::string& v) { c.field = v; }, \
              [](const RunConfig& c) { return c.field; }}

// Key order here is the canonical serialization order.
const std::vector<std::pair<std::string, SchemaEntry>>& schema() {
  static const std::vector<std::pair<std::string, SchemaEntry>> entries = {
      {"seed", SchemaEntry{[](RunConfig& c, const std::string& k,
                              const std::string& v) { c.seed = parse_u64(k, v); },
                           [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"out_dir", STRING_ENTRY(out_dir)},
      {"count", INT_ENTRY(count)},
      {"image_size", INT_ENTRY(image_size)},
      {"classes", SchemaEntry{[](RunConfig& c, const std::string& k,
                                 const std::string& v) { c.classes = static_cast<int>(parse_int(k, v)); },
                              [](const RunConfig& c) { return std::to_string(c.classes); }}},
      {"blobs_min", INT_ENTRY(blobs_min)},
      {"blobs_max", INT_ENTRY(blobs_max)},
      {"noise", DOUBLE_ENTRY(noise)},
      {"folds", SchemaEntry{[](RunConfig& c, const std::string& k,
                               const std::string& v) { c.folds = static_cast<int>(parse_int(k, v)); },
                            [](const RunConfig& c) { return std::to_string(c.folds); }}},
      {"depth", SchemaEntry{[](RunConfig& c, const std::string& k,
                               const std::string& v) { c.depth = static_cast<int>(parse_int(k, v)); },
                            [](const RunConfig& c) { return std::to_string(c.depth); }}},
      {"width_mult", DOUBLE_ENTRY(width_mult)},
      {"hidden_channels", INT_ENTRY(hidden_channels)},
      {"decoder", STRING_ENTRY(decoder)},
      {"state_upsample", STRING_ENTRY(state_upsample)},
      {"batch_size", INT_ENTRY(batch_size)},
      {"learning_rate", DOUBLE_ENTRY(learning_rate)},
      {"epochs", INT_ENTRY(epochs)},
      {"val_fold", SchemaEntry{[](RunConfig& c, const std::string& k,
                                  const std::string& v) { c.val_fold = static_cast<int>(parse_int(k, v)); },
                               [](const RunConfig& c) { return std::to_string(c.val_fold); }}},
      {"dice_eps", DOUBLE_ENTRY(dice_eps)},
      {"dataset", STRING_ENTRY(dataset)},
      {"checkpoint", STRING_ENTRY(checkpoint)},
      {"report", STRING_ENTRY(report)},
      {"image", STRING_ENTRY(image)},
      {"mask_out", STRING_ENTRY(mask_out)},
      {"only", STRING_ENTRY(only)},
  };
  return entries;
}

#undef INT_ENTRY
#undef DOUBLE_ENTRY
#undef STRING_ENTRY

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

std::string RunConfig::dataset_path() const {
  return dataset.empty() ? (std::filesystem::path(out_dir) / "dataset").string() : dataset;
}
std::string RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? (std::filesystem::path(out_dir) / "checkpoint.cfcm").string()
                            : checkpoint;
}
std::string RunConfig::report_path() const {
  return report.empty() ? (std::filesystem::path(out_dir) / "report.csv").string() : report;
}
std::string RunConfig::mask_out_path() const {
  return mask_out.empty() ? (std::filesystem::path(out_dir) / "prediction.pgm").string()
                          : mask_out;
}

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, entry] : schema()) {
    if (name == key) {
      entry.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value, got '" +
                        text + "'");
    }
    apply_config_entry(cfg, trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
  }
}

void validate(const RunConfig& cfg) {
  if (cfg.classes != 1 && cfg.classes != 3) {
    throw ConfigError("classes must be 1 or 3, got " + std::to_string(cfg.classes));
  }
  if (cfg.depth != 18 && cfg.depth != 34 && cfg.depth != 50 && cfg.depth != 101) {
    throw ConfigError("depth must be one of 18, 34, 50, 101, got " + std::to_string(cfg.depth));
  }
  decoder_kind_from(cfg.decoder);
  upsample_mode_from(cfg.state_upsample);
  if (cfg.count < 1) throw ConfigError("count must be >= 1");
  if (cfg.image_size < 32 || cfg.image_size % 32 != 0) {
    throw ConfigError("image_size must be a positive multiple of 32, got " +
                      std::to_string(cfg.image_size));
  }
  if (cfg.blobs_min < 2 || cfg.blobs_max < cfg.blobs_min) {
    throw ConfigError("blob count range must satisfy 2 <= blobs_min <= blobs_max");
  }
  if (cfg.noise < 0.0) throw ConfigError("noise must be >= 0");
  if (cfg.folds < 2) throw ConfigError("folds must be >= 2");
  if (cfg.width_mult <= 0.0) throw ConfigError("width_mult must be > 0");
  if (cfg.hidden_channels < 0) throw ConfigError("hidden_channels must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.val_fold < 0 || cfg.val_fold >= cfg.folds) {
    throw ConfigError("val_fold must be in [0, folds)");
  }
  if (cfg.dice_eps <= 0.0) throw ConfigError("dice_eps must be > 0");

  // Width ladder must scale to integers for the chosen multiplier.
  try {
    for (const std::int64_t base : {64, 128, 256, 512}) {
      detail::scaled_width(base, cfg.width_mult);
    }
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& [name, entry] : schema()) out << name << " = " << entry.get(cfg) << '\n';
  return out.str();
}

DecoderKind decoder_kind_from(const std::string& name) {
  if (name == "cfcm") return DecoderKind::kCfcm;
  if (name == "skip_sum") return DecoderKind::kSkipSum;
  if (name == "skip_concat") return DecoderKind::kSkipConcat;
  throw ConfigError("decoder must be cfcm, skip_sum or skip_concat, got '" + name + "'");
}

UpsampleMode upsample_mode_from(const std::string& name) {
  if (name == "nearest") return UpsampleMode::kNearest;
  if (name == "bilinear") return UpsampleMode::kBilinear;
  throw ConfigError("state_upsample must be nearest or bilinear, got '" + name + "'");
}

std::int64_t resolved_hidden_channels(const RunConfig& cfg) {
  if (cfg.hidden_channels > 0) return cfg.hidden_channels;
  return std::max<std::int64_t>(1, std::llround(32.0 * cfg.width_mult));
}

ModelConfig model_config_from(const RunConfig& cfg) {
  ModelConfig mc;
  mc.depth = cfg.depth;
  mc.width_mult = cfg.width_mult;
  mc.in_channels = cfg.classes == 3 ? 3 : 1;
  mc.num_classes = cfg.classes;
  mc.hidden_channels = resolved_hidden_channels(cfg);
  mc.decoder = decoder_kind_from(cfg.decoder);
  mc.state_upsample = upsample_mode_from(cfg.state_upsample);
  return mc;
}

SynthConfig synth_config_from(const RunConfig& cfg) {
  SynthConfig sc;
  sc.count = cfg.count;
  sc.image_size = cfg.image_size;
  sc.num_classes = cfg.classes;
  sc.blobs_min = cfg.blobs_min;
  sc.blobs_max = cfg.blobs_max;
  sc.noise = cfg.noise;
  sc.seed = cfg.seed;
  sc.folds = cfg.folds;
  return sc;
}

TrainConfig train_config_from(const RunConfig& cfg) {
  TrainConfig tc;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.epochs = cfg.epochs;
  tc.seed = cfg.seed;
  tc.num_classes = cfg.classes;
  tc.dice_eps = cfg.dice_eps;
  return tc;
}

}  // namespace cfcm
