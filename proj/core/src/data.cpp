#include "cfcm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfcm/errors.hpp"
#include "cfcm/ops.hpp"
#include "cfcm/rng.hpp"

namespace cfcm {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Smooth low-frequency background texture: a few random cosine waves.
struct Texture {
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;

  static Texture draw(Rng& rng, double amp) {
    Texture t;
    for (int i = 0; i < 3; ++i) {
      t.waves.push_back({rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0),
                         rng.uniform(0.0, 2.0 * kPi), amp * rng.uniform(0.4, 1.0)});
    }
    return t;
  }

  double at(double u, double v) const {
    double acc = 0.0;
    for (const auto& w : waves) acc += w.amp * std::cos(2.0 * kPi * (w.fx * u + w.fy * v) + w.phase);
    return acc;
  }
};

struct Ellipse {
  double cy, cx, ry, rx, angle;

  // Normalized radial coordinate: <= 1 inside.
  double rho(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = (ca * dx + sa * dy) / rx;
    const double v = (-sa * dx + ca * dy) / ry;
    return std::sqrt(u * u + v * v);
  }
};

float quantize(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(clamped * 255.0)) / 255.0f;
}

Sample make_blob_sample(const SynthConfig& cfg, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const auto s = static_cast<double>(cfg.image_size);
  const std::int64_t size = cfg.image_size;

  const Texture texture = Texture::draw(rng, 0.06);
  const double base = rng.uniform(0.18, 0.30);

  std::vector<Ellipse> blobs;
  // Paired lung-like blobs in the left and right halves.
  blobs.push_back({rng.uniform(0.38 * s, 0.62 * s), rng.uniform(0.24 * s, 0.36 * s),
                   rng.uniform(0.16 * s, 0.24 * s), rng.uniform(0.10 * s, 0.15 * s),
                   rng.uniform(-0.3, 0.3)});
  blobs.push_back({rng.uniform(0.38 * s, 0.62 * s), rng.uniform(0.64 * s, 0.76 * s),
                   rng.uniform(0.16 * s, 0.24 * s), rng.uniform(0.10 * s, 0.15 * s),
                   rng.uniform(-0.3, 0.3)});
  const std::int64_t extra = rng.uniform_int(cfg.blobs_min, cfg.blobs_max) - 2;
  for (std::int64_t i = 0; i < extra; ++i) {
    blobs.push_back({rng.uniform(0.2 * s, 0.8 * s), rng.uniform(0.2 * s, 0.8 * s),
                     rng.uniform(0.08 * s, 0.14 * s), rng.uniform(0.06 * s, 0.12 * s),
                     rng.uniform(-kPi, kPi)});
  }

  Sample sample;
  sample.image = Tensor4<float>({1, 1, size, size});
  sample.mask = LabelImage(size, size);
  auto img = sample.image.mutable_data();

  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double yy = y + 0.5, xx = x + 0.5;
      double value = base + texture.at(xx / s, yy / s) + cfg.noise * rng.uniform(-1.0, 1.0);
      double brightest = 0.0;
      bool inside = false;
      for (const auto& blob : blobs) {
        const double rho = blob.rho(yy, xx);
        // Soft edge spanning rho in [0.92, 1.08].
        brightest = std::max(brightest, 0.55 * std::clamp((1.08 - rho) / 0.16, 0.0, 1.0));
        inside = inside || rho <= 1.0;
      }
      value += brightest;
      img[static_cast<std::size_t>(y * size + x)] = quantize(value);
      sample.mask.at(y, x) = inside ? 1 : 0;
    }
  }
  return sample;
}

Sample make_instrument_sample(const SynthConfig& cfg, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const auto s = static_cast<double>(cfg.image_size);
  const std::int64_t size = cfg.image_size;

  const Texture texture = Texture::draw(rng, 0.05);

  // Shaft enters from the border and points toward the center; the tip sits
  // at the inner end.
  const double angle = rng.uniform(0.0, 2.0 * kPi);
  const double cx = s * 0.5, cy = s * 0.5;
  const double border_r = 0.72 * s;
  const double x0 = cx + border_r * std::cos(angle);
  const double y0 = cy + border_r * std::sin(angle);
  const double len = rng.uniform(0.55 * s, 0.75 * s);
  const double jitter = rng.uniform(-0.25, 0.25);
  const double dirx = std::cos(angle + kPi + jitter);
  const double diry = std::sin(angle + kPi + jitter);
  const double x1 = std::clamp(x0 + len * dirx, 0.22 * s, 0.78 * s);
  const double y1 = std::clamp(y0 + len * diry, 0.22 * s, 0.78 * s);
  const double half_width = rng.uniform(0.030 * s, 0.045 * s);
  const double tip_r = rng.uniform(0.07 * s, 0.10 * s);

  const auto segment_dist = [&](double y, double x) {
    const double vx = x1 - x0, vy = y1 - y0;
    const double lensq = vx * vx + vy * vy;
    const double t = std::clamp(((x - x0) * vx + (y - y0) * vy) / lensq, 0.0, 1.0);
    const double px = x0 + t * vx, py = y0 + t * vy;
    return std::sqrt((x - px) * (x - px) + (y - py) * (y - py));
  };

  Sample sample;
  sample.image = Tensor4<float>({1, 3, size, size});
  sample.mask = LabelImage(size, size);
  auto img = sample.image.mutable_data();
  const std::int64_t plane = size * size;

  const double bg_r = rng.uniform(0.40, 0.55);
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double yy = y + 0.5, xx = x + 0.5;
      const double tex = texture.at(xx / s, yy / s);
      double r = bg_r + tex + cfg.noise * rng.uniform(-1.0, 1.0);
      double g = 0.45 * bg_r + tex + cfg.noise * rng.uniform(-1.0, 1.0);
      double b = 0.45 * bg_r + tex + cfg.noise * rng.uniform(-1.0, 1.0);

      const double shaft_d = segment_dist(yy, xx);
      const double tip_d = std::sqrt((xx - x1) * (xx - x1) + (yy - y1) * (yy - y1));
      std::uint8_t label = 0;
      if (shaft_d <= half_width) label = 1;
      if (tip_d <= tip_r) label = 2;

      if (label == 1) {
        const double shade = 0.62 + 0.10 * (1.0 - shaft_d / half_width);
        r = shade + cfg.noise * rng.uniform(-1.0, 1.0);
        g = shade + 0.04 + cfg.noise * rng.uniform(-1.0, 1.0);
        b = shade + 0.10 + cfg.noise * rng.uniform(-1.0, 1.0);
      } else if (label == 2) {
        r = 0.88 + cfg.noise * rng.uniform(-1.0, 1.0);
        g = 0.86 + cfg.noise * rng.uniform(-1.0, 1.0);
        b = 0.62 + cfg.noise * rng.uniform(-1.0, 1.0);
      }

      const std::size_t at = static_cast<std::size_t>(y * size + x);
      img[at] = quantize(r);
      img[static_cast<std::size_t>(plane) + at] = quantize(g);
      img[static_cast<std::size_t>(2 * plane) + at] = quantize(b);
      sample.mask.at(y, x) = label;
    }
  }
  return sample;
}

void require_class_coverage(const Sample& sample, int num_classes) {
  for (int cls = 1; cls <= (num_classes == 1 ? 1 : num_classes - 1); ++cls) {
    const auto c = static_cast<std::uint8_t>(cls);
    if (std::none_of(sample.mask.v.begin(), sample.mask.v.end(),
                     [c](std::uint8_t v) { return v == c; })) {
      throw Error("synthetic sample " + sample.id + " lacks class " + std::to_string(cls));
    }
  }
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

// Netpbm header scanner: whitespace-separated decimal tokens, '#' comments.
struct PnmHeader {
  int channels;  // 1 for P5, 3 for P6
  std::int64_t w, h, maxval;
  std::size_t payload_offset;
};

PnmHeader parse_pnm_header(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::size_t pos = 0;
  const auto fail = [&](const std::string& msg) -> ParseError {
    return ParseError(path + ": " + msg, pos);
  };
  if (bytes.size() < 2) throw fail("not a PGM/PPM file");
  if (bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw fail("expected P5 or P6 magic");
  }
  PnmHeader header{};
  header.channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;

  const auto next_token = [&]() -> std::int64_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail("expected decimal token");
    std::int64_t value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > 1 << 30) throw fail("token out of range");
      ++pos;
    }
    return value;
  };

  header.w = next_token();
  header.h = next_token();
  header.maxval = next_token();
  if (header.w < 1 || header.h < 1) throw fail("image dimensions must be >= 1");
  if (header.maxval > 255) {
    throw ParseError(path + ": unsupported depth, maxval " + std::to_string(header.maxval) +
                         " exceeds 255",
                     pos);
  }
  if (header.maxval < 1) throw fail("maxval must be >= 1");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("expected whitespace after maxval");
  ++pos;
  header.payload_offset = pos;

  const std::size_t need = static_cast<std::size_t>(header.w * header.h * header.channels);
  if (bytes.size() - pos < need) {
    throw ParseError(path + ": truncated payload, need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - pos),
                     bytes.size());
  }
  return header;
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.image_size < 32 || cfg.image_size % 32 != 0) {
    throw InvalidArgument("image_size must be a positive multiple of 32, got " +
                          std::to_string(cfg.image_size));
  }
  if (cfg.num_classes != 1 && cfg.num_classes != 3) {
    throw InvalidArgument("num_classes must be 1 or 3, got " + std::to_string(cfg.num_classes));
  }
  if (cfg.count < 1) throw InvalidArgument("count must be >= 1");
  if (cfg.blobs_min < 2 || cfg.blobs_max < cfg.blobs_min) {
    throw InvalidArgument("blob count range must satisfy 2 <= min <= max");
  }
  if (cfg.noise < 0.0) throw InvalidArgument("noise must be >= 0");
  if (cfg.folds < 2 || cfg.folds > cfg.count) {
    throw InvalidArgument("folds must be in [2, count]");
  }

  Dataset dataset;
  dataset.num_classes = cfg.num_classes;
  dataset.in_channels = cfg.num_classes == 3 ? 3 : 1;

  const auto folds = kfold_split(cfg.count, cfg.folds, cfg.seed);
  std::vector<int> fold_of(static_cast<std::size_t>(cfg.count), 0);
  for (std::size_t f = 0; f < folds.size(); ++f)
    for (const auto id : folds[f].test_ids) fold_of[static_cast<std::size_t>(id)] = static_cast<int>(f);

  for (std::int64_t i = 0; i < cfg.count; ++i) {
    Sample sample = cfg.num_classes == 1 ? make_blob_sample(cfg, mix_seed(cfg.seed, static_cast<std::uint64_t>(i)))
                                         : make_instrument_sample(cfg, mix_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%04lld", static_cast<long long>(i));
    sample.id = buf;
    sample.fold = fold_of[static_cast<std::size_t>(i)];
    sample.group = "g" + std::to_string(sample.fold);
    require_class_coverage(sample, cfg.num_classes);
    dataset.samples.push_back(std::move(sample));
  }
  return dataset;
}

Tensor4<float> load_image(const std::string& path) {
  const auto bytes = read_file(path);
  const auto header = parse_pnm_header(bytes, path);
  Tensor4<float> image({1, header.channels, header.h, header.w});
  auto dst = image.mutable_data();
  const std::uint8_t* src = bytes.data() + header.payload_offset;
  const auto maxval = static_cast<float>(header.maxval);
  const std::int64_t plane = header.h * header.w;
  if (header.channels == 1) {
    for (std::int64_t i = 0; i < plane; ++i) dst[static_cast<std::size_t>(i)] = src[i] / maxval;
  } else {
    for (std::int64_t i = 0; i < plane; ++i)
      for (std::int64_t c = 0; c < 3; ++c)
        dst[static_cast<std::size_t>(c * plane + i)] = src[3 * i + c] / maxval;
  }
  return image;
}

void save_image(const Tensor4<float>& image, const std::string& path) {
  const auto& s = image.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw InvalidArgument("save_image expects a (1,1,h,w) or (1,3,h,w) tensor, got " +
                          to_string(s));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << (s.c == 1 ? "P5" : "P6") << '\n' << s.w << ' ' << s.h << '\n' << 255 << '\n';
  const auto src = image.data();
  const std::int64_t plane = s.h * s.w;
  const auto to_byte = [](float v) {
    return static_cast<char>(std::clamp<long>(std::lround(v * 255.0f), 0, 255));
  };
  if (s.c == 1) {
    for (std::int64_t i = 0; i < plane; ++i) out.put(to_byte(src[static_cast<std::size_t>(i)]));
  } else {
    for (std::int64_t i = 0; i < plane; ++i)
      for (std::int64_t c = 0; c < 3; ++c)
        out.put(to_byte(src[static_cast<std::size_t>(c * plane + i)]));
  }
  if (!out) throw IoError("write failed for " + path);
}

LabelImage load_mask(const std::string& path) {
  const auto bytes = read_file(path);
  const auto header = parse_pnm_header(bytes, path);
  if (header.channels != 1) throw ParseError(path + ": masks must be P5", 1);
  LabelImage mask(header.h, header.w);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(header.payload_offset),
            bytes.begin() + static_cast<std::ptrdiff_t>(header.payload_offset + mask.v.size()),
            mask.v.begin());
  return mask;
}

void save_mask(const LabelImage& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "P5" << '\n' << mask.w << ' ' << mask.h << '\n' << 255 << '\n';
  out.write(reinterpret_cast<const char*>(mask.v.data()),
            static_cast<std::streamsize>(mask.v.size()));
  if (!out) throw IoError("write failed for " + path);
}

Tensor4<float> resize_bilinear(const Tensor4<float>& image, std::int64_t h, std::int64_t w) {
  const auto& s = image.shape();
  if (h < 1 || w < 1) throw InvalidArgument("resize target must be >= 1");
  if (s.h == h && s.w == w) return image;
  const auto ty = detail::bilinear_taps(s.h, h);
  const auto tx = detail::bilinear_taps(s.w, w);
  Tensor4<float> out({s.n, s.c, h, w});
  auto od = out.mutable_data();
  const float* src = image.data().data();
  for (std::int64_t p = 0; p < s.n * s.c; ++p) {
    const float* plane = src + p * s.h * s.w;
    float* dst = od.data() + p * h * w;
    for (std::int64_t y = 0; y < h; ++y) {
      const auto& ry = ty[static_cast<std::size_t>(y)];
      for (std::int64_t x = 0; x < w; ++x) {
        const auto& rx = tx[static_cast<std::size_t>(x)];
        const double v00 = plane[ry.lo * s.w + rx.lo];
        const double v01 = plane[ry.lo * s.w + rx.hi];
        const double v10 = plane[ry.hi * s.w + rx.lo];
        const double v11 = plane[ry.hi * s.w + rx.hi];
        const double top = v00 + (v01 - v00) * rx.w_hi;
        const double bot = v10 + (v11 - v10) * rx.w_hi;
        dst[y * w + x] = static_cast<float>(top + (bot - top) * ry.w_hi);
      }
    }
  }
  return out;
}

LabelImage resize_nearest(const LabelImage& mask, std::int64_t h, std::int64_t w) {
  if (h < 1 || w < 1) throw InvalidArgument("resize target must be >= 1");
  if (mask.h == h && mask.w == w) return mask;
  LabelImage out(h, w);
  for (std::int64_t y = 0; y < h; ++y) {
    const auto sy = std::min<std::int64_t>(
        mask.h - 1, static_cast<std::int64_t>((y + 0.5) * static_cast<double>(mask.h) / h));
    for (std::int64_t x = 0; x < w; ++x) {
      const auto sx = std::min<std::int64_t>(
          mask.w - 1, static_cast<std::int64_t>((x + 0.5) * static_cast<double>(mask.w) / w));
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

std::vector<FoldSplit> kfold_split(std::int64_t n, std::int64_t k, std::uint64_t seed) {
  if (k < 2) throw InvalidArgument("kfold_split: k must be >= 2");
  if (n < k) throw InvalidArgument("kfold_split: n=" + std::to_string(n) + " smaller than k=" +
                                   std::to_string(k));
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  Rng rng(mix_seed(seed, 0x6f1dU));
  rng.shuffle(ids);

  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  const std::int64_t base = n / k;
  const std::int64_t rem = n % k;
  std::int64_t cursor = 0;
  for (std::int64_t f = 0; f < k; ++f) {
    const std::int64_t size = base + (f < rem ? 1 : 0);
    auto& fold = folds[static_cast<std::size_t>(f)];
    fold.test_ids.assign(ids.begin() + cursor, ids.begin() + cursor + size);
    std::sort(fold.test_ids.begin(), fold.test_ids.end());
    cursor += size;
  }
  for (std::int64_t f = 0; f < k; ++f) {
    auto& fold = folds[static_cast<std::size_t>(f)];
    for (std::int64_t g = 0; g < k; ++g) {
      if (g == f) continue;
      const auto& other = folds[static_cast<std::size_t>(g)].test_ids;
      fold.train_ids.insert(fold.train_ids.end(), other.begin(), other.end());
    }
    std::sort(fold.train_ids.begin(), fold.train_ids.end());
  }
  return folds;
}

std::vector<FoldSplit> group_split(const std::vector<std::string>& groups) {
  if (groups.empty()) throw InvalidArgument("group_split: empty group list");
  std::vector<std::string> order;
  for (const auto& g : groups) {
    if (std::find(order.begin(), order.end(), g) == order.end()) order.push_back(g);
  }
  if (order.size() < 2) throw InvalidArgument("group_split: need at least two distinct groups");

  std::vector<FoldSplit> folds(order.size());
  for (std::size_t f = 0; f < order.size(); ++f) {
    for (std::size_t i = 0; i < groups.size(); ++i) {
      auto& fold = folds[f];
      (groups[i] == order[f] ? fold.test_ids : fold.train_ids)
          .push_back(static_cast<std::int64_t>(i));
    }
  }
  return folds;
}

void save_dataset(const Dataset& dataset, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  const std::string ext = dataset.in_channels == 3 ? ".ppm" : ".pgm";
  std::ofstream manifest(fs::path(dir) / "manifest.csv", std::ios::binary);
  if (!manifest) throw IoError("cannot write manifest in " + dir);
  manifest << "id,fold,group\n";
  for (const auto& sample : dataset.samples) {
    save_image(sample.image, (fs::path(dir) / "images" / (sample.id + ext)).string());
    save_mask(sample.mask, (fs::path(dir) / "masks" / (sample.id + ".pgm")).string());
    manifest << sample.id << ',' << sample.fold << ',' << sample.group << '\n';
  }
  if (!manifest) throw IoError("write failed for manifest in " + dir);
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw IoError("cannot open manifest.csv in " + dir);
  std::string line;
  if (!std::getline(manifest, line) || line != "id,fold,group") {
    throw ParseError(dir + "/manifest.csv: expected header id,fold,group", 0);
  }

  Dataset dataset;
  std::uint8_t max_label = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    Sample sample;
    std::string fold_text;
    if (!std::getline(row, sample.id, ',') || !std::getline(row, fold_text, ',') ||
        !std::getline(row, sample.group)) {
      throw ParseError(dir + "/manifest.csv: malformed row '" + line + "'", 0);
    }
    sample.fold = std::stoi(fold_text);

    const fs::path pgm = fs::path(dir) / "images" / (sample.id + ".pgm");
    const fs::path ppm = fs::path(dir) / "images" / (sample.id + ".ppm");
    sample.image = load_image(fs::exists(pgm) ? pgm.string() : ppm.string());
    sample.mask = load_mask((fs::path(dir) / "masks" / (sample.id + ".pgm")).string());
    for (const auto v : sample.mask.v) max_label = std::max(max_label, v);
    dataset.samples.push_back(std::move(sample));
  }
  if (dataset.samples.empty()) throw ParseError(dir + "/manifest.csv: no samples", 0);
  dataset.in_channels = dataset.samples.front().image.shape().c;
  dataset.num_classes = max_label <= 1 ? 1 : max_label + 1;
  return dataset;
}

}  // namespace cfcm
