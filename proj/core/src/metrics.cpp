#include "cfcm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>

#include "cfcm/errors.hpp"

namespace cfcm {

namespace {

bool is_empty(const BinaryMask& m) {
  return std::all_of(m.v.begin(), m.v.end(), [](std::uint8_t v) { return v == 0; });
}

constexpr double kEdtInf = 1e20;

// 1D squared distance transform (lower envelope of parabolas).
void dt1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
          std::vector<double>& z, std::int64_t n) {
  int k = 0;
  v[0] = 0;
  z[0] = -kEdtInf;
  z[1] = kEdtInf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kEdtInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - double(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

// Exact squared Euclidean distances from every grid cell to the nearest
// source cell.
std::vector<std::int64_t> edt_squared(const std::vector<std::uint8_t>& source, std::int64_t h,
                                      std::int64_t w) {
  std::vector<double> grid(static_cast<std::size_t>(h * w));
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = source[i] ? 0.0 : kEdtInf;

  const std::int64_t n = std::max(h, w);
  std::vector<double> f(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n));
  std::vector<int> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n + 1));

  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) f[x] = grid[y * w + x];
    dt1d(f, d, v, z, w);
    for (std::int64_t x = 0; x < w; ++x) grid[y * w + x] = d[x];
  }
  for (std::int64_t x = 0; x < w; ++x) {
    for (std::int64_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
    dt1d(f, d, v, z, h);
    for (std::int64_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
  }

  std::vector<std::int64_t> out(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) out[i] = std::llround(grid[i]);
  return out;
}

// Shared aggregation for the transform path and the pairwise oracle. The
// squared distances are sorted first so the result depends only on the
// multiset of distances, making the symmetric aggregation bit-exact under
// argument swap and translation.
SurfaceDistanceResult aggregate_distances(std::vector<std::int64_t> squared) {
  std::sort(squared.begin(), squared.end());
  double sum_d = 0.0;
  std::int64_t sum_sq = 0;
  for (const auto sq : squared) {
    sum_d += std::sqrt(static_cast<double>(sq));
    sum_sq += sq;
  }
  const auto count = static_cast<double>(squared.size());
  return {sum_d / count, std::sqrt(static_cast<double>(sum_sq) / count),
          std::sqrt(static_cast<double>(squared.back()))};
}

void check_same_size(const LabelImage& a, const LabelImage& b, const char* op) {
  if (a.h != b.h || a.w != b.w) {
    throw InvalidArgument(std::string(op) + ": mask sizes (" + std::to_string(a.h) + "x" +
                          std::to_string(a.w) + ") vs (" + std::to_string(b.h) + "x" +
                          std::to_string(b.w) + ") differ");
  }
}

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt_mean_std(const AggregateStat& s) {
  return s.count == 0 ? "nan" : fmt_num(s.mean) + "±" + fmt_num(s.stddev);
}

AggregateStat aggregate_stat(const std::vector<double>& values) {
  AggregateStat s;
  s.count = static_cast<std::int64_t>(values.size());
  if (values.empty()) return s;
  double acc = 0.0;
  for (const double v : values) acc += v;
  s.mean = acc / static_cast<double>(values.size());
  double var = 0.0;
  for (const double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

}  // namespace

double dice_score(const BinaryMask& a, const BinaryMask& b) {
  check_same_size(a, b, "dice_score");
  std::int64_t inter = 0, card = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const bool fa = a.v[i] != 0;
    const bool fb = b.v[i] != 0;
    inter += fa && fb;
    card += fa;
    card += fb;
  }
  if (card == 0) return 1.0;  // both empty
  return 2.0 * static_cast<double>(inter) / static_cast<double>(card);
}

std::vector<std::pair<std::int64_t, std::int64_t>> boundary_extract(const BinaryMask& m) {
  if (is_empty(m)) throw InvalidArgument("boundary_extract: mask is empty");
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t y = 0; y < m.h; ++y)
    for (std::int64_t x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == m.h - 1 || x == m.w - 1 || !m.at(y - 1, x) ||
                        !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
      if (edge) out.emplace_back(y, x);
    }
  return out;
}

SurfaceDistanceResult surface_distances_bruteforce(const BinaryMask& a, const BinaryMask& b) {
  check_same_size(a, b, "surface_distances");
  if (is_empty(a) || is_empty(b)) {
    throw InvalidArgument("surface_distances: undefined for an empty mask");
  }
  const auto ba = boundary_extract(a);
  const auto bb = boundary_extract(b);

  auto directed = [](const auto& from, const auto& to, std::vector<std::int64_t>& out) {
    for (const auto& [y, x] : from) {
      std::int64_t best = std::numeric_limits<std::int64_t>::max();
      for (const auto& [ty, tx] : to) {
        const std::int64_t dy = y - ty, dx = x - tx;
        best = std::min(best, dy * dy + dx * dx);
      }
      out.push_back(best);
    }
  };

  std::vector<std::int64_t> squared;
  squared.reserve(ba.size() + bb.size());
  directed(ba, bb, squared);
  directed(bb, ba, squared);
  return aggregate_distances(squared);
}

SurfaceDistanceResult surface_distances(const BinaryMask& a, const BinaryMask& b) {
  check_same_size(a, b, "surface_distances");
  if (is_empty(a) || is_empty(b)) {
    throw InvalidArgument("surface_distances: undefined for an empty mask");
  }
  const auto ba = boundary_extract(a);
  const auto bb = boundary_extract(b);

  std::vector<std::uint8_t> src(static_cast<std::size_t>(a.h * a.w), 0);
  for (const auto& [y, x] : bb) src[static_cast<std::size_t>(y * a.w + x)] = 1;
  const auto to_b = edt_squared(src, a.h, a.w);

  std::fill(src.begin(), src.end(), 0);
  for (const auto& [y, x] : ba) src[static_cast<std::size_t>(y * a.w + x)] = 1;
  const auto to_a = edt_squared(src, a.h, a.w);

  std::vector<std::int64_t> squared;
  squared.reserve(ba.size() + bb.size());
  for (const auto& [y, x] : ba) squared.push_back(to_b[static_cast<std::size_t>(y * a.w + x)]);
  for (const auto& [y, x] : bb) squared.push_back(to_a[static_cast<std::size_t>(y * a.w + x)]);
  return aggregate_distances(squared);
}

ConfusionCounts confusion_counts(const LabelImage& pred, const LabelImage& truth,
                                 std::uint8_t class_id) {
  check_same_size(pred, truth, "confusion_metrics");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    const bool p = pred.v[i] == class_id;
    const bool t = truth.v[i] == class_id;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
    c.tn += !p && !t;
  }
  return c;
}

ClassMetrics confusion_metrics(const LabelImage& pred, const LabelImage& truth,
                               std::uint8_t class_id) {
  const ConfusionCounts c = confusion_counts(pred, truth, class_id);
  const auto ratio = [](std::int64_t num, std::int64_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  ClassMetrics m;
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.specificity = ratio(c.tn, c.tn + c.fp);
  m.balanced_accuracy = 0.5 * (m.recall + m.specificity);
  return m;
}

LabelImage predict_labels(SegModel<float>& model, const Tensor4<float>& image) {
  const Tensor4<float> logits = model.forward(image, Mode::kEval, nullptr);
  const auto& s = logits.shape();
  LabelImage out(s.h, s.w);
  if (s.c == 1) {
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t x = 0; x < s.w; ++x) out.at(y, x) = logits.at(0, 0, y, x) > 0.0f ? 1 : 0;
    return out;
  }
  for (std::int64_t y = 0; y < s.h; ++y)
    for (std::int64_t x = 0; x < s.w; ++x) {
      std::uint8_t best = 0;
      float bv = logits.at(0, 0, y, x);
      for (std::int64_t c = 1; c < s.c; ++c) {
        const float v = logits.at(0, c, y, x);
        if (v > bv) {
          bv = v;
          best = static_cast<std::uint8_t>(c);
        }
      }
      out.at(y, x) = best;
    }
  return out;
}

double mean_foreground_dice(const LabelImage& pred, const LabelImage& truth, int num_classes) {
  const int first = 1;
  const int last = num_classes == 1 ? 1 : num_classes - 1;
  double acc = 0.0;
  for (int cls = first; cls <= last; ++cls) {
    acc += dice_score(class_mask(pred, static_cast<std::uint8_t>(cls)),
                      class_mask(truth, static_cast<std::uint8_t>(cls)));
  }
  return acc / static_cast<double>(last - first + 1);
}

MetricReport evaluate_predictions(const std::vector<LabeledPrediction>& predictions,
                                  int num_classes) {
  if (predictions.empty()) throw InvalidArgument("evaluate_predictions: empty input");
  const int first_class = 1;
  const int last_class = num_classes == 1 ? 1 : num_classes - 1;

  MetricReport report;
  std::map<int, std::vector<double>> dices, mads, rmss, hds, precs, recs, specs, baccs;

  for (const auto& item : predictions) {
    for (int cls = first_class; cls <= last_class; ++cls) {
      SampleMetrics row;
      row.sample_id = item.sample_id;
      row.cls = cls;
      const BinaryMask pm = class_mask(item.pred, static_cast<std::uint8_t>(cls));
      const BinaryMask tm = class_mask(item.truth, static_cast<std::uint8_t>(cls));
      row.dice = dice_score(pm, tm);
      row.confusion = confusion_metrics(item.pred, item.truth, static_cast<std::uint8_t>(cls));

      const bool pe = std::all_of(pm.v.begin(), pm.v.end(), [](std::uint8_t v) { return !v; });
      const bool te = std::all_of(tm.v.begin(), tm.v.end(), [](std::uint8_t v) { return !v; });
      if (!pe && !te) {
        row.surface = surface_distances(pm, tm);
        mads[cls].push_back(row.surface->mad);
        rmss[cls].push_back(row.surface->rms);
        hds[cls].push_back(row.surface->hd);
      } else {
        report.surface_exclusions += 1;
      }
      dices[cls].push_back(row.dice);
      precs[cls].push_back(row.confusion.precision);
      recs[cls].push_back(row.confusion.recall);
      specs[cls].push_back(row.confusion.specificity);
      baccs[cls].push_back(row.confusion.balanced_accuracy);
      report.rows.push_back(std::move(row));
    }
  }

  for (int cls = first_class; cls <= last_class; ++cls) {
    ClassAggregate agg;
    agg.dice = aggregate_stat(dices[cls]);
    agg.mad = aggregate_stat(mads[cls]);
    agg.rms = aggregate_stat(rmss[cls]);
    agg.hd = aggregate_stat(hds[cls]);
    agg.precision = aggregate_stat(precs[cls]);
    agg.recall = aggregate_stat(recs[cls]);
    agg.specificity = aggregate_stat(specs[cls]);
    agg.balanced_accuracy = aggregate_stat(baccs[cls]);
    agg.surface_exclusions =
        static_cast<std::int64_t>(dices[cls].size() - mads[cls].size());
    report.per_class[cls] = agg;
  }
  return report;
}

MetricReport evaluate_samples(SegModel<float>& model, const Dataset& dataset,
                              const std::vector<std::int64_t>& indices, int num_classes) {
  if (indices.empty()) throw InvalidArgument("evaluate_model: empty dataset");
  std::vector<LabeledPrediction> predictions;
  predictions.reserve(indices.size());
  for (const auto idx : indices) {
    const Sample& sample = dataset.samples[static_cast<std::size_t>(idx)];
    predictions.push_back({sample.id, predict_labels(model, sample.image), sample.mask});
  }
  return evaluate_predictions(predictions, num_classes);
}

MetricReport evaluate_model(SegModel<float>& model, const Dataset& dataset, int num_classes) {
  std::vector<std::int64_t> all(dataset.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
  return evaluate_samples(model, dataset, all, num_classes);
}

void write_metric_csv(const MetricReport& report, std::ostream& out) {
  out << "sample_id,class,dice,mad,rms,hd,precision,recall,specificity,balanced_accuracy\n";
  for (const auto& row : report.rows) {
    out << row.sample_id << ',' << row.cls << ',' << fmt_num(row.dice) << ',';
    if (row.surface) {
      out << fmt_num(row.surface->mad) << ',' << fmt_num(row.surface->rms) << ','
          << fmt_num(row.surface->hd) << ',';
    } else {
      out << "nan,nan,nan,";
    }
    out << fmt_num(row.confusion.precision) << ',' << fmt_num(row.confusion.recall) << ','
        << fmt_num(row.confusion.specificity) << ','
        << fmt_num(row.confusion.balanced_accuracy) << '\n';
  }
  for (const auto& [cls, agg] : report.per_class) {
    out << "aggregate," << cls << ',' << fmt_mean_std(agg.dice) << ',' << fmt_mean_std(agg.mad)
        << ',' << fmt_mean_std(agg.rms) << ',' << fmt_mean_std(agg.hd) << ','
        << fmt_mean_std(agg.precision) << ',' << fmt_mean_std(agg.recall) << ','
        << fmt_mean_std(agg.specificity) << ',' << fmt_mean_std(agg.balanced_accuracy) << '\n';
  }
}

void write_metric_csv(const MetricReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_metric_csv(report, out);
}

}  // namespace cfcm
