#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfcm/data.hpp"
#include "cfcm/labels.hpp"
#include "cfcm/model.hpp"

namespace cfcm {

// Boundary-to-boundary distances in pixels over the symmetric multiset of
// directed distances (a->b and b->a). 0 <= mad <= rms <= hd always holds.
struct SurfaceDistanceResult {
  double mad = 0.0;
  double rms = 0.0;
  double hd = 0.0;
};

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double specificity = 0.0;
  double balanced_accuracy = 0.0;
};

// 2|A∩B| / (|A|+|B|); 1 when both masks are empty.
double dice_score(const BinaryMask& a, const BinaryMask& b);

// Foreground pixels with at least one 4-neighbor that is background or out
// of bounds, in row-major scan order. The mask must be non-empty.
std::vector<std::pair<std::int64_t, std::int64_t>> boundary_extract(const BinaryMask& m);

// Exact Euclidean distance transform path.
SurfaceDistanceResult surface_distances(const BinaryMask& a, const BinaryMask& b);

// Exhaustive pairwise oracle; bit-identical to surface_distances.
SurfaceDistanceResult surface_distances_bruteforce(const BinaryMask& a, const BinaryMask& b);

ConfusionCounts confusion_counts(const LabelImage& pred, const LabelImage& truth,
                                 std::uint8_t class_id);

// Ratios with a zero denominator report 1 (vacuously perfect).
ClassMetrics confusion_metrics(const LabelImage& pred, const LabelImage& truth,
                               std::uint8_t class_id);

// Argmax class labels of a model on a single preprocessed image (1,c,h,w).
// In binary mode the foreground label is logit > 0.
LabelImage predict_labels(SegModel<float>& model, const Tensor4<float>& image);

// Mean dice over the foreground classes of one prediction (both-empty
// classes score 1).
double mean_foreground_dice(const LabelImage& pred, const LabelImage& truth, int num_classes);

struct SampleMetrics {
  std::string sample_id;
  int cls = 0;
  double dice = 0.0;
  std::optional<SurfaceDistanceResult> surface;  // absent when either mask is empty
  ClassMetrics confusion;
};

struct AggregateStat {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
  std::int64_t count = 0;
};

struct ClassAggregate {
  AggregateStat dice, mad, rms, hd, precision, recall, specificity, balanced_accuracy;
  std::int64_t surface_exclusions = 0;
};

struct MetricReport {
  std::vector<SampleMetrics> rows;
  std::map<int, ClassAggregate> per_class;
  std::int64_t surface_exclusions = 0;
};

struct LabeledPrediction {
  std::string sample_id;
  LabelImage pred;
  LabelImage truth;
};

// Model-free core of the evaluation: per-class rows plus per-class
// aggregates. Samples whose prediction or truth is empty for a class are
// excluded from the surface-distance aggregates and counted.
MetricReport evaluate_predictions(const std::vector<LabeledPrediction>& predictions,
                                  int num_classes);

MetricReport evaluate_model(SegModel<float>& model, const Dataset& dataset, int num_classes);
MetricReport evaluate_samples(SegModel<float>& model, const Dataset& dataset,
                              const std::vector<std::int64_t>& indices, int num_classes);

// CSV rows per sample and class, then one aggregate row per class with
// mean±std cells.
void write_metric_csv(const MetricReport& report, std::ostream& out);
void write_metric_csv(const MetricReport& report, const std::string& path);

}  // namespace cfcm
