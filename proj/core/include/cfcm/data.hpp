#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfcm/labels.hpp"
#include "cfcm/tensor.hpp"

namespace cfcm {

// Synthetic corpus generator settings. Binary mode draws paired soft-edged
// ellipses over textured noise; 3-class mode draws a two-segment instrument
// (shaft + tip) over clutter.
struct SynthConfig {
  std::int64_t count = 320;
  std::int64_t image_size = 64;  // must be divisible by 32
  int num_classes = 1;           // 1 or 3
  std::int64_t blobs_min = 2;
  std::int64_t blobs_max = 2;
  double noise = 0.08;
  std::uint64_t seed = 7;
  int folds = 5;
};

struct Sample {
  Tensor4<float> image;  // (1, c, h, w), values in [0, 1]
  LabelImage mask;
  std::string id;
  int fold = 0;
  std::string group;
};

struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 1;
  std::int64_t in_channels = 1;
};

Dataset generate_synthetic(const SynthConfig& cfg);

// Binary PGM (P5) / PPM (P6), 8-bit only. Images are scaled to [0, 1] on
// load; masks keep their raw label bytes.
Tensor4<float> load_image(const std::string& path);
void save_image(const Tensor4<float>& image, const std::string& path);
LabelImage load_mask(const std::string& path);
void save_mask(const LabelImage& mask, const std::string& path);

Tensor4<float> resize_bilinear(const Tensor4<float>& image, std::int64_t h, std::int64_t w);
LabelImage resize_nearest(const LabelImage& mask, std::int64_t h, std::int64_t w);

struct FoldSplit {
  std::vector<std::int64_t> train_ids;
  std::vector<std::int64_t> test_ids;
};

// Deterministic disjoint covering partition with fold sizes differing by at
// most one.
std::vector<FoldSplit> kfold_split(std::int64_t n, std::int64_t k, std::uint64_t seed);

// Leave-one-group-out: one fold per distinct group label, in first-appearance
// order.
std::vector<FoldSplit> group_split(const std::vector<std::string>& groups);

// Directory layout: images/<id>.pgm|.ppm, masks/<id>.pgm, manifest.csv with
// id,fold,group rows.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace cfcm
