#pragma once

#include <cstdint>
#include <vector>

#include "cfcm/errors.hpp"

namespace cfcm {

// Per-pixel integer class labels for one image.
struct LabelImage {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::uint8_t> v;

  LabelImage() = default;
  LabelImage(std::int64_t h_, std::int64_t w_, std::uint8_t fill = 0)
      : h(h_), w(w_), v(static_cast<std::size_t>(h_ * w_), fill) {}

  std::uint8_t at(std::int64_t y, std::int64_t x) const {
    return v[static_cast<std::size_t>(y * w + x)];
  }
  std::uint8_t& at(std::int64_t y, std::int64_t x) {
    return v[static_cast<std::size_t>(y * w + x)];
  }
  std::int64_t numel() const { return h * w; }
  bool operator==(const LabelImage&) const = default;
};

// Binary foreground mask; nonzero means foreground.
using BinaryMask = LabelImage;

// Extracts the one-vs-rest mask of a class.
inline BinaryMask class_mask(const LabelImage& labels, std::uint8_t cls) {
  BinaryMask m(labels.h, labels.w);
  for (std::size_t i = 0; i < labels.v.size(); ++i) m.v[i] = labels.v[i] == cls ? 1 : 0;
  return m;
}

// Stacked label masks for a batch.
struct LabelBatch {
  std::int64_t n = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::uint8_t> v;

  LabelBatch() = default;
  LabelBatch(std::int64_t n_, std::int64_t h_, std::int64_t w_, std::uint8_t fill = 0)
      : n(n_), h(h_), w(w_), v(static_cast<std::size_t>(n_ * h_ * w_), fill) {}

  std::uint8_t at(std::int64_t i, std::int64_t y, std::int64_t x) const {
    return v[static_cast<std::size_t>((i * h + y) * w + x)];
  }
  std::uint8_t& at(std::int64_t i, std::int64_t y, std::int64_t x) {
    return v[static_cast<std::size_t>((i * h + y) * w + x)];
  }

  LabelImage slice(std::int64_t i) const {
    LabelImage m(h, w);
    std::copy(v.begin() + i * h * w, v.begin() + (i + 1) * h * w, m.v.begin());
    return m;
  }
};

}  // namespace cfcm
