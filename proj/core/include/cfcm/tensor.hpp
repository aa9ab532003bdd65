#pragma once

#include <cassert>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cfcm/errors.hpp"
#include "cfcm/rng.hpp"

namespace cfcm {

struct Shape4 {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;
};

inline std::string to_string(const Shape4& s) {
  return "(n=" + std::to_string(s.n) + ",c=" + std::to_string(s.c) +
         ",h=" + std::to_string(s.h) + ",w=" + std::to_string(s.w) + ")";
}

namespace detail {
// Per-tensor autograd bookkeeping, shared between copies of the same logical
// tensor so that a leaf registered on a tape stays registered through the
// copies a caller holds. The node handle is only meaningful while
// tape_serial matches the serial of a live tape.
struct GradMeta {
  bool requires_grad = false;
  bool bound = false;
  std::uint64_t tape_serial = 0;
  std::uint32_t node = 0;
};
}  // namespace detail

// Dense rank-4 array, laid out row-major as (batch, channel, row, col).
// Copies share the underlying buffer; buffers are treated as immutable once a
// tensor has entered an op, except for explicit parameter updates between
// training steps (see mutable_data).
template <typename T>
class Tensor4 {
 public:
  Tensor4() : meta_(std::make_shared<detail::GradMeta>()) {}

  explicit Tensor4(Shape4 shape, T fill = T(0))
      : shape_(shape),
        data_(std::make_shared<std::vector<T>>(check_numel(shape), fill)),
        meta_(std::make_shared<detail::GradMeta>()) {}

  static Tensor4 from_data(Shape4 shape, std::vector<T> values) {
    if (static_cast<std::int64_t>(values.size()) != check_numel(shape)) {
      throw InvalidArgument("tensor data length " + std::to_string(values.size()) +
                            " does not match shape " + cfcm::to_string(shape));
    }
    Tensor4 t;
    t.shape_ = shape;
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor4 zeros(Shape4 shape) { return Tensor4(shape, T(0)); }
  static Tensor4 ones(Shape4 shape) { return Tensor4(shape, T(1)); }

  static Tensor4 randn(Shape4 shape, Rng& rng, double stddev = 1.0) {
    Tensor4 t(shape);
    for (auto& v : *t.data_) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  const Shape4& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return !data_; }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }

  // In-place access to the buffer. Legal only on tensors that are not saved
  // inside a live tape: parameter init, optimizer updates, gradcheck
  // perturbation.
  std::span<T> mutable_data() { return {data_->data(), data_->size()}; }

  T at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
    return (*data_)[offset(n, c, y, x)];
  }
  T& at_mut(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
    return (*data_)[offset(n, c, y, x)];
  }

  // Value of a scalar tensor (shape (1,1,1,1)).
  T item() const {
    if (numel() != 1) {
      throw InvalidArgument("item() requires a scalar tensor, got " + cfcm::to_string(shape_));
    }
    return (*data_)[0];
  }

  bool requires_grad() const { return meta_->requires_grad; }
  void set_requires_grad(bool v) { meta_->requires_grad = v; }

  detail::GradMeta& grad_meta() const { return *meta_; }

  // Marks this tensor as the output of a tape node.
  void bind_to_tape(std::uint64_t serial, std::uint32_t node) {
    meta_->requires_grad = true;
    meta_->bound = true;
    meta_->tape_serial = serial;
    meta_->node = node;
  }

  // Deep copy with a fresh buffer and fresh autograd state.
  Tensor4 clone() const {
    Tensor4 t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  template <typename U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*data_)[i]);
    return Tensor4<U>::from_data({shape_.n, shape_.c, shape_.h, shape_.w}, std::move(out));
  }

 private:
  static std::int64_t check_numel(const Shape4& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw InvalidArgument("all shape components must be >= 1, got " + cfcm::to_string(s));
    }
    return s.numel();
  }

  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
    assert(n >= 0 && n < shape_.n && c >= 0 && c < shape_.c);
    assert(y >= 0 && y < shape_.h && x >= 0 && x < shape_.w);
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape4 shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<detail::GradMeta> meta_;
};

}  // namespace cfcm
