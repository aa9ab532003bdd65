#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cfcm/labels.hpp"
#include "cfcm/ops.hpp"

namespace cfcm {

inline constexpr double kDefaultDiceEps = 1e-7;

namespace detail {

// Order-independent accumulator for non-negative addends in [0, 2]:
// fixed-point at 2^-60 so that summation is exact integer arithmetic and the
// result does not depend on pixel order.
class ExactSum {
 public:
  void add(double v) {
    acc_ += static_cast<__int128>(std::llround(v * 0x1p60));
  }
  double value() const {
    return static_cast<double>(static_cast<long double>(acc_) * 0x1p-60L);
  }

 private:
  __int128 acc_ = 0;
};

}  // namespace detail

// Differentiable soft dice loss.
//
// Probabilities come from a sigmoid when logits have a single channel
// (binary mode) and from a per-pixel softmax otherwise. With g the one-hot
// target, each class scores
//   d_k = 2 * sum(p_k * g_k) / (sum(p_k^2) + sum(g_k^2) + eps)
// summed over the whole batch, and the loss is 1 minus the mean of d_k over
// the foreground classes (class 0 is excluded in softmax mode).
template <typename T>
Tensor4<T> soft_dice_loss(const Tensor4<T>& logits, const LabelBatch& target,
                          double eps = kDefaultDiceEps, Tape<T>* tape = nullptr) {
  const auto& s = logits.shape();
  if (s.n != target.n || s.h != target.h || s.w != target.w) {
    throw InvalidArgument("soft_dice_loss: logits " + to_string(s) + " do not align with target (n=" +
                          std::to_string(target.n) + ",h=" + std::to_string(target.h) +
                          ",w=" + std::to_string(target.w) + ")");
  }
  const bool binary = s.c == 1;
  const std::uint8_t max_label = binary ? 1 : static_cast<std::uint8_t>(s.c - 1);
  for (const auto label : target.v) {
    if (label > max_label) {
      throw InvalidArgument("soft_dice_loss: label " + std::to_string(label) +
                            " out of range [0, " + std::to_string(max_label) + "]");
    }
  }

  const std::int64_t hw = s.h * s.w;
  const std::int64_t classes = s.c;

  // Class probabilities.
  Tensor4<T> probs(s);
  {
    auto pd = probs.mutable_data();
    const T* zd = logits.data().data();
    if (binary) {
      for (std::size_t i = 0; i < pd.size(); ++i) pd[i] = detail::stable_sigmoid(zd[i]);
    } else {
      for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t i = 0; i < hw; ++i) {
          const std::int64_t base = n * classes * hw + i;
          double zmax = zd[base];
          for (std::int64_t c = 1; c < classes; ++c)
            zmax = std::max(zmax, static_cast<double>(zd[base + c * hw]));
          double denom = 0.0;
          for (std::int64_t c = 0; c < classes; ++c)
            denom += std::exp(static_cast<double>(zd[base + c * hw]) - zmax);
          for (std::int64_t c = 0; c < classes; ++c)
            pd[static_cast<std::size_t>(base + c * hw)] = static_cast<T>(
                std::exp(static_cast<double>(zd[base + c * hw]) - zmax) / denom);
        }
    }
  }

  // Per-class overlap and denominator sums over the whole batch. The exact
  // accumulators keep the sums independent of pixel order.
  const std::int64_t first_class = binary ? 0 : 1;  // class 0 = background in softmax mode
  std::vector<double> overlap(static_cast<std::size_t>(classes), 0.0);
  std::vector<double> denom(static_cast<std::size_t>(classes), 0.0);
  {
    const T* pd = probs.data().data();
    for (std::int64_t c = 0; c < classes; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const std::uint8_t cls = binary ? 1 : static_cast<std::uint8_t>(c);
      detail::ExactSum ov, dn;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* plane = pd + (n * classes + c) * hw;
        const std::uint8_t* labels = target.v.data() + n * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double p = plane[i];
          const double g = labels[i] == cls ? 1.0 : 0.0;
          ov.add(p * g);
          dn.add(p * p + g);  // g == g^2 for one-hot targets
        }
      }
      overlap[ci] = ov.value();
      denom[ci] = dn.value();
    }
  }

  const std::int64_t included = classes - first_class;
  double mean_dice = 0.0;
  for (std::int64_t c = first_class; c < classes; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    mean_dice += 2.0 * overlap[ci] / (denom[ci] + eps);
  }
  mean_dice /= static_cast<double>(included);

  Tensor4<T> loss({1, 1, 1, 1});
  loss.mutable_data()[0] = static_cast<T>(1.0 - mean_dice);

  if (tape) {
    if (auto nz = tape->track(logits)) {
      auto id = tape->add_node(
          "soft_dice_loss",
          [nz, probs, target, overlap, denom, eps, binary, first_class, included,
           s, hw, classes](Tape<T>& t, const Tensor4<T>& g) {
            const double gscale = g.data()[0];
            const T* pd = probs.data().data();
            Tensor4<T> dz(s);
            auto dzd = dz.mutable_data();

            // dL/dp_k[i] = -(1/|K|) * 2 * (g_k[i] * D_k - 2 * N_k * p_k[i]) / D_k^2
            const double inv_k = 1.0 / static_cast<double>(included);
            std::vector<double> dp(static_cast<std::size_t>(classes));
            for (std::int64_t n = 0; n < s.n; ++n) {
              const std::uint8_t* labels = target.v.data() + n * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                for (std::int64_t c = 0; c < classes; ++c) {
                  const auto ci = static_cast<std::size_t>(c);
                  if (c < first_class) {
                    dp[ci] = 0.0;
                    continue;
                  }
                  const std::uint8_t cls = binary ? 1 : static_cast<std::uint8_t>(c);
                  const double p = pd[(n * classes + c) * hw + i];
                  const double gk = labels[i] == cls ? 1.0 : 0.0;
                  const double dk = denom[ci] + eps;
                  dp[ci] = -inv_k * 2.0 * (gk * dk - 2.0 * overlap[ci] * p) / (dk * dk);
                }
                if (binary) {
                  const double p = pd[n * hw + i];
                  dzd[static_cast<std::size_t>(n * hw + i)] =
                      static_cast<T>(gscale * dp[0] * p * (1.0 - p));
                } else {
                  double dot = 0.0;
                  for (std::int64_t c = 0; c < classes; ++c)
                    dot += dp[static_cast<std::size_t>(c)] * pd[(n * classes + c) * hw + i];
                  for (std::int64_t c = 0; c < classes; ++c) {
                    const double p = pd[(n * classes + c) * hw + i];
                    dzd[static_cast<std::size_t>((n * classes + c) * hw + i)] = static_cast<T>(
                        gscale * p * (dp[static_cast<std::size_t>(c)] - dot));
                  }
                }
              }
            }
            t.accumulate(*nz, std::move(dz));
          });
      loss.bind_to_tape(tape->serial(), id);
    }
  }
  return loss;
}

}  // namespace cfcm
