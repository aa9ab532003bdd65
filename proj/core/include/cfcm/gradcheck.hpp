#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cfcm/errors.hpp"
#include "cfcm/ops.hpp"
#include "cfcm/rng.hpp"
#include "cfcm/tape.hpp"
#include "cfcm/tensor.hpp"

namespace cfcm {

// Central-difference gradient verification. `forward` must return a scalar
// loss tensor, recording on the tape when one is given and running untaped
// otherwise. Requires 64-bit scalars; finite differences are unreliable in
// 32-bit.
//
// Returns the maximum over all sampled coordinates of
//   |analytic - central| / max(|analytic|, |central|, 1e-8).
inline double finite_diff_check(const std::vector<Tensor4<double>*>& params,
                                const std::function<Tensor4<double>(Tape<double>*)>& forward,
                                double eps, std::int64_t max_coords_per_param, Rng& rng) {
  if (eps <= 0.0) throw InvalidArgument("finite_diff_check: eps must be > 0");

  Tape<double> tape;
  const Tensor4<double> loss = forward(&tape);
  tape.backward(loss);

  std::vector<Tensor4<double>> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params) {
    analytic.push_back(tape.has_grad(*p) ? tape.grad(*p).clone()
                                         : Tensor4<double>(p->shape(), 0.0));
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor4<double>& p = *params[pi];
    auto pd = p.mutable_data();
    const auto n = static_cast<std::int64_t>(pd.size());

    std::vector<std::int64_t> coords;
    if (n <= max_coords_per_param) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (std::int64_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(rng.uniform_int(0, n - 1));
    }

    for (const auto ci : coords) {
      const auto i = static_cast<std::size_t>(ci);
      const double saved = pd[i];
      pd[i] = saved + eps;
      const double up = forward(nullptr).item();
      pd[i] = saved - eps;
      const double down = forward(nullptr).item();
      pd[i] = saved;

      const double fd = (up - down) / (2.0 * eps);
      const double ana = analytic[pi].data()[i];
      const double denom = std::max({std::abs(ana), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(ana - fd) / denom);
    }
  }
  return worst;
}

}  // namespace cfcm
