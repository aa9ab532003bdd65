#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cfcm/layers.hpp"
#include "cfcm/tape.hpp"

namespace cfcm {

// Adam optimizer state: first/second moment per parameter plus the shared
// step counter. Slot order mirrors the parameter list it was created from.
template <typename T>
struct AdamState {
  struct Slot {
    Tensor4<T> m;
    Tensor4<T> v;
  };
  std::vector<Slot> slots;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
AdamState<T> make_adam_state(const std::vector<ParamRef<T>>& params) {
  AdamState<T> state;
  state.slots.reserve(params.size());
  for (const auto& p : params) {
    state.slots.push_back({Tensor4<T>(p.tensor->shape(), T(0)), Tensor4<T>(p.tensor->shape(), T(0))});
  }
  return state;
}

// One bias-corrected Adam update, in place. Every parameter must have a
// gradient on the tape.
template <typename T>
void adam_step(std::vector<ParamRef<T>>& params, const Tape<T>& tape, AdamState<T>& state,
               double lr) {
  if (params.size() != state.slots.size()) {
    throw InvalidArgument("adam_step: state has " + std::to_string(state.slots.size()) +
                          " slots for " + std::to_string(params.size()) + " parameters");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!tape.has_grad(*params[i].tensor)) {
      throw InvalidArgument("adam_step: no gradient for parameter " + params[i].name);
    }
    const auto g = tape.grad(*params[i].tensor).data();
    auto m = state.slots[i].m.mutable_data();
    auto v = state.slots[i].v.mutable_data();
    auto p = params[i].tensor->mutable_data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] - lr * (mj / bc1) / (std::sqrt(vj / bc2) + state.eps));
    }
  }
}

}  // namespace cfcm
