#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfcm/layers.hpp"

namespace cfcm {

// Paired hidden/cell activation maps carried between decoder steps. The two
// tensors always share one shape; hidden values lie in (-1, 1) because they
// are produced as o * tanh(cell).
template <typename T>
struct LSTMState {
  Tensor4<T> hidden;
  Tensor4<T> cell;
};

template <typename T>
LSTMState<T> zero_state(std::int64_t n, std::int64_t channels, std::int64_t h, std::int64_t w) {
  return {Tensor4<T>({n, channels, h, w}, T(0)), Tensor4<T>({n, channels, h, w}, T(0))};
}

// Convolutional LSTM cell. The input is concatenated with the hidden state
// and a single 3x3 convolution produces all four gate pre-activations in the
// fixed order (input, forget, candidate, output).
template <typename T>
struct ConvLSTMCell {
  ConvLayer<T> gates;  // (c_x + c_h) -> 4 * c_h, k=3, pad=1, stride=1, with bias
  std::int64_t input_channels = 0;
  std::int64_t hidden_channels = 0;

  void collect(const std::string& name, std::vector<ParamRef<T>>& params) {
    collect_conv(name + ".gates", gates, params);
  }
};

// Forget-gate bias starts at 1 so that early training does not erase the
// carried context.
template <typename T>
ConvLSTMCell<T> make_conv_lstm_cell(std::int64_t c_x, std::int64_t c_h, SeedStream& seeds) {
  ConvLSTMCell<T> cell;
  cell.input_channels = c_x;
  cell.hidden_channels = c_h;
  cell.gates = make_conv_layer<T>(c_x + c_h, 4 * c_h, 3, 1, 1, true, seeds);
  auto bias = cell.gates.bias->mutable_data();
  for (std::int64_t c = c_h; c < 2 * c_h; ++c) bias[static_cast<std::size_t>(c)] = T(1);
  return cell;
}

// One step:
//   z = gates(concat(x, hidden))
//   i = sigmoid(z_i), f = sigmoid(z_f), g = tanh(z_g), o = sigmoid(z_o)
//   cell'   = f * cell + i * g
//   hidden' = o * tanh(cell')
template <typename T>
LSTMState<T> cell_step(const ConvLSTMCell<T>& cell, const Tensor4<T>& x,
                       const LSTMState<T>& state, Tape<T>* tape = nullptr) {
  const auto& xs = x.shape();
  const auto& hs = state.hidden.shape();
  if (xs.n != hs.n || xs.h != hs.h || xs.w != hs.w) {
    throw InvalidArgument("cell_step: input " + to_string(xs) + " not aligned with state " +
                          to_string(hs));
  }
  if (xs.c != cell.input_channels) {
    throw InvalidArgument("cell_step: expected " + std::to_string(cell.input_channels) +
                          " input channels, got " + to_string(xs));
  }
  if (!(state.hidden.shape() == state.cell.shape())) {
    throw InvalidArgument("cell_step: hidden " + to_string(state.hidden.shape()) +
                          " and cell " + to_string(state.cell.shape()) + " differ");
  }

  const std::int64_t ch = cell.hidden_channels;
  Tensor4<T> z = cell.gates.forward(concat_channels(x, state.hidden, tape), tape);
  Tensor4<T> i = sigmoid(slice_channels(z, 0, ch, tape), tape);
  Tensor4<T> f = sigmoid(slice_channels(z, ch, ch, tape), tape);
  Tensor4<T> g = tanh(slice_channels(z, 2 * ch, ch, tape), tape);
  Tensor4<T> o = sigmoid(slice_channels(z, 3 * ch, ch, tape), tape);

  LSTMState<T> next;
  next.cell = add(mul(f, state.cell, tape), mul(i, g, tape), tape);
  next.hidden = mul(o, tanh(next.cell, tape), tape);
  return next;
}

// Doubles the spatial size of both activation maps with the same mode.
template <typename T>
LSTMState<T> upsample_state(const LSTMState<T>& state, UpsampleMode mode,
                            Tape<T>* tape = nullptr) {
  return {upsample2(state.hidden, mode, tape), upsample2(state.cell, mode, tape)};
}

}  // namespace cfcm
