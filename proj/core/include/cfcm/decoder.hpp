#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfcm/conv_lstm.hpp"
#include "cfcm/encoder.hpp"

namespace cfcm {

enum class DecoderKind { kCfcm, kSkipSum, kSkipConcat };

inline std::string to_string(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::kCfcm: return "cfcm";
    case DecoderKind::kSkipSum: return "skip_sum";
    case DecoderKind::kSkipConcat: return "skip_concat";
  }
  return "?";
}

// Segmentation head shared by all decoders: 3x3 conv + relu, then 1x1 conv to
// the class logits, then a x4 bilinear upsample back to input resolution
// (the finest feature tap sits at 1/4 input size).
template <typename T>
struct SegHead {
  ConvLayer<T> conv;  // 3x3 pad 1, c -> c
  ConvLayer<T> out;   // 1x1, c -> num_classes

  Tensor4<T> forward(const Tensor4<T>& x, Tape<T>* tape) const {
    Tensor4<T> y = relu(conv.forward(x, tape), tape);
    y = out.forward(y, tape);
    return upsample(y, 4, UpsampleMode::kBilinear, tape);
  }

  void collect(const std::string& name, std::vector<ParamRef<T>>& params) {
    collect_conv(name + ".conv", conv, params);
    collect_conv(name + ".out", out, params);
  }
};

template <typename T>
SegHead<T> make_seg_head(std::int64_t c_in, std::int64_t num_classes, SeedStream& seeds) {
  SegHead<T> head;
  head.conv = make_conv_layer<T>(c_in, c_in, 3, 1, 1, true, seeds);
  head.out = make_conv_layer<T>(c_in, num_classes, 1, 1, 0, true, seeds);
  return head;
}

// Context-memory decoder: one ConvLSTM step per pyramid level, coarse to
// fine. The first step starts from a zero state; every later step starts
// from the x2-upsampled state of the step below. The final hidden state
// feeds the segmentation head.
template <typename T>
struct CFCMDecoder {
  std::vector<ConvLSTMCell<T>> cells;  // one per level, coarse to fine
  SegHead<T> head;
  UpsampleMode state_upsample = UpsampleMode::kBilinear;
  std::int64_t num_classes = 1;

  Tensor4<T> forward(const FeaturePyramid<T>& pyramid, Mode /*mode*/, Tape<T>* tape = nullptr) {
    if (pyramid.levels.size() != cells.size()) {
      throw InvalidArgument("cfcm decoder has " + std::to_string(cells.size()) +
                            " cells but pyramid has " + std::to_string(pyramid.levels.size()) +
                            " levels");
    }
    const auto& coarse = pyramid.coarsest().shape();
    LSTMState<T> state =
        zero_state<T>(coarse.n, cells.front().hidden_channels, coarse.h, coarse.w);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) state = upsample_state(state, state_upsample, tape);
      state = cell_step(cells[i], pyramid.levels[i], state, tape);
    }
    return head.forward(state.hidden, tape);
  }

  void collect(const std::string& name, std::vector<ParamRef<T>>& params,
               std::vector<ParamRef<T>>& /*buffers*/) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      cells[i].collect(name + ".cell" + std::to_string(i + 1), params);
    head.collect(name + ".head", params);
  }
};

// channels: pyramid channel counts ordered coarse to fine.
template <typename T>
CFCMDecoder<T> build_cfcm_decoder(const std::vector<std::int64_t>& channels,
                                  std::int64_t hidden_channels, std::int64_t num_classes,
                                  UpsampleMode state_upsample, SeedStream& seeds) {
  CFCMDecoder<T> dec;
  dec.state_upsample = state_upsample;
  dec.num_classes = num_classes;
  for (const auto c : channels)
    dec.cells.push_back(make_conv_lstm_cell<T>(c, hidden_channels, seeds));
  dec.head = make_seg_head<T>(hidden_channels, num_classes, seeds);
  return dec;
}

// Mirrored skip decoder: upsample x2, fuse with the next finer tap
// (elementwise add after 1x1 channel adaptation, or channel concatenation),
// then a 3x3 conv-bn-relu mixing block per level.
template <typename T>
struct SkipDecoder {
  bool concat_mode = false;
  std::vector<std::optional<ConvLayer<T>>> adapters;  // sum mode, per transition
  std::vector<ConvLayer<T>> mix;
  std::vector<NormLayer<T>> mix_norm;
  SegHead<T> head;
  std::int64_t num_classes = 1;

  Tensor4<T> forward(const FeaturePyramid<T>& pyramid, Mode mode, Tape<T>* tape = nullptr) {
    if (pyramid.levels.size() != mix.size() + 1) {
      throw InvalidArgument("skip decoder has " + std::to_string(mix.size()) +
                            " fusion blocks but pyramid has " +
                            std::to_string(pyramid.levels.size()) + " levels");
    }
    Tensor4<T> y = pyramid.coarsest();
    for (std::size_t i = 0; i + 1 < pyramid.levels.size(); ++i) {
      y = upsample2(y, UpsampleMode::kBilinear, tape);
      const Tensor4<T>& tap = pyramid.levels[i + 1];
      Tensor4<T> fused;
      if (concat_mode) {
        fused = concat_channels(y, tap, tape);
      } else {
        if (adapters[i]) y = adapters[i]->forward(y, tape);
        fused = add(y, tap, tape);
      }
      y = conv_bn_relu(fused, mix[i], mix_norm[i], mode, tape);
    }
    return head.forward(y, tape);
  }

  void collect(const std::string& name, std::vector<ParamRef<T>>& params,
               std::vector<ParamRef<T>>& buffers) {
    for (std::size_t i = 0; i < mix.size(); ++i) {
      const std::string level = name + ".fuse" + std::to_string(i + 1);
      if (adapters[i]) collect_conv(level + ".adapt", *adapters[i], params);
      collect_conv(level + ".mix", mix[i], params);
      collect_norm(level + ".mix_bn", mix_norm[i], params, buffers);
    }
    head.collect(name + ".head", params);
  }
};

template <typename T>
SkipDecoder<T> build_skip_decoder(const std::vector<std::int64_t>& channels, bool concat_mode,
                                  std::int64_t num_classes, SeedStream& seeds) {
  SkipDecoder<T> dec;
  dec.concat_mode = concat_mode;
  dec.num_classes = num_classes;
  for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
    const std::int64_t from = channels[i];
    const std::int64_t to = channels[i + 1];
    if (concat_mode) {
      dec.adapters.emplace_back(std::nullopt);
      dec.mix.push_back(make_conv_layer<T>(from + to, to, 3, 1, 1, false, seeds));
    } else {
      dec.adapters.emplace_back(from != to
                                    ? std::optional(make_conv_layer<T>(from, to, 1, 1, 0, false, seeds))
                                    : std::nullopt);
      dec.mix.push_back(make_conv_layer<T>(to, to, 3, 1, 1, false, seeds));
    }
    dec.mix_norm.push_back(make_norm_layer<T>(to));
  }
  dec.head = make_seg_head<T>(channels.back(), num_classes, seeds);
  return dec;
}

}  // namespace cfcm
