#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfcm/decoder.hpp"

namespace cfcm {

struct ModelConfig {
  int depth = 18;
  double width_mult = 1.0;
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 1;       // 1 = binary (sigmoid), >1 = softmax over channels
  std::int64_t hidden_channels = 32;  // ConvLSTM state width, shared across levels
  DecoderKind decoder = DecoderKind::kCfcm;
  UpsampleMode state_upsample = UpsampleMode::kBilinear;
};

// Encoder plus one of the three decoders behind a single forward surface.
template <typename T>
struct SegModel {
  ModelConfig config;
  Encoder<T> encoder;
  std::optional<CFCMDecoder<T>> cfcm;
  std::optional<SkipDecoder<T>> skip;

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode, Tape<T>* tape = nullptr) {
    FeaturePyramid<T> pyramid = encoder.forward(x, mode, tape);
    return cfcm ? cfcm->forward(pyramid, mode, tape) : skip->forward(pyramid, mode, tape);
  }

  // Trainable parameters in stable construction order.
  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> params, buffers;
    collect(params, buffers);
    return params;
  }

  // Non-trainable state (batchnorm running statistics).
  std::vector<ParamRef<T>> buffers() {
    std::vector<ParamRef<T>> params, buffers;
    collect(params, buffers);
    return buffers;
  }

  void collect(std::vector<ParamRef<T>>& params, std::vector<ParamRef<T>>& buffers) {
    encoder.collect("encoder", params, buffers);
    if (cfcm) cfcm->collect("decoder", params, buffers);
    if (skip) skip->collect("decoder", params, buffers);
  }
};

template <typename T>
SegModel<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  SegModel<T> model;
  model.config = config;
  SeedStream seeds(seed);
  model.encoder = build_encoder<T>(
      EncoderConfig{config.depth, config.width_mult, config.in_channels}, seeds);

  std::vector<std::int64_t> channels(model.encoder.stage_channels.begin(),
                                     model.encoder.stage_channels.end());
  std::reverse(channels.begin(), channels.end());  // coarse to fine

  switch (config.decoder) {
    case DecoderKind::kCfcm:
      model.cfcm = build_cfcm_decoder<T>(channels, config.hidden_channels, config.num_classes,
                                         config.state_upsample, seeds);
      break;
    case DecoderKind::kSkipSum:
      model.skip = build_skip_decoder<T>(channels, false, config.num_classes, seeds);
      break;
    case DecoderKind::kSkipConcat:
      model.skip = build_skip_decoder<T>(channels, true, config.num_classes, seeds);
      break;
  }
  return model;
}

// Exact count of trainable scalars.
template <typename T>
std::int64_t count_parameters(SegModel<T>& model) {
  std::int64_t total = 0;
  for (const auto& p : model.parameters()) total += p.tensor->numel();
  return total;
}

}  // namespace cfcm
