#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cfcm/layers.hpp"

namespace cfcm {

struct EncoderConfig {
  int depth = 18;            // 18 | 34 | 50 | 101
  double width_mult = 1.0;   // scales every channel count; scaled widths must be integers >= 1
  std::int64_t in_channels = 1;
};

namespace detail {

struct StagePlan {
  std::array<int, 4> blocks;
  bool bottleneck;
};

inline StagePlan stage_plan(int depth) {
  switch (depth) {
    case 18:
      return {{2, 2, 2, 2}, false};
    case 34:
      return {{3, 4, 6, 3}, false};
    case 50:
      return {{3, 4, 6, 3}, true};
    case 101:
      return {{3, 4, 23, 3}, true};
    default:
      throw InvalidArgument("unsupported encoder depth " + std::to_string(depth) +
                            " (expected 18, 34, 50 or 101)");
  }
}

inline std::int64_t scaled_width(std::int64_t base, double mult) {
  const double v = static_cast<double>(base) * mult;
  const double r = std::round(v);
  if (std::abs(v - r) > 1e-9 || r < 1.0) {
    throw InvalidArgument("width_mult " + std::to_string(mult) + " does not scale width " +
                          std::to_string(base) + " to an integer >= 1");
  }
  return static_cast<std::int64_t>(r);
}

}  // namespace detail

// Basic (two 3x3 convs) or bottleneck (1x1, 3x3, 1x1) residual unit with an
// optional strided 1x1 projection on the shortcut. Output is
// relu(F(x) + shortcut(x)).
template <typename T>
struct ResidualBlock {
  bool bottleneck = false;
  std::vector<ConvLayer<T>> convs;
  std::vector<NormLayer<T>> norms;
  std::optional<ConvLayer<T>> proj;
  std::optional<NormLayer<T>> proj_norm;

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode, Tape<T>* tape = nullptr) {
    Tensor4<T> f = x;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      f = batchnorm_forward(convs[i].forward(f, tape), norms[i], mode, tape);
      if (i + 1 < convs.size()) f = relu(f, tape);
    }
    Tensor4<T> shortcut =
        proj ? batchnorm_forward(proj->forward(x, tape), *proj_norm, mode, tape) : x;
    return relu(add(f, shortcut, tape), tape);
  }

  void collect(const std::string& name, std::vector<ParamRef<T>>& params,
               std::vector<ParamRef<T>>& buffers) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      collect_conv(name + ".conv" + std::to_string(i + 1), convs[i], params);
      collect_norm(name + ".bn" + std::to_string(i + 1), norms[i], params, buffers);
    }
    if (proj) {
      collect_conv(name + ".proj", *proj, params);
      collect_norm(name + ".proj_bn", *proj_norm, params, buffers);
    }
  }
};

template <typename T>
ResidualBlock<T> make_residual_block(bool bottleneck, std::int64_t c_in, std::int64_t c_mid,
                                     std::int64_t c_out, std::int64_t stride, SeedStream& seeds) {
  ResidualBlock<T> block;
  block.bottleneck = bottleneck;
  if (bottleneck) {
    block.convs.push_back(make_conv_layer<T>(c_in, c_mid, 1, 1, 0, false, seeds));
    block.convs.push_back(make_conv_layer<T>(c_mid, c_mid, 3, stride, 1, false, seeds));
    block.convs.push_back(make_conv_layer<T>(c_mid, c_out, 1, 1, 0, false, seeds));
    block.norms.push_back(make_norm_layer<T>(c_mid));
    block.norms.push_back(make_norm_layer<T>(c_mid));
    block.norms.push_back(make_norm_layer<T>(c_out));
  } else {
    block.convs.push_back(make_conv_layer<T>(c_in, c_out, 3, stride, 1, false, seeds));
    block.convs.push_back(make_conv_layer<T>(c_out, c_out, 3, 1, 1, false, seeds));
    block.norms.push_back(make_norm_layer<T>(c_out));
    block.norms.push_back(make_norm_layer<T>(c_out));
  }
  if (stride != 1 || c_in != c_out) {
    block.proj = make_conv_layer<T>(c_in, c_out, 1, stride, 0, false, seeds);
    block.proj_norm = make_norm_layer<T>(c_out);
  }
  return block;
}

// Encoder stage outputs ordered coarse to fine: levels[0] is the deepest tap
// at 1/32 input resolution, the last is at 1/4. Spatial size doubles and
// channel count is non-increasing from one level to the next.
template <typename T>
struct FeaturePyramid {
  std::vector<Tensor4<T>> levels;

  const Tensor4<T>& coarsest() const { return levels.front(); }
  const Tensor4<T>& finest() const { return levels.back(); }
};

// Residual encoder: 7x7/2 conv stem with 2x2 max-pool, then four residual
// stages. One feature tap per stage.
template <typename T>
struct Encoder {
  EncoderConfig config;
  ConvLayer<T> stem;
  NormLayer<T> stem_norm;
  std::vector<std::vector<ResidualBlock<T>>> stages;
  std::array<std::int64_t, 4> stage_channels{};

  FeaturePyramid<T> forward(const Tensor4<T>& x, Mode mode, Tape<T>* tape = nullptr) {
    const auto& s = x.shape();
    if (s.c != config.in_channels) {
      throw InvalidArgument("encoder expects " + std::to_string(config.in_channels) +
                            " input channels, got " + to_string(s));
    }
    if (s.h % 32 != 0 || s.w % 32 != 0) {
      throw InvalidArgument("encoder input spatial size must be divisible by 32, got " +
                            to_string(s));
    }
    Tensor4<T> y = relu(batchnorm_forward(stem.forward(x, tape), stem_norm, mode, tape), tape);
    y = max_pool2(y, tape);

    FeaturePyramid<T> pyramid;
    pyramid.levels.resize(stages.size());
    for (std::size_t i = 0; i < stages.size(); ++i) {
      for (auto& block : stages[i]) y = block.forward(y, mode, tape);
      pyramid.levels[stages.size() - 1 - i] = y;  // deepest stage first
    }
    return pyramid;
  }

  void collect(const std::string& name, std::vector<ParamRef<T>>& params,
               std::vector<ParamRef<T>>& buffers) {
    collect_conv(name + ".stem", stem, params);
    collect_norm(name + ".stem_bn", stem_norm, params, buffers);
    for (std::size_t si = 0; si < stages.size(); ++si)
      for (std::size_t bi = 0; bi < stages[si].size(); ++bi)
        stages[si][bi].collect(
            name + ".stage" + std::to_string(si + 1) + ".block" + std::to_string(bi + 1), params,
            buffers);
  }
};

template <typename T>
Encoder<T> build_encoder(const EncoderConfig& config, SeedStream& seeds) {
  const auto plan = detail::stage_plan(config.depth);
  static constexpr std::array<std::int64_t, 4> kBaseMid = {64, 128, 256, 512};

  Encoder<T> enc;
  enc.config = config;
  const std::int64_t stem_out = detail::scaled_width(64, config.width_mult);
  enc.stem = make_conv_layer<T>(config.in_channels, stem_out, 7, 2, 3, false, seeds);
  enc.stem_norm = make_norm_layer<T>(stem_out);

  std::int64_t c_in = stem_out;
  for (int stage = 0; stage < 4; ++stage) {
    const std::int64_t mid = detail::scaled_width(kBaseMid[static_cast<std::size_t>(stage)],
                                                  config.width_mult);
    const std::int64_t out = plan.bottleneck ? mid * 4 : mid;
    std::vector<ResidualBlock<T>> blocks;
    for (int b = 0; b < plan.blocks[static_cast<std::size_t>(stage)]; ++b) {
      const std::int64_t stride = (stage > 0 && b == 0) ? 2 : 1;
      blocks.push_back(make_residual_block<T>(plan.bottleneck, c_in, mid, out, stride, seeds));
      c_in = out;
    }
    enc.stages.push_back(std::move(blocks));
    enc.stage_channels[static_cast<std::size_t>(stage)] = out;
  }
  return enc;
}

template <typename T>
Encoder<T> build_encoder(const EncoderConfig& config, std::uint64_t seed) {
  SeedStream seeds(seed);
  return build_encoder<T>(config, seeds);
}

}  // namespace cfcm
