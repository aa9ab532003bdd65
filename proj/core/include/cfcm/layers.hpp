#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfcm/ops.hpp"
#include "cfcm/rng.hpp"
#include "cfcm/tape.hpp"
#include "cfcm/tensor.hpp"

namespace cfcm {

enum class Mode { kTrain, kEval };

// Named handle to a model tensor, used for optimizer state, checkpoints and
// parameter counting.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor4<T>* tensor;
};

// Kaiming-normal weight: zero mean, variance 2 / fan_in, deterministic per
// seed. Shape is (c_out, c_in, kh, kw).
template <typename T>
Tensor4<T> he_init(Shape4 shape, std::uint64_t seed) {
  const double fan_in = static_cast<double>(shape.c * shape.h * shape.w);
  const double stddev = std::sqrt(2.0 / fan_in);
  Rng rng(seed);
  Tensor4<T> w(shape);
  auto wd = w.mutable_data();
  for (auto& v : wd) v = static_cast<T>(rng.normal() * stddev);
  return w;
}

template <typename T>
struct ConvLayer {
  Tensor4<T> weight;                 // (c_out, c_in, k, k)
  std::optional<Tensor4<T>> bias;    // (1, c_out, 1, 1)
  std::int64_t stride = 1;
  std::int64_t pad = 0;

  Tensor4<T> forward(const Tensor4<T>& x, Tape<T>* tape = nullptr) const {
    return conv2d(x, weight, bias ? &*bias : nullptr, stride, pad, tape);
  }
};

template <typename T>
ConvLayer<T> make_conv_layer(std::int64_t c_in, std::int64_t c_out, std::int64_t k,
                             std::int64_t stride, std::int64_t pad, bool with_bias,
                             SeedStream& seeds) {
  if (k != 1 && k != 3 && k != 7) {
    throw InvalidArgument("conv layer kernel size must be 1, 3 or 7, got " + std::to_string(k));
  }
  ConvLayer<T> layer;
  layer.weight = he_init<T>({c_out, c_in, k, k}, seeds.next());
  layer.weight.set_requires_grad(true);
  if (with_bias) {
    layer.bias = Tensor4<T>({1, c_out, 1, 1}, T(0));
    layer.bias->set_requires_grad(true);
  }
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

// Batch normalization state. gamma/beta are trainable; running statistics are
// buffers updated only in train mode.
template <typename T>
struct NormLayer {
  Tensor4<T> gamma, beta;                  // (1, c, 1, 1)
  Tensor4<T> running_mean, running_var;    // (1, c, 1, 1)
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
NormLayer<T> make_norm_layer(std::int64_t channels) {
  NormLayer<T> layer;
  layer.gamma = Tensor4<T>({1, channels, 1, 1}, T(1));
  layer.beta = Tensor4<T>({1, channels, 1, 1}, T(0));
  layer.gamma.set_requires_grad(true);
  layer.beta.set_requires_grad(true);
  layer.running_mean = Tensor4<T>({1, channels, 1, 1}, T(0));
  layer.running_var = Tensor4<T>({1, channels, 1, 1}, T(1));
  return layer;
}

// Train mode normalizes with per-channel batch statistics over (n, h, w),
// using biased variance, and folds them into the running estimates as
// running = (1 - momentum) * running + momentum * batch. Eval mode applies
// the running statistics as a fixed affine map.
template <typename T>
Tensor4<T> batchnorm_forward(const Tensor4<T>& x, NormLayer<T>& layer, Mode mode,
                             Tape<T>* tape = nullptr) {
  const auto& s = x.shape();
  if (s.c != layer.gamma.shape().c) {
    throw InvalidArgument("batchnorm: input " + to_string(s) + " does not match " +
                          std::to_string(layer.gamma.shape().c) + " channels");
  }
  const std::int64_t hw = s.h * s.w;
  const std::int64_t per_channel = s.n * hw;

  std::vector<double> mean(static_cast<std::size_t>(s.c), 0.0);
  std::vector<double> var(static_cast<std::size_t>(s.c), 0.0);
  const T* xd = x.data().data();

  if (mode == Mode::kTrain) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* plane = xd + (n * s.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += plane[i];
      }
      mean[static_cast<std::size_t>(c)] = acc / static_cast<double>(per_channel);
    }
    for (std::int64_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      const double m = mean[static_cast<std::size_t>(c)];
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* plane = xd + (n * s.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = plane[i] - m;
          acc += d * d;
        }
      }
      var[static_cast<std::size_t>(c)] = acc / static_cast<double>(per_channel);
    }
    auto rm = layer.running_mean.mutable_data();
    auto rv = layer.running_var.mutable_data();
    for (std::int64_t c = 0; c < s.c; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      rm[ci] = static_cast<T>((1.0 - layer.momentum) * rm[ci] + layer.momentum * mean[ci]);
      rv[ci] = static_cast<T>((1.0 - layer.momentum) * rv[ci] + layer.momentum * var[ci]);
    }
  } else {
    const auto rm = layer.running_mean.data();
    const auto rv = layer.running_var.data();
    for (std::int64_t c = 0; c < s.c; ++c) {
      mean[static_cast<std::size_t>(c)] = rm[static_cast<std::size_t>(c)];
      var[static_cast<std::size_t>(c)] = rv[static_cast<std::size_t>(c)];
    }
  }

  std::vector<double> inv_std(static_cast<std::size_t>(s.c));
  for (std::int64_t c = 0; c < s.c; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    inv_std[ci] = 1.0 / std::sqrt(var[ci] + static_cast<double>(layer.eps));
  }

  Tensor4<T> xhat(s);
  Tensor4<T> out(s);
  {
    auto hd = xhat.mutable_data();
    auto od = out.mutable_data();
    const auto gd = layer.gamma.data();
    const auto bd = layer.beta.data();
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        const std::int64_t base = (n * s.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double xh = (xd[base + i] - mean[ci]) * inv_std[ci];
          hd[static_cast<std::size_t>(base + i)] = static_cast<T>(xh);
          od[static_cast<std::size_t>(base + i)] =
              static_cast<T>(gd[ci] * xh + static_cast<double>(bd[ci]));
        }
      }
  }

  if (tape) {
    auto nx = tape->track(x);
    auto ng = tape->track(layer.gamma);
    auto nb = tape->track(layer.beta);
    if (nx || ng || nb) {
      const bool batch_stats = mode == Mode::kTrain;
      auto id = tape->add_node(
          "batchnorm",
          [nx, ng, nb, xhat, inv_std, s, hw, per_channel, batch_stats,
           gamma = layer.gamma](Tape<T>& t, const Tensor4<T>& g) {
            const T* gd = g.data().data();
            const T* hd = xhat.data().data();
            // Per-channel reductions of g and g * xhat.
            std::vector<double> sum_g(static_cast<std::size_t>(s.c), 0.0);
            std::vector<double> sum_gx(static_cast<std::size_t>(s.c), 0.0);
            for (std::int64_t n = 0; n < s.n; ++n)
              for (std::int64_t c = 0; c < s.c; ++c) {
                const auto ci = static_cast<std::size_t>(c);
                const std::int64_t base = (n * s.c + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                  sum_g[ci] += gd[base + i];
                  sum_gx[ci] += static_cast<double>(gd[base + i]) * hd[base + i];
                }
              }
            if (nb) {
              Tensor4<T> db({1, s.c, 1, 1});
              auto dd = db.mutable_data();
              for (std::int64_t c = 0; c < s.c; ++c)
                dd[static_cast<std::size_t>(c)] = static_cast<T>(sum_g[static_cast<std::size_t>(c)]);
              t.accumulate(*nb, std::move(db));
            }
            if (ng) {
              Tensor4<T> dgm({1, s.c, 1, 1});
              auto dd = dgm.mutable_data();
              for (std::int64_t c = 0; c < s.c; ++c)
                dd[static_cast<std::size_t>(c)] = static_cast<T>(sum_gx[static_cast<std::size_t>(c)]);
              t.accumulate(*ng, std::move(dgm));
            }
            if (nx) {
              Tensor4<T> dx(s);
              auto dd = dx.mutable_data();
              const auto gmd = gamma.data();
              const double inv_n = 1.0 / static_cast<double>(per_channel);
              for (std::int64_t n = 0; n < s.n; ++n)
                for (std::int64_t c = 0; c < s.c; ++c) {
                  const auto ci = static_cast<std::size_t>(c);
                  const double scale = static_cast<double>(gmd[ci]) * inv_std[ci];
                  const std::int64_t base = (n * s.c + c) * hw;
                  for (std::int64_t i = 0; i < hw; ++i) {
                    double v = gd[base + i];
                    if (batch_stats) {
                      v -= sum_g[ci] * inv_n + hd[base + i] * (sum_gx[ci] * inv_n);
                    }
                    dd[static_cast<std::size_t>(base + i)] = static_cast<T>(scale * v);
                  }
                }
              t.accumulate(*nx, std::move(dx));
            }
          });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> conv_bn_relu(const Tensor4<T>& x, const ConvLayer<T>& conv, NormLayer<T>& norm,
                        Mode mode, Tape<T>* tape = nullptr) {
  return relu(batchnorm_forward(conv.forward(x, tape), norm, mode, tape), tape);
}

template <typename T>
void collect_conv(const std::string& name, ConvLayer<T>& layer, std::vector<ParamRef<T>>& params) {
  params.push_back({name + ".weight", &layer.weight});
  if (layer.bias) params.push_back({name + ".bias", &*layer.bias});
}

template <typename T>
void collect_norm(const std::string& name, NormLayer<T>& layer, std::vector<ParamRef<T>>& params,
                  std::vector<ParamRef<T>>& buffers) {
  params.push_back({name + ".gamma", &layer.gamma});
  params.push_back({name + ".beta", &layer.beta});
  buffers.push_back({name + ".running_mean", &layer.running_mean});
  buffers.push_back({name + ".running_var", &layer.running_var});
}

}  // namespace cfcm
