#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cfcm/errors.hpp"
#include "cfcm/tape.hpp"
#include "cfcm/tensor.hpp"

namespace cfcm {

enum class UpsampleMode { kNearest, kBilinear };

namespace detail {

// C[M,N] += A[M,K] * B[K,N], all row-major.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,L] * B[N,L]^T  (dot products of contiguous rows).
template <typename T>
void gemm_abt_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t l, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * l;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * l;
      T acc = T(0);
      for (std::int64_t p = 0; p < l; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[M,N] += A[L,M]^T * B[L,N].
template <typename T>
void gemm_atb_acc(const T* a, const T* b, T* c, std::int64_t l, std::int64_t m, std::int64_t n) {
  for (std::int64_t p = 0; p < l; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Gathers conv windows of one sample into a (c_in*kh*kw) x (h_out*w_out)
// matrix with zero padding.
template <typename T>
void im2col(const T* x, std::int64_t c_in, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t h_out,
            std::int64_t w_out, T* col) {
  const std::int64_t hw_out = h_out * w_out;
  for (std::int64_t c = 0; c < c_in; ++c) {
    const T* plane = x + c * h * w;
    for (std::int64_t ky = 0; ky < kh; ++ky) {
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * hw_out;
        for (std::int64_t oy = 0; oy < h_out; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * w_out, row + (oy + 1) * w_out, T(0));
            continue;
          }
          for (std::int64_t ox = 0; ox < w_out; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            row[oy * w_out + ox] = (ix >= 0 && ix < w) ? plane[iy * w + ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
template <typename T>
void col2im_acc(const T* col, std::int64_t c_in, std::int64_t h, std::int64_t w, std::int64_t kh,
                std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t h_out,
                std::int64_t w_out, T* x) {
  const std::int64_t hw_out = h_out * w_out;
  for (std::int64_t c = 0; c < c_in; ++c) {
    T* plane = x + c * h * w;
    for (std::int64_t ky = 0; ky < kh; ++ky) {
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((c * kh + ky) * kw + kx) * hw_out;
        for (std::int64_t oy = 0; oy < h_out; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < w_out; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) plane[iy * w + ix] += row[oy * w_out + ox];
          }
        }
      }
    }
  }
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) {
    return T(1) / (T(1) + std::exp(-v));
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

// Source taps for one output axis of a bilinear resize with the
// half-pixel-center convention: src = (dst + 0.5) * in/out - 0.5, clamped.
struct BilinearTap {
  std::int64_t lo;
  std::int64_t hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

inline std::vector<BilinearTap> bilinear_taps(std::int64_t in, std::int64_t out) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::int64_t>(std::floor(src));
    taps[static_cast<std::size_t>(d)] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

template <typename T>
void check_same_shape(const Tensor4<T>& a, const Tensor4<T>& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                          " vs " + to_string(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

// 2D cross-correlation with zero padding. Output spatial size is
// floor((in + 2*pad - k) / stride) + 1. Differentiable w.r.t. x, w and bias.
template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const Tensor4<T>& w, const Tensor4<T>* bias,
                  std::int64_t stride, std::int64_t pad, Tape<T>* tape = nullptr) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.c != ws.c) {
    throw InvalidArgument("conv2d: input channels of x " + to_string(xs) +
                          " do not match kernel " + to_string(ws));
  }
  if (stride < 1) throw InvalidArgument("conv2d: stride must be >= 1");
  if (pad < 0) throw InvalidArgument("conv2d: pad must be >= 0");
  if (ws.h > xs.h + 2 * pad || ws.w > xs.w + 2 * pad) {
    throw InvalidArgument("conv2d: kernel " + to_string(ws) + " exceeds padded input " +
                          to_string(xs) + " with pad " + std::to_string(pad));
  }
  if (bias && !(bias->shape() == Shape4{1, ws.n, 1, 1})) {
    throw InvalidArgument("conv2d: bias shape " + to_string(bias->shape()) +
                          " must be (1," + std::to_string(ws.n) + ",1,1)");
  }

  const std::int64_t h_out = (xs.h + 2 * pad - ws.h) / stride + 1;
  const std::int64_t w_out = (xs.w + 2 * pad - ws.w) / stride + 1;
  const std::int64_t k = ws.c * ws.h * ws.w;
  const std::int64_t hw = h_out * w_out;

  Tensor4<T> out({xs.n, ws.n, h_out, w_out});
  std::vector<T> col(static_cast<std::size_t>(k * hw));
  {
    auto od = out.mutable_data();
    const T* xd = x.data().data();
    for (std::int64_t n = 0; n < xs.n; ++n) {
      detail::im2col(xd + n * xs.c * xs.h * xs.w, xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad,
                     h_out, w_out, col.data());
      detail::gemm_acc(w.data().data(), col.data(), od.data() + n * ws.n * hw, ws.n, k, hw);
    }
    if (bias) {
      const auto bd = bias->data();
      for (std::int64_t n = 0; n < xs.n; ++n)
        for (std::int64_t c = 0; c < ws.n; ++c) {
          T* plane = od.data() + (n * ws.n + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) plane[i] += bd[static_cast<std::size_t>(c)];
        }
    }
  }

  if (tape) {
    auto nx = tape->track(x);
    auto nw = tape->track(w);
    std::optional<typename Tape<T>::NodeId> nb;
    Tensor4<T> bias_copy;
    if (bias) {
      nb = tape->track(*bias);
      bias_copy = *bias;
    }
    if (nx || nw || nb) {
      auto id = tape->add_node(
          "conv2d", [=, xt = x, wt = w](Tape<T>& t, const Tensor4<T>& g) {
            const auto& gs = g.shape();
            const std::int64_t khw = gs.h * gs.w;
            const std::int64_t kk = wt.shape().c * wt.shape().h * wt.shape().w;
            std::vector<T> colbuf(static_cast<std::size_t>(kk * khw));
            if (nw) {
              Tensor4<T> dw(wt.shape(), T(0));
              auto dwd = dw.mutable_data();
              for (std::int64_t n = 0; n < xt.shape().n; ++n) {
                detail::im2col(xt.data().data() + n * xt.shape().c * xt.shape().h * xt.shape().w,
                               xt.shape().c, xt.shape().h, xt.shape().w, wt.shape().h,
                               wt.shape().w, stride, pad, gs.h, gs.w, colbuf.data());
                detail::gemm_abt_acc(g.data().data() + n * gs.c * khw, colbuf.data(), dwd.data(),
                                     gs.c, khw, kk);
              }
              t.accumulate(*nw, std::move(dw));
            }
            if (nx) {
              Tensor4<T> dx(xt.shape(), T(0));
              auto dxd = dx.mutable_data();
              for (std::int64_t n = 0; n < xt.shape().n; ++n) {
                std::fill(colbuf.begin(), colbuf.end(), T(0));
                detail::gemm_atb_acc(wt.data().data(), g.data().data() + n * gs.c * khw,
                                     colbuf.data(), gs.c, kk, khw);
                detail::col2im_acc(colbuf.data(), xt.shape().c, xt.shape().h, xt.shape().w,
                                   wt.shape().h, wt.shape().w, stride, pad, gs.h, gs.w,
                                   dxd.data() + n * xt.shape().c * xt.shape().h * xt.shape().w);
              }
              t.accumulate(*nx, std::move(dx));
            }
            if (nb) {
              Tensor4<T> db(bias_copy.shape(), T(0));
              auto dbd = db.mutable_data();
              const T* gd = g.data().data();
              for (std::int64_t n = 0; n < gs.n; ++n)
                for (std::int64_t c = 0; c < gs.c; ++c) {
                  T acc = T(0);
                  const T* plane = gd + (n * gs.c + c) * khw;
                  for (std::int64_t i = 0; i < khw; ++i) acc += plane[i];
                  dbd[static_cast<std::size_t>(c)] += acc;
                }
              t.accumulate(*nb, std::move(db));
            }
          });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

// Direct-loop convolution, forward only. Slow path kept for cross-checking
// the im2col route.
template <typename T>
Tensor4<T> conv2d_reference(const Tensor4<T>& x, const Tensor4<T>& w, const Tensor4<T>* bias,
                            std::int64_t stride, std::int64_t pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const std::int64_t h_out = (xs.h + 2 * pad - ws.h) / stride + 1;
  const std::int64_t w_out = (xs.w + 2 * pad - ws.w) / stride + 1;
  Tensor4<T> out({xs.n, ws.n, h_out, w_out});
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t co = 0; co < ws.n; ++co)
      for (std::int64_t oy = 0; oy < h_out; ++oy)
        for (std::int64_t ox = 0; ox < w_out; ++ox) {
          T acc = bias ? bias->at(0, co, 0, 0) : T(0);
          for (std::int64_t ci = 0; ci < xs.c; ++ci)
            for (std::int64_t ky = 0; ky < ws.h; ++ky)
              for (std::int64_t kx = 0; kx < ws.w; ++kx) {
                const std::int64_t iy = oy * stride - pad + ky;
                const std::int64_t ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += x.at(n, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          out.at_mut(n, co, oy, ox) = acc;
        }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

// 2x2 max pooling, stride 2. Backward routes the gradient to the first
// occurrence of the window maximum in row-major order.
template <typename T>
Tensor4<T> max_pool2(const Tensor4<T>& x, Tape<T>* tape = nullptr) {
  const auto& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw InvalidArgument("max_pool2: spatial size must be even, got " + to_string(s));
  }
  const std::int64_t ho = s.h / 2, wo = s.w / 2;
  Tensor4<T> out({s.n, s.c, ho, wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  {
    auto od = out.mutable_data();
    const T* xd = x.data().data();
    std::int64_t oi = 0;
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T* plane = xd + (n * s.c + c) * s.h * s.w;
        for (std::int64_t oy = 0; oy < ho; ++oy)
          for (std::int64_t ox = 0; ox < wo; ++ox, ++oi) {
            std::int64_t best = (2 * oy) * s.w + 2 * ox;
            T bv = plane[best];
            const std::int64_t cand[3] = {(2 * oy) * s.w + 2 * ox + 1,
                                          (2 * oy + 1) * s.w + 2 * ox,
                                          (2 * oy + 1) * s.w + 2 * ox + 1};
            for (const auto ci : cand) {
              if (plane[ci] > bv) {
                bv = plane[ci];
                best = ci;
              }
            }
            od[static_cast<std::size_t>(oi)] = bv;
            argmax[static_cast<std::size_t>(oi)] = (n * s.c + c) * s.h * s.w + best;
          }
      }
  }
  if (tape) {
    if (auto nx = tape->track(x)) {
      auto id = tape->add_node(
          "max_pool2", [nx, argmax = std::move(argmax), xshape = s](Tape<T>& t, const Tensor4<T>& g) {
            Tensor4<T> dx(xshape, T(0));
            auto dxd = dx.mutable_data();
            const auto gd = g.data();
            for (std::size_t i = 0; i < gd.size(); ++i)
              dxd[static_cast<std::size_t>(argmax[i])] += gd[i];
            t.accumulate(*nx, std::move(dx));
          });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Upsampling

// Integer-factor upsampling. Nearest replicates source cells; bilinear uses
// half-pixel source centers (src = (dst+0.5)/factor - 0.5, clamped).
template <typename T>
Tensor4<T> upsample(const Tensor4<T>& x, std::int64_t factor, UpsampleMode mode,
                    Tape<T>* tape = nullptr) {
  if (factor < 2) throw InvalidArgument("upsample: factor must be >= 2");
  const auto& s = x.shape();
  const std::int64_t ho = s.h * factor, wo = s.w * factor;
  Tensor4<T> out({s.n, s.c, ho, wo});

  if (mode == UpsampleMode::kNearest) {
    auto od = out.mutable_data();
    const T* xd = x.data().data();
    for (std::int64_t p = 0; p < s.n * s.c; ++p) {
      const T* src = xd + p * s.h * s.w;
      T* dst = od.data() + p * ho * wo;
      for (std::int64_t y = 0; y < ho; ++y)
        for (std::int64_t x2 = 0; x2 < wo; ++x2)
          dst[y * wo + x2] = src[(y / factor) * s.w + x2 / factor];
    }
    if (tape) {
      if (auto nx = tape->track(x)) {
        auto id = tape->add_node("upsample_nearest", [nx, s, factor](Tape<T>& t, const Tensor4<T>& g) {
          Tensor4<T> dx(s, T(0));
          auto dxd = dx.mutable_data();
          const T* gd = g.data().data();
          const std::int64_t ho2 = s.h * factor, wo2 = s.w * factor;
          for (std::int64_t p = 0; p < s.n * s.c; ++p) {
            T* dst = dxd.data() + p * s.h * s.w;
            const T* src = gd + p * ho2 * wo2;
            for (std::int64_t y = 0; y < ho2; ++y)
              for (std::int64_t x2 = 0; x2 < wo2; ++x2)
                dst[(y / factor) * s.w + x2 / factor] += src[y * wo2 + x2];
          }
          t.accumulate(*nx, std::move(dx));
        });
        out.bind_to_tape(tape->serial(), id);
      }
    }
    return out;
  }

  const auto ty = detail::bilinear_taps(s.h, ho);
  const auto tx = detail::bilinear_taps(s.w, wo);
  {
    auto od = out.mutable_data();
    const T* xd = x.data().data();
    for (std::int64_t p = 0; p < s.n * s.c; ++p) {
      const T* src = xd + p * s.h * s.w;
      T* dst = od.data() + p * ho * wo;
      for (std::int64_t y = 0; y < ho; ++y) {
        const auto& ry = ty[static_cast<std::size_t>(y)];
        for (std::int64_t x2 = 0; x2 < wo; ++x2) {
          const auto& rx = tx[static_cast<std::size_t>(x2)];
          const double v00 = src[ry.lo * s.w + rx.lo];
          const double v01 = src[ry.lo * s.w + rx.hi];
          const double v10 = src[ry.hi * s.w + rx.lo];
          const double v11 = src[ry.hi * s.w + rx.hi];
          const double top = v00 + (v01 - v00) * rx.w_hi;
          const double bot = v10 + (v11 - v10) * rx.w_hi;
          dst[y * wo + x2] = static_cast<T>(top + (bot - top) * ry.w_hi);
        }
      }
    }
  }
  if (tape) {
    if (auto nx = tape->track(x)) {
      auto id = tape->add_node("upsample_bilinear", [nx, s, ty, tx, ho, wo](Tape<T>& t,
                                                                            const Tensor4<T>& g) {
        Tensor4<T> dx(s, T(0));
        auto dxd = dx.mutable_data();
        const T* gd = g.data().data();
        for (std::int64_t p = 0; p < s.n * s.c; ++p) {
          T* dst = dxd.data() + p * s.h * s.w;
          const T* src = gd + p * ho * wo;
          for (std::int64_t y = 0; y < ho; ++y) {
            const auto& ry = ty[static_cast<std::size_t>(y)];
            for (std::int64_t x2 = 0; x2 < wo; ++x2) {
              const auto& rx = tx[static_cast<std::size_t>(x2)];
              const double gv = src[y * wo + x2];
              dst[ry.lo * s.w + rx.lo] += static_cast<T>(gv * (1.0 - ry.w_hi) * (1.0 - rx.w_hi));
              dst[ry.lo * s.w + rx.hi] += static_cast<T>(gv * (1.0 - ry.w_hi) * rx.w_hi);
              dst[ry.hi * s.w + rx.lo] += static_cast<T>(gv * ry.w_hi * (1.0 - rx.w_hi));
              dst[ry.hi * s.w + rx.hi] += static_cast<T>(gv * ry.w_hi * rx.w_hi);
            }
          }
        }
        t.accumulate(*nx, std::move(dx));
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> upsample2(const Tensor4<T>& x, UpsampleMode mode, Tape<T>* tape = nullptr) {
  return upsample(x, 2, mode, tape);
}

// ---------------------------------------------------------------------------
// Channel concat / slice

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b, Tape<T>* tape = nullptr) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw InvalidArgument("concat_channels: batch/spatial mismatch " + to_string(as) + " vs " +
                          to_string(bs));
  }
  Tensor4<T> out({as.n, as.c + bs.c, as.h, as.w});
  {
    auto od = out.mutable_data();
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    const std::int64_t hw = as.h * as.w;
    for (std::int64_t n = 0; n < as.n; ++n) {
      std::copy(ad + n * as.c * hw, ad + (n + 1) * as.c * hw, od.data() + n * (as.c + bs.c) * hw);
      std::copy(bd + n * bs.c * hw, bd + (n + 1) * bs.c * hw,
                od.data() + (n * (as.c + bs.c) + as.c) * hw);
    }
  }
  if (tape) {
    auto na = tape->track(a);
    auto nb = tape->track(b);
    if (na || nb) {
      auto id = tape->add_node("concat_channels", [na, nb, as, bs](Tape<T>& t, const Tensor4<T>& g) {
        const std::int64_t hw = as.h * as.w;
        const T* gd = g.data().data();
        if (na) {
          Tensor4<T> da(as);
          auto dd = da.mutable_data();
          for (std::int64_t n = 0; n < as.n; ++n)
            std::copy(gd + n * (as.c + bs.c) * hw, gd + (n * (as.c + bs.c) + as.c) * hw,
                      dd.data() + n * as.c * hw);
          t.accumulate(*na, std::move(da));
        }
        if (nb) {
          Tensor4<T> db(bs);
          auto dd = db.mutable_data();
          for (std::int64_t n = 0; n < bs.n; ++n)
            std::copy(gd + (n * (as.c + bs.c) + as.c) * hw, gd + (n + 1) * (as.c + bs.c) * hw,
                      dd.data() + n * bs.c * hw);
          t.accumulate(*nb, std::move(db));
        }
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

// Contiguous channel range [c0, c0+count). Backward scatters into the range.
template <typename T>
Tensor4<T> slice_channels(const Tensor4<T>& x, std::int64_t c0, std::int64_t count,
                          Tape<T>* tape = nullptr) {
  const auto& s = x.shape();
  if (c0 < 0 || count < 1 || c0 + count > s.c) {
    throw InvalidArgument("slice_channels: range [" + std::to_string(c0) + "," +
                          std::to_string(c0 + count) + ") out of " + to_string(s));
  }
  Tensor4<T> out({s.n, count, s.h, s.w});
  const std::int64_t hw = s.h * s.w;
  {
    auto od = out.mutable_data();
    const T* xd = x.data().data();
    for (std::int64_t n = 0; n < s.n; ++n)
      std::copy(xd + (n * s.c + c0) * hw, xd + (n * s.c + c0 + count) * hw,
                od.data() + n * count * hw);
  }
  if (tape) {
    if (auto nx = tape->track(x)) {
      auto id = tape->add_node("slice_channels", [nx, s, c0, count, hw](Tape<T>& t, const Tensor4<T>& g) {
        Tensor4<T> dx(s, T(0));
        auto dd = dx.mutable_data();
        const T* gd = g.data().data();
        for (std::int64_t n = 0; n < s.n; ++n)
          std::copy(gd + n * count * hw, gd + (n + 1) * count * hw,
                    dd.data() + (n * s.c + c0) * hw);
        t.accumulate(*nx, std::move(dx));
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename T>
Tensor4<T> relu(const Tensor4<T>& x, Tape<T>* tape = nullptr) {
  Tensor4<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
  if (tape) {
    if (auto nx = tape->track(x)) {
      auto id = tape->add_node("relu", [nx, xt = x](Tape<T>& t, const Tensor4<T>& g) {
        Tensor4<T> dx(xt.shape());
        auto dd = dx.mutable_data();
        const auto xd2 = xt.data();
        const auto gd = g.data();
        for (std::size_t i = 0; i < gd.size(); ++i) dd[i] = xd2[i] > T(0) ? gd[i] : T(0);
        t.accumulate(*nx, std::move(dx));
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> sigmoid(const Tensor4<T>& x, Tape<T>* tape = nullptr) {
  Tensor4<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = detail::stable_sigmoid(xd[i]);
  if (tape) {
    if (auto nx = tape->track(x)) {
      auto id = tape->add_node("sigmoid", [nx, yt = out](Tape<T>& t, const Tensor4<T>& g) {
        Tensor4<T> dx(yt.shape());
        auto dd = dx.mutable_data();
        const auto yd = yt.data();
        const auto gd = g.data();
        for (std::size_t i = 0; i < gd.size(); ++i) dd[i] = gd[i] * yd[i] * (T(1) - yd[i]);
        t.accumulate(*nx, std::move(dx));
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> tanh(const Tensor4<T>& x, Tape<T>* tape = nullptr) {
  Tensor4<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = std::tanh(xd[i]);
  if (tape) {
    if (auto nx = tape->track(x)) {
      auto id = tape->add_node("tanh", [nx, yt = out](Tape<T>& t, const Tensor4<T>& g) {
        Tensor4<T> dx(yt.shape());
        auto dd = dx.mutable_data();
        const auto yd = yt.data();
        const auto gd = g.data();
        for (std::size_t i = 0; i < gd.size(); ++i) dd[i] = gd[i] * (T(1) - yd[i] * yd[i]);
        t.accumulate(*nx, std::move(dx));
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> add(const Tensor4<T>& x, const Tensor4<T>& y, Tape<T>* tape = nullptr) {
  detail::check_same_shape(x, y, "add");
  Tensor4<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  const auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] + yd[i];
  if (tape) {
    auto nx = tape->track(x);
    auto ny = tape->track(y);
    if (nx || ny) {
      auto id = tape->add_node("add", [nx, ny](Tape<T>& t, const Tensor4<T>& g) {
        if (nx) t.accumulate(*nx, g.clone());
        if (ny) t.accumulate(*ny, g.clone());
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> mul(const Tensor4<T>& x, const Tensor4<T>& y, Tape<T>* tape = nullptr) {
  detail::check_same_shape(x, y, "mul");
  Tensor4<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  const auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] * yd[i];
  if (tape) {
    auto nx = tape->track(x);
    auto ny = tape->track(y);
    if (nx || ny) {
      auto id = tape->add_node("mul", [nx, ny, xt = x, yt = y](Tape<T>& t, const Tensor4<T>& g) {
        const auto gd = g.data();
        if (nx) {
          Tensor4<T> dx(xt.shape());
          auto dd = dx.mutable_data();
          const auto od2 = yt.data();
          for (std::size_t i = 0; i < gd.size(); ++i) dd[i] = gd[i] * od2[i];
          t.accumulate(*nx, std::move(dx));
        }
        if (ny) {
          Tensor4<T> dy(yt.shape());
          auto dd = dy.mutable_data();
          const auto od2 = xt.data();
          for (std::size_t i = 0; i < gd.size(); ++i) dd[i] = gd[i] * od2[i];
          t.accumulate(*ny, std::move(dy));
        }
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { kSum, kMean };

template <typename T>
Tensor4<T> reduce(Reduce kind, const Tensor4<T>& x, Tape<T>* tape = nullptr) {
  double acc = 0.0;
  for (const T v : x.data()) acc += static_cast<double>(v);
  const double denom = kind == Reduce::kMean ? static_cast<double>(x.numel()) : 1.0;
  Tensor4<T> out({1, 1, 1, 1});
  out.mutable_data()[0] = static_cast<T>(acc / denom);
  if (tape) {
    if (auto nx = tape->track(x)) {
      auto id = tape->add_node("reduce", [nx, shape = x.shape(), denom](Tape<T>& t, const Tensor4<T>& g) {
        const T gv = g.data()[0];
        Tensor4<T> dx(shape, static_cast<T>(static_cast<double>(gv) / denom));
        t.accumulate(*nx, std::move(dx));
      });
      out.bind_to_tape(tape->serial(), id);
    }
  }
  return out;
}

template <typename T>
Tensor4<T> reduce_sum(const Tensor4<T>& x, Tape<T>* tape = nullptr) {
  return reduce(Reduce::kSum, x, tape);
}

template <typename T>
Tensor4<T> reduce_mean(const Tensor4<T>& x, Tape<T>* tape = nullptr) {
  return reduce(Reduce::kMean, x, tape);
}

}  // namespace cfcm
