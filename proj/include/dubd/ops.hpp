#pragma once

// Differentiable tensor operations.
//
// Every op is a pure function of its inputs. When a Tape of the same
// scalar type is recording and some input requires grad, the op appends
// its backward rule to that tape.
//
// Broadcasting for binary elementwise ops (add, sub, mul) is limited to:
//   * identical shapes;
//   * a 1xCxHxW operand against an NxCxHxW operand (repeated over batch);
//   * a 1x1x1x1 scalar operand against any shape.
// Anything else is a ShapeError.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dubd/tensor.hpp"

namespace dubd::ops {

namespace detail {

using dubd::detail::record;
using dubd::detail::TensorImpl;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

struct ConvGeom {
  int n, cin, h, w;
  int cout, k, stride, pad;
  int hp, wp, ho, wo;
};

inline ConvGeom conv_geometry(const Shape& x, const Shape& wt, int stride, int pad) {
  ConvGeom g{};
  g.n = x.n;
  g.cin = x.c;
  g.h = x.h;
  g.w = x.w;
  g.cout = wt.n;
  g.k = wt.h;
  g.stride = stride;
  g.pad = pad;
  g.hp = x.h + 2 * pad;
  g.wp = x.w + 2 * pad;
  g.ho = (g.hp - g.k) / stride + 1;
  g.wo = (g.wp - g.k) / stride + 1;
  return g;
}

/// Zero-padded copy of one batch item, widened to the accumulator type.
template <typename T>
void pad_item(const T* x, const ConvGeom& g, std::vector<double>& dst) {
  dst.assign(static_cast<std::size_t>(g.cin) * g.hp * g.wp, 0.0);
  for (int c = 0; c < g.cin; ++c) {
    for (int y = 0; y < g.h; ++y) {
      const T* src = x + (static_cast<std::size_t>(c) * g.h + y) * g.w;
      double* d = dst.data() + (static_cast<std::size_t>(c) * g.hp + y + g.pad) * g.wp + g.pad;
      for (int xx = 0; xx < g.w; ++xx) d[xx] = static_cast<double>(src[xx]);
    }
  }
}

// Stride-1 kernels work on a "padded-width" output layout: output pixel
// (oy, ox) lives at oy * wp + ox, so every tap is one contiguous shifted
// axpy over L = (ho - 1) * wp + wo elements. Columns ox >= wo are scratch.

template <int K>
void conv_fwd_s1(const ConvGeom& g, const double* pin, const double* wd, double* acc) {
  const std::size_t L = static_cast<std::size_t>(g.ho - 1) * g.wp + g.wo;
  const std::size_t plane = static_cast<std::size_t>(g.hp) * g.wp;
  std::array<std::size_t, K * K> off{};
  for (int ky = 0; ky < K; ++ky)
    for (int kx = 0; kx < K; ++kx) off[ky * K + kx] = static_cast<std::size_t>(ky) * g.wp + kx;
  for (int co = 0; co < g.cout; ++co) {
    double* a = acc + co * L;
    std::fill(a, a + L, 0.0);
    for (int ci = 0; ci < g.cin; ++ci) {
      const double* p = pin + ci * plane;
      std::array<double, K * K> wt{};
      for (int t = 0; t < K * K; ++t) wt[t] = wd[(static_cast<std::size_t>(co) * g.cin + ci) * K * K + t];
      for (std::size_t i = 0; i < L; ++i) {
        double s = a[i];
        for (int t = 0; t < K * K; ++t) s += wt[t] * p[i + off[t]];
        a[i] = s;
      }
    }
  }
}

template <int K>
void conv_bwd_input_s1(const ConvGeom& g, const double* gfull, const double* wd, double* gpin) {
  const std::size_t L = static_cast<std::size_t>(g.ho - 1) * g.wp + g.wo;
  const std::size_t plane = static_cast<std::size_t>(g.hp) * g.wp;
  const std::size_t margin = static_cast<std::size_t>(K - 1) * g.wp + (K - 1);
  std::array<std::size_t, K * K> off{};
  for (int ky = 0; ky < K; ++ky)
    for (int kx = 0; kx < K; ++kx) off[ky * K + kx] = static_cast<std::size_t>(ky) * g.wp + kx;
  // gbuf[co] = zeros(margin) ++ gfull[co] ++ zeros, so gbuf[margin + j - off] is always valid.
  const std::size_t span = margin + plane;
  std::vector<double> gbuf(static_cast<std::size_t>(g.cout) * span, 0.0);
  for (int co = 0; co < g.cout; ++co) {
    std::copy(gfull + co * L, gfull + (co + 1) * L, gbuf.begin() + static_cast<std::ptrdiff_t>(co * span + margin));
  }
  for (int ci = 0; ci < g.cin; ++ci) {
    double* gp = gpin + ci * plane;
    for (int co = 0; co < g.cout; ++co) {
      const double* gb = gbuf.data() + co * span + margin;
      std::array<double, K * K> wt{};
      for (int t = 0; t < K * K; ++t) wt[t] = wd[(static_cast<std::size_t>(co) * g.cin + ci) * K * K + t];
      for (std::size_t j = 0; j < plane; ++j) {
        double s = gp[j];
        for (int t = 0; t < K * K; ++t) s += wt[t] * gb[static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(off[t])];
        gp[j] = s;
      }
    }
  }
}

template <int K>
void conv_bwd_weight_s1(const ConvGeom& g, const double* gfull, const double* pin, double* gw) {
  const std::size_t L = static_cast<std::size_t>(g.ho - 1) * g.wp + g.wo;
  const std::size_t plane = static_cast<std::size_t>(g.hp) * g.wp;
  std::array<std::size_t, K * K> off{};
  for (int ky = 0; ky < K; ++ky)
    for (int kx = 0; kx < K; ++kx) off[ky * K + kx] = static_cast<std::size_t>(ky) * g.wp + kx;
  for (int co = 0; co < g.cout; ++co) {
    const double* gr = gfull + co * L;
    for (int ci = 0; ci < g.cin; ++ci) {
      const double* p = pin + ci * plane;
      double* dst = gw + (static_cast<std::size_t>(co) * g.cin + ci) * K * K;
      for (int t = 0; t < K * K; ++t) {
        const double* pt = p + off[t];
        double s = 0.0;
#pragma omp simd reduction(+ : s)
        for (std::size_t i = 0; i < L; ++i) s += gr[i] * pt[i];
        dst[t] += s;
      }
    }
  }
}

// Generic path for strided (or unusual kernel size) convolutions. Output
// is dense ho x wo.

inline void conv_fwd_generic(const ConvGeom& g, const double* pin, const double* wd, double* acc) {
  const std::size_t plane = static_cast<std::size_t>(g.hp) * g.wp;
  const std::size_t P = static_cast<std::size_t>(g.ho) * g.wo;
  for (int co = 0; co < g.cout; ++co) {
    double* a = acc + co * P;
    std::fill(a, a + P, 0.0);
    for (int ci = 0; ci < g.cin; ++ci) {
      const double* p = pin + ci * plane;
      for (int ky = 0; ky < g.k; ++ky) {
        for (int kx = 0; kx < g.k; ++kx) {
          const double wv = wd[((static_cast<std::size_t>(co) * g.cin + ci) * g.k + ky) * g.k + kx];
          for (int oy = 0; oy < g.ho; ++oy) {
            const double* src = p + static_cast<std::size_t>(oy * g.stride + ky) * g.wp + kx;
            double* dst = a + static_cast<std::size_t>(oy) * g.wo;
            for (int ox = 0; ox < g.wo; ++ox) dst[ox] += wv * src[ox * g.stride];
          }
        }
      }
    }
  }
}

inline void conv_bwd_generic(const ConvGeom& g, const double* gout, const double* pin, const double* wd,
                             double* gpin, double* gw) {
  const std::size_t plane = static_cast<std::size_t>(g.hp) * g.wp;
  const std::size_t P = static_cast<std::size_t>(g.ho) * g.wo;
  for (int co = 0; co < g.cout; ++co) {
    const double* go = gout + co * P;
    for (int ci = 0; ci < g.cin; ++ci) {
      const double* p = pin + ci * plane;
      double* gp = gpin + ci * plane;
      for (int ky = 0; ky < g.k; ++ky) {
        for (int kx = 0; kx < g.k; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(co) * g.cin + ci) * g.k + ky) * g.k + kx;
          const double wv = wd[widx];
          double s = 0.0;
          for (int oy = 0; oy < g.ho; ++oy) {
            const std::size_t row = static_cast<std::size_t>(oy * g.stride + ky) * g.wp + kx;
            const double* gr = go + static_cast<std::size_t>(oy) * g.wo;
            for (int ox = 0; ox < g.wo; ++ox) {
              const std::size_t at = row + static_cast<std::size_t>(ox) * g.stride;
              s += gr[ox] * p[at];
              gp[at] += wv * gr[ox];
            }
          }
          gw[widx] += s;
        }
      }
    }
  }
}

template <typename T>
std::vector<double> widen(std::span<const T> v) {
  return std::vector<double>(v.begin(), v.end());
}

enum class Broadcast { Same, BOverBatch, AOverBatch, BScalar, AScalar };

inline Broadcast classify(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::Same;
  if (b.is_scalar()) return Broadcast::BScalar;
  if (a.is_scalar()) return Broadcast::AScalar;
  if (b.n == 1 && a.c == b.c && a.h == b.h && a.w == b.w) return Broadcast::BOverBatch;
  if (a.n == 1 && a.c == b.c && a.h == b.h && a.w == b.w) return Broadcast::AOverBatch;
  throw ShapeError(std::string(op) + ": cannot broadcast " + a.str() + " with " + b.str());
}

struct BroadcastIndex {
  Broadcast kind;
  std::size_t per;  // C*H*W of the output
  [[nodiscard]] std::size_t a(std::size_t i) const {
    switch (kind) {
      case Broadcast::AOverBatch: return i % per;
      case Broadcast::AScalar: return 0;
      default: return i;
    }
  }
  [[nodiscard]] std::size_t b(std::size_t i) const {
    switch (kind) {
      case Broadcast::BOverBatch: return i % per;
      case Broadcast::BScalar: return 0;
      default: return i;
    }
  }
};

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, DA da, DB db) {
  const Broadcast kind = classify(a.shape(), b.shape(), name);
  const Shape out_shape = (kind == Broadcast::AOverBatch || kind == Broadcast::AScalar) ? b.shape() : a.shape();
  const BroadcastIndex bi{kind, static_cast<std::size_t>(out_shape.c) * out_shape.plane()};
  auto out = Tensor<T>::zeros(out_shape);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[bi.a(i)], bv[bi.b(i)]);
  ImplPtr<T> pa = a.handle(), pb = b.handle(), po = out.handle();
  record<T>({&a, &b}, out, [pa, pb, po, bi, da, db] {
    const auto& g = po->grad;
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        pa->grad[bi.a(i)] += da(pa->data[bi.a(i)], pb->data[bi.b(i)]) * g[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        pb->grad[bi.b(i)] += db(pa->data[bi.a(i)], pb->data[bi.b(i)]) * g[i];
    }
  });
  return out;
}

}  // namespace detail

/// 2-D cross-correlation with zero padding.
///
/// `weight` is Cout x Cin x k x k, `bias` holds Cout values (any shape with
/// Cout elements). Sums are accumulated in double per output element.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride = 1,
                 int padding = 0) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (padding < 0) throw ShapeError("conv2d: padding must be non-negative");
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square, got " + ws.str());
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                     std::to_string(ws.c));
  }
  if (bias.numel() != static_cast<std::size_t>(ws.n)) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " elements, expected " +
                     std::to_string(ws.n));
  }
  if (xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  x.check_finite("conv2d input");
  weight.check_finite("conv2d weight");
  bias.check_finite("conv2d bias");

  const detail::ConvGeom g = detail::conv_geometry(xs, ws, stride, padding);
  const bool fast = stride == 1 && (g.k == 1 || g.k == 3);
  const std::size_t L = fast ? static_cast<std::size_t>(g.ho - 1) * g.wp + g.wo
                             : static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t in_per = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t out_plane = static_cast<std::size_t>(g.ho) * g.wo;

  auto out = Tensor<T>::zeros(Shape{g.n, g.cout, g.ho, g.wo});
  const std::vector<double> wd = detail::widen(weight.data());
  const std::vector<double> bd = detail::widen(bias.data());
  std::vector<double> pin;
  std::vector<double> acc(static_cast<std::size_t>(g.cout) * L);
  auto xo = x.data();
  auto ov = out.data();
  const std::size_t row = fast ? static_cast<std::size_t>(g.wp) : static_cast<std::size_t>(g.wo);
  for (int n = 0; n < g.n; ++n) {
    detail::pad_item(xo.data() + n * in_per, g, pin);
    if (fast && g.k == 3) {
      detail::conv_fwd_s1<3>(g, pin.data(), wd.data(), acc.data());
    } else if (fast) {
      detail::conv_fwd_s1<1>(g, pin.data(), wd.data(), acc.data());
    } else {
      detail::conv_fwd_generic(g, pin.data(), wd.data(), acc.data());
    }
    for (int co = 0; co < g.cout; ++co) {
      T* dst = ov.data() + (static_cast<std::size_t>(n) * g.cout + co) * out_plane;
      const double* a = acc.data() + co * L;
      for (int oy = 0; oy < g.ho; ++oy)
        for (int ox = 0; ox < g.wo; ++ox)
          dst[oy * g.wo + ox] = static_cast<T>(a[oy * row + ox] + bd[co]);
    }
  }

  detail::ImplPtr<T> px = x.handle(), pw = weight.handle(), pb = bias.handle(), po = out.handle();
  detail::record<T>({&x, &weight, &bias}, out, [px, pw, pb, po, g, fast, L, in_per, out_plane, row] {
    const std::vector<double> wd = detail::widen(std::span<const T>(pw->data));
    std::vector<double> gw(pw->data.size(), 0.0);
    std::vector<double> gb(pb->data.size(), 0.0);
    std::vector<double> pin;
    std::vector<double> gfull(static_cast<std::size_t>(g.cout) * L);
    const std::size_t plane = static_cast<std::size_t>(g.hp) * g.wp;
    std::vector<double> gpin(static_cast<std::size_t>(g.cin) * plane);
    const bool need_x = px->requires_grad;
    if (need_x) px->ensure_grad();
    for (int n = 0; n < g.n; ++n) {
      std::fill(gfull.begin(), gfull.end(), 0.0);
      for (int co = 0; co < g.cout; ++co) {
        const T* src = po->grad.data() + (static_cast<std::size_t>(n) * g.cout + co) * out_plane;
        double* d = gfull.data() + co * L;
        double s = 0.0;
        for (int oy = 0; oy < g.ho; ++oy) {
          for (int ox = 0; ox < g.wo; ++ox) {
            const double v = static_cast<double>(src[oy * g.wo + ox]);
            d[oy * row + ox] = v;
            s += v;
          }
        }
        gb[co] += s;
      }
      detail::pad_item(px->data.data() + n * in_per, g, pin);
      std::fill(gpin.begin(), gpin.end(), 0.0);
      if (fast && g.k == 3) {
        detail::conv_bwd_weight_s1<3>(g, gfull.data(), pin.data(), gw.data());
        if (need_x) detail::conv_bwd_input_s1<3>(g, gfull.data(), wd.data(), gpin.data());
      } else if (fast) {
        detail::conv_bwd_weight_s1<1>(g, gfull.data(), pin.data(), gw.data());
        if (need_x) detail::conv_bwd_input_s1<1>(g, gfull.data(), wd.data(), gpin.data());
      } else {
        detail::conv_bwd_generic(g, gfull.data(), pin.data(), wd.data(), gpin.data(), gw.data());
      }
      if (need_x) {
        T* gx = px->grad.data() + n * in_per;
        for (int c = 0; c < g.cin; ++c)
          for (int y = 0; y < g.h; ++y)
            for (int xx = 0; xx < g.w; ++xx)
              gx[(static_cast<std::size_t>(c) * g.h + y) * g.w + xx] +=
                  static_cast<T>(gpin[c * plane + static_cast<std::size_t>(y + g.pad) * g.wp + xx + g.pad]);
      }
    }
    if (pw->requires_grad) {
      pw->ensure_grad();
      for (std::size_t i = 0; i < gw.size(); ++i) pw->grad[i] += static_cast<T>(gw[i]);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) pb->grad[i] += static_cast<T>(gb[i]);
    }
  });
  return out;
}

/// Bilinear resize with half-pixel centers: the source coordinate of output
/// index d is (d + 0.5) * in / out - 0.5, clamped to [0, in - 1].
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be positive");
  const Shape s = x.shape();
  struct Tap {
    int i0, i1;
    double f;
  };
  auto axis = [](int in, int out) {
    std::vector<Tap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int d = 0; d < out; ++d) {
      double src = (d + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in - 1);
      taps[d] = Tap{i0, i1, src - i0};
    }
    return taps;
  };
  const auto ty = axis(s.h, out_h);
  const auto tx = axis(s.w, out_w);
  const Shape os{s.n, s.c, out_h, out_w};
  auto out = Tensor<T>::zeros(os);
  auto xv = x.data();
  auto ov = out.data();
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * s.plane();
    T* dst = ov.data() + p * os.plane();
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[oy];
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[ox];
        const double top = (1 - b.f) * src[a.i0 * s.w + b.i0] + b.f * src[a.i0 * s.w + b.i1];
        const double bot = (1 - b.f) * src[a.i1 * s.w + b.i0] + b.f * src[a.i1 * s.w + b.i1];
        dst[oy * out_w + ox] = static_cast<T>((1 - a.f) * top + a.f * bot);
      }
    }
  }
  detail::ImplPtr<T> px = x.handle(), po = out.handle();
  detail::record<T>({&x}, out, [px, po, ty, tx, s, os, planes] {
    px->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p) {
      T* gx = px->grad.data() + p * s.plane();
      const T* go = po->grad.data() + p * os.plane();
      for (int oy = 0; oy < os.h; ++oy) {
        const Tap& a = ty[oy];
        for (int ox = 0; ox < os.w; ++ox) {
          const Tap& b = tx[ox];
          const double g = go[oy * os.w + ox];
          gx[a.i0 * s.w + b.i0] += static_cast<T>(g * (1 - a.f) * (1 - b.f));
          gx[a.i0 * s.w + b.i1] += static_cast<T>(g * (1 - a.f) * b.f);
          gx[a.i1 * s.w + b.i0] += static_cast<T>(g * a.f * (1 - b.f));
          gx[a.i1 * s.w + b.i1] += static_cast<T>(g * a.f * b.f);
        }
      }
    }
  });
  return out;
}

/// Mean over k x k windows placed every `stride` pixels. The windows must
/// tile the input exactly: (H - k) and (W - k) divisible by stride.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int k, int stride) {
  const Shape s = x.shape();
  if (k < 1 || stride < 1) throw ShapeError("avg_pool: kernel and stride must be positive");
  if (s.h < k || s.w < k || (s.h - k) % stride != 0 || (s.w - k) % stride != 0) {
    throw ShapeError("avg_pool: " + std::to_string(k) + "x" + std::to_string(k) + " windows with stride " +
                     std::to_string(stride) + " do not tile " + s.str());
  }
  const Shape os{s.n, s.c, (s.h - k) / stride + 1, (s.w - k) / stride + 1};
  auto out = Tensor<T>::zeros(os);
  auto xv = x.data();
  auto ov = out.data();
  const double inv = 1.0 / (static_cast<double>(k) * k);
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * s.plane();
    for (int oy = 0; oy < os.h; ++oy) {
      for (int ox = 0; ox < os.w; ++ox) {
        double acc = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) acc += src[(oy * stride + dy) * s.w + ox * stride + dx];
        ov[p * os.plane() + oy * os.w + ox] = static_cast<T>(acc * inv);
      }
    }
  }
  detail::ImplPtr<T> px = x.handle(), po = out.handle();
  detail::record<T>({&x}, out, [px, po, s, os, k, stride, inv, planes] {
    px->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p) {
      T* gx = px->grad.data() + p * s.plane();
      for (int oy = 0; oy < os.h; ++oy)
        for (int ox = 0; ox < os.w; ++ox) {
          const T g = static_cast<T>(po->grad[p * os.plane() + oy * os.w + ox] * inv);
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) gx[(oy * stride + dy) * s.w + ox * stride + dx] += g;
        }
    }
  });
  return out;
}

/// Nearest-neighbor upsampling by an integer factor.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be positive");
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  auto out = Tensor<T>::zeros(os);
  auto xv = x.data();
  auto ov = out.data();
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p)
    for (int y = 0; y < os.h; ++y)
      for (int xx = 0; xx < os.w; ++xx)
        ov[p * os.plane() + y * os.w + xx] = xv[p * s.plane() + (y / factor) * s.w + xx / factor];
  detail::ImplPtr<T> px = x.handle(), po = out.handle();
  detail::record<T>({&x}, out, [px, po, s, os, factor, planes] {
    px->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p)
      for (int y = 0; y < os.h; ++y)
        for (int xx = 0; xx < os.w; ++xx)
          px->grad[p * s.plane() + (y / factor) * s.w + xx / factor] += po->grad[p * os.plane() + y * os.w + xx];
  });
  return out;
}

/// Reflect padding (edge sample not repeated), as numpy's mode="reflect".
template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, int top, int bottom, int left, int right) {
  const Shape s = x.shape();
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("pad_reflect: negative padding");
  if (top >= s.h || bottom >= s.h || left >= s.w || right >= s.w) {
    throw ShapeError("pad_reflect: padding must be smaller than the input extent");
  }
  const Shape os{s.n, s.c, s.h + top + bottom, s.w + left + right};
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  std::vector<std::size_t> src_index(os.plane());
  for (int y = 0; y < os.h; ++y)
    for (int xx = 0; xx < os.w; ++xx)
      src_index[y * os.w + xx] = static_cast<std::size_t>(reflect(y - top, s.h)) * s.w + reflect(xx - left, s.w);
  auto out = Tensor<T>::zeros(os);
  auto xv = x.data();
  auto ov = out.data();
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < os.plane(); ++i) ov[p * os.plane() + i] = xv[p * s.plane() + src_index[i]];
  detail::ImplPtr<T> px = x.handle(), po = out.handle();
  detail::record<T>({&x}, out, [px, po, s, os, planes, src_index] {
    px->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < os.plane(); ++i) px->grad[p * s.plane() + src_index[i]] += po->grad[p * os.plane() + i];
  });
  return out;
}

/// Spatial crop of an h x w window starting at (top, left).
template <typename T>
Tensor<T> crop(const Tensor<T>& x, int top, int left, int h, int w) {
  const Shape s = x.shape();
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > s.h || left + w > s.w) {
    throw ShapeError("crop: window outside " + s.str());
  }
  const Shape os{s.n, s.c, h, w};
  auto out = Tensor<T>::zeros(os);
  auto xv = x.data();
  auto ov = out.data();
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) ov[p * os.plane() + y * w + xx] = xv[p * s.plane() + (y + top) * s.w + xx + left];
  detail::ImplPtr<T> px = x.handle(), po = out.handle();
  detail::record<T>({&x}, out, [px, po, s, os, planes, top, left] {
    px->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p)
      for (int y = 0; y < os.h; ++y)
        for (int xx = 0; xx < os.w; ++xx)
          px->grad[p * s.plane() + (y + top) * s.w + xx + left] += po->grad[p * os.plane() + y * os.w + xx];
  });
  return out;
}

/// max(x, 0); the subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  detail::ImplPtr<T> px = x.handle(), po = out.handle();
  detail::record<T>({&x}, out, [px, po] {
    px->ensure_grad();
    for (std::size_t i = 0; i < px->data.size(); ++i)
      if (px->data[i] > T(0)) px->grad[i] += po->grad[i];
  });
  return out;
}

/// max(x, lo); gradient passes only where x > lo.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > lo ? xv[i] : lo;
  detail::ImplPtr<T> px = x.handle(), po = out.handle();
  detail::record<T>({&x}, out, [px, po, lo] {
    px->ensure_grad();
    for (std::size_t i = 0; i < px->data.size(); ++i)
      if (px->data[i] > lo) px->grad[i] += po->grad[i];
  });
  return out;
}

/// Multiplication by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * factor;
  detail::ImplPtr<T> px = x.handle(), po = out.handle();
  detail::record<T>({&x}, out, [px, po, factor] {
    px->ensure_grad();
    for (std::size_t i = 0; i < px->data.size(); ++i) px->grad[i] += po->grad[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul_elementwise(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

/// Mean squared error over all elements, as a 1x1x1x1 tensor. Shapes must match exactly.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  auto av = a.data();
  auto bv = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  const double count = static_cast<double>(av.size());
  auto out = Tensor<T>::zeros(Shape{});
  out.data()[0] = static_cast<T>(acc / count);
  out.check_finite("mse");
  detail::ImplPtr<T> pa = a.handle(), pb = b.handle(), po = out.handle();
  detail::record<T>({&a, &b}, out, [pa, pb, po, count] {
    const double g = static_cast<double>(po->grad[0]) * 2.0 / count;
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (std::size_t i = 0; i < pa->data.size(); ++i) {
      const double d = g * (static_cast<double>(pa->data[i]) - static_cast<double>(pb->data[i]));
      if (pa->requires_grad) pa->grad[i] += static_cast<T>(d);
      if (pb->requires_grad) pb->grad[i] -= static_cast<T>(d);
    }
  });
  return out;
}

}  // namespace dubd::ops
