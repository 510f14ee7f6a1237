#pragma once

// Image quality metrics and the analysis routines built on a denoiser.
//
// Routines that need a denoiser take any callable `fn(y, c) -> x_hat`
// where c is a noise-level map with y's C x H x W.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dubd/dihedral.hpp"
#include "dubd/noise.hpp"
#include "dubd/tensor.hpp"

namespace dubd {

/// Value reported for identical images.
inline constexpr double kPsnrCap = 99.0;

/// PSNR in dB over all channels, both images clipped to [0, 1], capped at 99 dB.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  auto av = a.data();
  auto bv = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = std::clamp(static_cast<double>(av[i]), 0.0, 1.0) - std::clamp(static_cast<double>(bv[i]), 0.0, 1.0);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(av.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

struct SsimParams {
  int window = 11;
  double gaussian_sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

namespace detail {

/// Channel-mean grayscale of a 1xCxHxW image, clipped to [0, 1].
template <typename T>
std::vector<double> to_gray(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.n != 1) throw ShapeError("ssim: expected a single image");
  std::vector<double> g(s.plane(), 0.0);
  auto v = x.data();
  for (int c = 0; c < s.c; ++c)
    for (std::size_t i = 0; i < s.plane(); ++i) g[i] += std::clamp(static_cast<double>(v[c * s.plane() + i]), 0.0, 1.0);
  for (auto& e : g) e /= s.c;
  return g;
}

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const double mid = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-(i - mid) * (i - mid) / (2 * sigma * sigma));
    sum += k[i];
  }
  for (auto& e : k) e /= sum;
  return k;
}

/// Separable "valid" filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * img[y * w + x + i];
      rows[y * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over all fully-contained Gaussian windows (dynamic range 1).
/// Color images are reduced to the channel mean first.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& p = {}) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shape mismatch");
  const Shape& s = a.shape();
  if (s.h < p.window || s.w < p.window) throw ShapeError("ssim: image " + s.str() + " smaller than the window");
  const auto ga = detail::to_gray(a);
  const auto gb = detail::to_gray(b);
  std::vector<double> aa(ga.size()), bb(ga.size()), ab(ga.size());
  for (std::size_t i = 0; i < ga.size(); ++i) {
    aa[i] = ga[i] * ga[i];
    bb[i] = gb[i] * gb[i];
    ab[i] = ga[i] * gb[i];
  }
  const auto k = detail::gaussian_kernel(p.window, p.gaussian_sigma);
  const auto mu_a = detail::filter_valid(ga, s.h, s.w, k);
  const auto mu_b = detail::filter_valid(gb, s.h, s.w, k);
  const auto e_aa = detail::filter_valid(aa, s.h, s.w, k);
  const auto e_bb = detail::filter_valid(bb, s.h, s.w, k);
  const auto e_ab = detail::filter_valid(ab, s.h, s.w, k);
  const double c1 = (p.k1 * 1.0) * (p.k1 * 1.0);
  const double c2 = (p.k2 * 1.0) * (p.k2 * 1.0);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

/// Constant noise-level map of `sigma255 / 255` shaped like `y`.
template <typename T>
Tensor<T> constant_condition(const Tensor<T>& y, double sigma255) {
  return Tensor<T>::full(y.shape(), static_cast<T>(sigma255 / kPixelScale));
}

// ---------------------------------------------------------------------------
// Condition sweep

struct SweepResult {
  std::vector<double> grid;  // 255 scale, strictly increasing
  std::vector<double> psnr;
  double argmax_c = 0.0;
  double max_psnr = 0.0;
  std::optional<double> blind_c;     // mean estimated level, 255 scale
  std::optional<double> blind_psnr;

  /// "kind,c,psnr" rows: every grid point, then the argmax, then the blind estimate if present.
  [[nodiscard]] std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "kind,c,psnr\n";
    for (std::size_t i = 0; i < grid.size(); ++i) os << "grid," << grid[i] << ',' << psnr[i] << '\n';
    os << "argmax," << argmax_c << ',' << max_psnr << '\n';
    if (blind_c && blind_psnr) os << "blind," << *blind_c << ',' << *blind_psnr << '\n';
    return os.str();
  }

  /// Two columns "c,psnr" for plotting.
  [[nodiscard]] std::string to_plot_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "c,psnr\n";
    for (std::size_t i = 0; i < grid.size(); ++i) os << grid[i] << ',' << psnr[i] << '\n';
    return os.str();
  }
};

/// Integer grid lo, lo + step, ..., up to hi inclusive.
inline std::vector<double> make_grid(double lo, double hi, double step) {
  if (!(step > 0) || hi < lo) throw ConfigError("invalid sweep grid");
  std::vector<double> g;
  for (int i = 0;; ++i) {
    const double c = lo + i * step;
    if (c > hi + 1e-9) break;
    g.push_back(c);
  }
  return g;
}

/// PSNR of fn(y, c) against x for each constant c in `grid` (255 scale).
/// Ties resolve toward the smaller c.
template <typename T, typename Fn>
SweepResult sweep_c(const Tensor<T>& y, const Tensor<T>& x, Fn&& fn, const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("sweep_c: empty grid");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 80.0)) throw ConfigError("sweep_c: grid values must lie in [0, 80]");
    if (i > 0 && !(grid[i] > grid[i - 1])) throw ConfigError("sweep_c: grid must be strictly increasing");
  }
  SweepResult r;
  r.grid = grid;
  r.max_psnr = -std::numeric_limits<double>::infinity();
  for (double c : grid) {
    const double v = psnr(fn(y, constant_condition(y, c)), x);
    if (!std::isfinite(v)) throw NumericError("sweep_c: non-finite PSNR");
    r.psnr.push_back(v);
    if (v > r.max_psnr) {
      r.max_psnr = v;
      r.argmax_c = c;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Self-ensemble

/// Average of fn over the 8 dihedral transforms of (y, c), each mapped back.
template <typename T, typename Fn>
Tensor<T> self_ensemble_denoise(const Tensor<T>& y, const Tensor<T>& c, Fn&& fn) {
  std::vector<double> acc(y.numel(), 0.0);
  for (int k = 0; k < 8; ++k) {
    const Tensor<T> out = dihedral_transform(fn(dihedral_transform(y, k), dihedral_transform(c, k)), dihedral_inverse(k));
    if (out.shape() != y.shape()) throw ShapeError("self_ensemble_denoise: denoiser changed the shape");
    auto v = out.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  std::vector<T> mean(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) mean[i] = static_cast<T>(acc[i] / 8.0);
  return Tensor<T>::from_data(y.shape(), std::move(mean));
}

// ---------------------------------------------------------------------------
// Variant-noise comparison

struct ConditionComparison {
  double psnr_scalar_avg;
  double psnr_map;
};

/// Denoises once with the mean of `sigma` broadcast everywhere and once with the map itself.
template <typename T, typename Fn>
ConditionComparison compare_condition_modes(const Tensor<T>& y, const Tensor<T>& x, const SigmaMap<T>& sigma, Fn&& fn) {
  const Tensor<T> c_avg = Tensor<T>::full(y.shape(), static_cast<T>(sigma.mean()));
  return ConditionComparison{psnr(fn(y, c_avg), x), psnr(fn(y, sigma.values()), x)};
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRow {
  std::string name;
  double psnr;
  double ssim;
};

struct EvalReport {
  std::string mode;         // NB (known level), B (estimated), R (pooled image)
  std::string fingerprint;  // hex digest of the checkpoint(s) used
  std::vector<EvalRow> rows;

  [[nodiscard]] double mean_psnr() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.psnr;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }
  [[nodiscard]] double mean_ssim() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.ssim;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }

  /// "image,psnr,ssim" rows followed by a "mean" row; mode and fingerprint as leading columns.
  [[nodiscard]] std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "mode,fingerprint,image,psnr,ssim\n";
    for (const auto& r : rows) os << mode << ',' << fingerprint << ',' << r.name << ',' << r.psnr << ',' << r.ssim << '\n';
    os << mode << ',' << fingerprint << ",mean," << mean_psnr() << ',' << mean_ssim() << '\n';
    return os.str();
  }
};

/// 64-bit FNV-1a as 16 hex digits.
inline std::string fingerprint(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

}  // namespace dubd
