#pragma once

// Noise-level maps and noise synthesis.
//
// Images live in normalized [0, 1] units. Noise levels are quoted on the
// 0-255 scale at every user-facing boundary (NoiseSpec, CLI, HTTP) and
// divided by 255 on the way in. Synthesized noisy images are not clipped.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "dubd/key_value.hpp"
#include "dubd/tensor.hpp"

namespace dubd {

using Rng = std::mt19937_64;

inline constexpr double kPixelScale = 255.0;
/// Largest noise level used for training, 255 scale.
inline constexpr double kMaxTrainingSigma = 70.0;
inline constexpr double kMinTrainingSigma = 5.0;

enum class SigmaProvenance : std::uint8_t { Uniform = 0, Spectral = 1, Spatial = 2, Estimated = 3, Manual = 4 };

inline const char* to_string(SigmaProvenance p) {
  switch (p) {
    case SigmaProvenance::Uniform: return "uniform";
    case SigmaProvenance::Spectral: return "spectral";
    case SigmaProvenance::Spatial: return "spatial";
    case SigmaProvenance::Estimated: return "estimated";
    case SigmaProvenance::Manual: return "manual";
  }
  return "unknown";
}

/// Per-pixel, per-channel noise standard deviation in normalized units.
///
/// Values are held as a 1xCxHxW tensor (or NxCxHxW for a batch of
/// independent maps). Every entry lies in [0, 1]; a map tagged `Uniform`
/// must be constant.
template <typename T>
class SigmaMap {
 public:
  SigmaMap() = default;

  SigmaMap(Tensor<T> values, SigmaProvenance provenance) : values_(std::move(values)), provenance_(provenance) {
    validate();
  }

  /// Constant map of `sigma255 / 255` over C x H x W.
  static SigmaMap constant(double sigma255, int c, int h, int w, SigmaProvenance p = SigmaProvenance::Manual) {
    return SigmaMap(Tensor<T>::full(Shape{1, c, h, w}, static_cast<T>(sigma255 / kPixelScale)), p);
  }

  [[nodiscard]] const Tensor<T>& values() const { return values_; }
  [[nodiscard]] const Shape& shape() const { return values_.shape(); }
  [[nodiscard]] SigmaProvenance provenance() const { return provenance_; }

  /// Mean over all entries, normalized units.
  [[nodiscard]] double mean() const {
    double acc = 0.0;
    for (T v : values_.data()) acc += v;
    return acc / static_cast<double>(values_.numel());
  }

  [[nodiscard]] bool is_constant() const {
    const auto v = values_.data();
    for (T x : v)
      if (x != v[0]) return false;
    return true;
  }

  /// Binary form: "SGMP", provenance byte, four uint32 dims, float32 values (little-endian host).
  [[nodiscard]] std::string serialize() const {
    std::string out = "SGMP";
    out.push_back(static_cast<char>(provenance_));
    const Shape& s = shape();
    for (int d : {s.n, s.c, s.h, s.w}) {
      const auto u = static_cast<std::uint32_t>(d);
      out.append(reinterpret_cast<const char*>(&u), sizeof u);
    }
    for (T v : values_.data()) {
      const auto f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), sizeof f);
    }
    return out;
  }

  static SigmaMap deserialize(const std::string& bytes) {
    constexpr std::size_t header = 4 + 1 + 4 * sizeof(std::uint32_t);
    if (bytes.size() < header || bytes.compare(0, 4, "SGMP") != 0) throw IoError("not a serialized sigma map");
    const auto prov = static_cast<std::uint8_t>(bytes[4]);
    if (prov > static_cast<std::uint8_t>(SigmaProvenance::Manual)) throw IoError("bad sigma map provenance");
    std::uint32_t dims[4];
    std::memcpy(dims, bytes.data() + 5, sizeof dims);
    const Shape s{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
                  static_cast<int>(dims[3])};
    check_shape_valid(s);
    if (bytes.size() != header + s.numel() * sizeof(float)) throw IoError("sigma map payload size mismatch");
    std::vector<T> values(s.numel());
    for (std::size_t i = 0; i < values.size(); ++i) {
      float f = 0;
      std::memcpy(&f, bytes.data() + header + i * sizeof f, sizeof f);
      values[i] = static_cast<T>(f);
    }
    return SigmaMap(Tensor<T>::from_data(s, std::move(values)), static_cast<SigmaProvenance>(prov));
  }

 private:
  void validate() const {
    for (T v : values_.data()) {
      if (!std::isfinite(v) || v < T(0) || v > T(1)) {
        throw ConfigError("sigma map entries must lie in [0, 1] (normalized units)");
      }
    }
    if (provenance_ == SigmaProvenance::Uniform && !is_constant()) {
      throw ConfigError("a uniform sigma map must be constant");
    }
  }

  Tensor<T> values_;
  SigmaProvenance provenance_ = SigmaProvenance::Manual;
};

enum class NoiseKind { Uniform, Spectral, SpatialGradient, SpatialRegions, SignalDependent };

inline const char* to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::Uniform: return "uniform";
    case NoiseKind::Spectral: return "spectral";
    case NoiseKind::SpatialGradient: return "spatial-gradient";
    case NoiseKind::SpatialRegions: return "spatial-regions";
    case NoiseKind::SignalDependent: return "signal-dependent";
  }
  return "unknown";
}

inline NoiseKind parse_noise_kind(const std::string& s) {
  for (NoiseKind k : {NoiseKind::Uniform, NoiseKind::Spectral, NoiseKind::SpatialGradient,
                      NoiseKind::SpatialRegions, NoiseKind::SignalDependent}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown noise kind '" + s + "'");
}

/// Recipe for a noise-level map (and, for signal-dependent noise, the noise itself).
///
/// `levels` pins the map (255 scale); when empty, levels are drawn
/// uniformly from [lo, hi]. Meaning of `levels` per kind:
///   uniform           one value
///   spectral          one value per channel
///   spatial-gradient  start and end of a linear ramp along `axis`
///   spatial-regions   with layout "split": left and right halves;
///                     with layout "rects": background then one per rectangle
struct NoiseSpec {
  NoiseKind kind = NoiseKind::Uniform;
  double lo = kMinTrainingSigma;
  double hi = kMaxTrainingSigma;
  std::vector<double> levels;
  int axis = 1;  // 1: varies along width, 0: along height
  std::string layout = "rects";
  int rects = 3;
  double gain_a = 0.01;
  double gain_b = (10.0 / 255.0) * (10.0 / 255.0);
  bool blur = true;
  std::uint64_t seed = 0;

  [[nodiscard]] KeyValue to_key_value() const {
    KeyValue kv;
    kv.set("kind", to_string(kind));
    kv.set("lo", lo);
    kv.set("hi", hi);
    kv.set_list("levels", levels);
    kv.set("axis", axis);
    kv.set("layout", layout);
    kv.set("rects", rects);
    kv.set("gain_a", gain_a);
    kv.set("gain_b", gain_b);
    kv.set("blur", blur);
    kv.set("seed", static_cast<long long>(seed));
    return kv;
  }

  static NoiseSpec from_key_value(const KeyValue& kv) {
    NoiseSpec s;
    s.kind = parse_noise_kind(kv.str("kind", "uniform"));
    s.lo = kv.num("lo", s.lo);
    s.hi = kv.num("hi", s.hi);
    s.levels = kv.list("levels");
    s.axis = static_cast<int>(kv.integer("axis", s.axis));
    s.layout = kv.str("layout", s.layout);
    s.rects = static_cast<int>(kv.integer("rects", s.rects));
    s.gain_a = kv.num("gain_a", s.gain_a);
    s.gain_b = kv.num("gain_b", s.gain_b);
    s.blur = kv.flag("blur", s.blur);
    s.seed = static_cast<std::uint64_t>(kv.integer("seed", 0));
    return s;
  }

  /// Structural checks valid for any use (0..255 levels, consistent geometry).
  void validate() const {
    auto in_range = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= kPixelScale; };
    if (!in_range(lo) || !in_range(hi) || lo > hi) throw ConfigError("noise spec: invalid range [lo, hi]");
    for (double v : levels)
      if (!in_range(v)) throw ConfigError("noise spec: level outside [0, 255]");
    if (axis != 0 && axis != 1) throw ConfigError("noise spec: axis must be 0 or 1");
    if (layout != "split" && layout != "rects") throw ConfigError("noise spec: layout must be split or rects");
    if (rects < 0) throw ConfigError("noise spec: negative rectangle count");
    if (gain_a < 0 || gain_b < 0) throw ConfigError("noise spec: signal-dependent gains must be non-negative");
  }

  /// Training specs additionally keep every level inside [5, 70].
  void validate_training() const {
    validate();
    auto ok = [](double v) { return v >= kMinTrainingSigma && v <= kMaxTrainingSigma; };
    if (!ok(lo) || !ok(hi)) throw ConfigError("training noise range must lie within [5, 70]");
    for (double v : levels)
      if (!ok(v)) throw ConfigError("training noise levels must lie within [5, 70]");
  }
};

namespace detail {

inline double draw_level(const NoiseSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> u(spec.lo, spec.hi);
  return spec.lo == spec.hi ? spec.lo : u(rng);
}

inline double level_or_draw(const NoiseSpec& spec, std::size_t i, Rng& rng) {
  return i < spec.levels.size() ? spec.levels[i] : draw_level(spec, rng);
}

}  // namespace detail

/// Builds the noise-level map described by `spec` for a C x H x W image.
/// Levels may be anywhere in [0, 255]; see sample_training_sigma for the training range.
template <typename T>
SigmaMap<T> build_sigma_map(const NoiseSpec& spec, int c, int h, int w, Rng& rng) {
  spec.validate();
  check_shape_valid(Shape{1, c, h, w});
  std::vector<T> v(static_cast<std::size_t>(c) * h * w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto fill_all_channels = [&](auto&& value_at) {
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) v[ch * plane + y * w + x] = static_cast<T>(value_at(y, x) / kPixelScale);
  };
  SigmaProvenance prov = SigmaProvenance::Spatial;
  switch (spec.kind) {
    case NoiseKind::Uniform: {
      const double s = detail::level_or_draw(spec, 0, rng);
      std::fill(v.begin(), v.end(), static_cast<T>(s / kPixelScale));
      prov = SigmaProvenance::Uniform;
      break;
    }
    case NoiseKind::Spectral: {
      if (!spec.levels.empty() && spec.levels.size() != static_cast<std::size_t>(c)) {
        throw ConfigError("spectral noise spec needs one level per channel");
      }
      for (int ch = 0; ch < c; ++ch) {
        const double s = detail::level_or_draw(spec, static_cast<std::size_t>(ch), rng);
        std::fill(v.begin() + static_cast<std::ptrdiff_t>(ch * plane),
                  v.begin() + static_cast<std::ptrdiff_t>((ch + 1) * plane), static_cast<T>(s / kPixelScale));
      }
      prov = SigmaProvenance::Spectral;
      break;
    }
    case NoiseKind::SpatialGradient: {
      const double a = detail::level_or_draw(spec, 0, rng);
      const double b = detail::level_or_draw(spec, 1, rng);
      const int len = spec.axis == 1 ? w : h;
      fill_all_channels([&](int y, int x) {
        const int t = spec.axis == 1 ? x : y;
        return len == 1 ? a : a + (b - a) * t / (len - 1);
      });
      break;
    }
    case NoiseKind::SpatialRegions: {
      if (spec.layout == "split") {
        const double left = detail::level_or_draw(spec, 0, rng);
        const double right = detail::level_or_draw(spec, 1, rng);
        fill_all_channels([&](int, int x) { return x < w / 2 ? left : right; });
      } else {
        const double bg = detail::level_or_draw(spec, 0, rng);
        std::vector<double> plane_v(plane, bg);
        for (int r = 0; r < spec.rects; ++r) {
          const double s = detail::level_or_draw(spec, static_cast<std::size_t>(r) + 1, rng);
          std::uniform_int_distribution<int> ry(0, h - 1), rx(0, w - 1);
          int y0 = ry(rng), y1 = ry(rng), x0 = rx(rng), x1 = rx(rng);
          if (y0 > y1) std::swap(y0, y1);
          if (x0 > x1) std::swap(x0, x1);
          for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) plane_v[y * w + x] = s;
        }
        fill_all_channels([&](int y, int x) { return plane_v[y * w + x]; });
      }
      break;
    }
    case NoiseKind::SignalDependent:
      throw ConfigError("signal-dependent noise has no standalone sigma map");
  }
  return SigmaMap<T>(Tensor<T>::from_data(Shape{1, c, h, w}, std::move(v)), prov);
}

/// Draws a training noise-level map; every level lies in [5, 70] (255 scale).
template <typename T>
SigmaMap<T> sample_training_sigma(const NoiseSpec& spec, int c, int h, int w, Rng& rng) {
  if (spec.kind == NoiseKind::SignalDependent) throw ConfigError("sample_training_sigma: unsupported noise kind");
  spec.validate_training();
  return build_sigma_map<T>(spec, c, h, w, rng);
}

/// y = x + n with n ~ Normal(0, sigma^2) independently per element.
///
/// `sigma` is 1xCxHxW (shared across the batch) or matches x exactly.
/// Draws happen in storage order, one standard normal per element.
template <typename T>
Tensor<T> add_gaussian_noise(const Tensor<T>& x, const SigmaMap<T>& sigma, Rng& rng) {
  const Shape& xs = x.shape();
  const Shape& ss = sigma.shape();
  if (ss.c != xs.c || ss.h != xs.h || ss.w != xs.w || (ss.n != 1 && ss.n != xs.n)) {
    throw ShapeError("add_gaussian_noise: sigma " + ss.str() + " does not match image " + xs.str());
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  auto out = x.clone();
  auto ov = out.data();
  auto sv = sigma.values().data();
  const std::size_t per = static_cast<std::size_t>(xs.c) * xs.plane();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double s = sv[ss.n == 1 ? i % per : i];
    ov[i] = static_cast<T>(ov[i] + s * normal(rng));
  }
  return out;
}

/// Heteroscedastic proxy for real sensor noise: Var(n[i]) = a * x[i] + b,
/// optionally correlated by a 2x2 box filter with weights 1/2 (which keeps
/// the variance of an i.i.d. field unchanged).
template <typename T>
Tensor<T> signal_dependent_noise(const Tensor<T>& x, double gain_a, double gain_b, Rng& rng, bool blur = true) {
  if (!(gain_a >= 0) || !(gain_b >= 0)) throw ConfigError("signal_dependent_noise: gains must be non-negative");
  const Shape& s = x.shape();
  std::normal_distribution<double> normal(0.0, 1.0);
  auto out = x.clone();
  auto ov = out.data();
  auto xv = x.data();
  auto stddev = [&](std::size_t idx) {
    return std::sqrt(gain_a * std::max(0.0, static_cast<double>(xv[idx])) + gain_b);
  };
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  if (!blur) {
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(ov[i] + stddev(i) * normal(rng));
    return out;
  }
  // Field of (H+1) x (W+1) so every output pixel sees four fresh samples.
  const int fh = s.h + 1, fw = s.w + 1;
  std::vector<double> field(static_cast<std::size_t>(fh) * fw);
  for (std::size_t p = 0; p < planes; ++p) {
    for (int y = 0; y < fh; ++y)
      for (int xx = 0; xx < fw; ++xx) {
        const std::size_t src = p * s.plane() + static_cast<std::size_t>(std::min(y, s.h - 1)) * s.w +
                                std::min(xx, s.w - 1);
        field[y * fw + xx] = stddev(src) * normal(rng);
      }
    for (int y = 0; y < s.h; ++y)
      for (int xx = 0; xx < s.w; ++xx) {
        const double n = 0.5 * (field[y * fw + xx] + field[y * fw + xx + 1] + field[(y + 1) * fw + xx] +
                                field[(y + 1) * fw + xx + 1]);
        ov[p * s.plane() + y * s.w + xx] = static_cast<T>(ov[p * s.plane() + y * s.w + xx] + n);
      }
  }
  return out;
}

}  // namespace dubd
