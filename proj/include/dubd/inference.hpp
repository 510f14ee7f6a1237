#pragma once

// Condition selection and end-to-end denoising shared by the CLI and the
// HTTP service, so both produce identical pixels for identical requests.

#include <charconv>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dubd/checkpoint.hpp"
#include "dubd/eval.hpp"
#include "dubd/models.hpp"
#include "dubd/noise.hpp"

namespace dubd {

/// How the condition map is obtained.
struct ConditionRequest {
  enum class Kind { Sigma, Blind, Real } kind = Kind::Sigma;
  double sigma255 = 0.0;  // used when kind == Sigma

  /// Accepts "blind", "real", a number, or "sigma=<number>" (255 scale, 0..255).
  static ConditionRequest parse(const std::string& text) {
    if (text == "blind") return {Kind::Blind, 0.0};
    if (text == "real") return {Kind::Real, 0.0};
    std::string num = text.starts_with("sigma=") ? text.substr(6) : text;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
    if (num.empty() || ec != std::errc() || ptr != num.data() + num.size()) {
      throw ConfigError("condition must be 'blind', 'real' or a noise level, got '" + text + "'");
    }
    if (!(v >= 0.0 && v <= kPixelScale)) throw ConfigError("noise level must lie in [0, 255], got '" + text + "'");
    return {Kind::Sigma, v};
  }
};

/// Loaded models. The denoiser is required; the estimator only for blind requests.
struct Engine {
  DenoiserModel<float> denoiser;
  std::optional<CenetModel<float>> cenet;
  std::string fingerprint;

  static Engine load(const std::string& denoiser_path, const std::string& cenet_path = "") {
    Engine e;
    std::string bytes = read_checkpoint_bytes(denoiser_path);
    e.denoiser = denoiser_from_checkpoint(decode_checkpoint(bytes));
    if (!cenet_path.empty()) {
      const std::string cb = read_checkpoint_bytes(cenet_path);
      e.cenet = cenet_from_checkpoint(decode_checkpoint(cb));
      if (e.cenet->config.in_channels != e.denoiser.config.in_channels) {
        throw ConfigError("estimator and denoiser disagree on channel count");
      }
      bytes += cb;
    }
    e.fingerprint = dubd::fingerprint(bytes);
    return e;
  }

  [[nodiscard]] int channels() const { return denoiser.config.in_channels; }

 private:
  static std::string read_checkpoint_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
};

inline void check_image_channels(const Engine& e, const Tensor<float>& y) {
  if (y.shape().c != e.channels()) {
    throw ConfigError("image has " + std::to_string(y.shape().c) + " channels, model expects " +
                      std::to_string(e.channels()));
  }
}

/// Condition map for `y` and the kind the denoiser should treat it as.
inline std::pair<Tensor<float>, ConditionKind> make_condition(const Engine& e, const Tensor<float>& y,
                                                               const ConditionRequest& req) {
  check_image_channels(e, y);
  switch (req.kind) {
    case ConditionRequest::Kind::Sigma: return {constant_condition(y, req.sigma255), ConditionKind::NoiseLevel};
    case ConditionRequest::Kind::Blind:
      if (!e.cenet) throw ConfigError("blind mode requires an estimator checkpoint");
      return {e.cenet->operator()(y).values(), ConditionKind::NoiseLevel};
    case ConditionRequest::Kind::Real: return {avgpool_condition(y), ConditionKind::Image};
  }
  throw ConfigError("unknown condition kind");
}

/// Denoises `y`, optionally with the 8-fold self-ensemble.
inline Tensor<float> denoise_image(const Engine& e, const Tensor<float>& y, const ConditionRequest& req,
                                   bool ensemble = false) {
  auto [c, kind] = make_condition(e, y, req);
  auto fn = [&](const Tensor<float>& yy, const Tensor<float>& cc) { return e.denoiser(yy, cc, kind); };
  return ensemble ? self_ensemble_denoise(y, c, fn) : fn(y, c);
}

/// Mean of the estimated noise-level map, 255 scale.
inline double estimate_sigma255(const Engine& e, const Tensor<float>& y) {
  if (!e.cenet) throw ConfigError("noise-level estimation requires an estimator checkpoint");
  check_image_channels(e, y);
  return e.cenet->operator()(y).mean() * kPixelScale;
}

/// Condition sweep over `grid`, with the blind estimate as reference when an estimator is loaded.
inline SweepResult sweep_engine(const Engine& e, const Tensor<float>& y, const Tensor<float>& x,
                                const std::vector<double>& grid) {
  check_image_channels(e, y);
  if (x.shape() != y.shape()) throw ShapeError("sweep: reference and noisy image differ in shape");
  auto fn = [&](const Tensor<float>& yy, const Tensor<float>& cc) { return e.denoiser(yy, cc); };
  SweepResult r = sweep_c(y, x, fn, grid);
  if (e.cenet) {
    const SigmaMap<float> est = e.cenet->operator()(y);
    r.blind_c = est.mean() * kPixelScale;
    r.blind_psnr = psnr(fn(y, est.values()), x);
  }
  return r;
}

/// Noise described in compact text form (levels on the 255 scale):
///   "30"                  uniform
///   "spectral:15,30,45"   one level per channel
///   "gradient:5,50"       horizontal ramp
///   "split:10,50"         left half / right half
///   "signal" or "signal:a,b"  signal-dependent proxy with variance a*x + b
inline Tensor<float> synthesize_noise(const Tensor<float>& x, const std::string& text, std::uint64_t seed) {
  Rng rng(seed);
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  std::vector<double> values;
  if (colon != std::string::npos) {
    KeyValue kv;
    kv.set("v", text.substr(colon + 1));
    values = kv.list("v");
  }
  const Shape& s = x.shape();
  NoiseSpec spec;
  spec.lo = 0.0;
  spec.hi = kPixelScale;
  if (head == "signal") {
    if (!values.empty() && values.size() != 2) throw ConfigError("signal noise takes two gains a,b");
    const double a = values.empty() ? spec.gain_a : values[0];
    const double b = values.empty() ? spec.gain_b : values[1];
    return signal_dependent_noise(x, a, b, rng, spec.blur);
  }
  if (head == "spectral") {
    spec.kind = NoiseKind::Spectral;
    if (values.empty()) throw ConfigError("spectral noise takes one level per channel");
  } else if (head == "gradient") {
    spec.kind = NoiseKind::SpatialGradient;
    if (values.size() != 2) throw ConfigError("gradient noise takes two levels");
  } else if (head == "split") {
    spec.kind = NoiseKind::SpatialRegions;
    spec.layout = "split";
    if (values.size() != 2) throw ConfigError("split noise takes two levels");
  } else {
    spec.kind = NoiseKind::Uniform;
    KeyValue kv;
    kv.set("v", text);
    values = {kv.num("v")};
  }
  spec.levels = values;
  const SigmaMap<float> map = build_sigma_map<float>(spec, s.c, s.h, s.w, rng);
  return add_gaussian_noise(x, map, rng);
}

}  // namespace dubd
