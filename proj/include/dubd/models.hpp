#pragma once

// The two networks of the blind denoiser.
//
//  * Noise-level estimator (CENet): strided 3x3 convs with ReLU, a
//    C-channel 3x3 head, bilinear upsampling back to the input size.
//  * Tunable denoiser: a 3x3 head conv, D conditional affine transform
//    blocks (each N ResBlocks, a 3x3 conv, then gamma * t + beta), a 3x3
//    body conv with a long skip from the head, and a 3x3 tail predicting
//    the noise, which is subtracted from the input.
//  * Condition encoder: relu(1x1 conv C -> hidden), then two 1x1 heads
//    producing gamma and beta. One encoding is shared by every block.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "dubd/key_value.hpp"
#include "dubd/noise.hpp"
#include "dubd/ops.hpp"
#include "dubd/parameter_set.hpp"
#include "dubd/tensor.hpp"

namespace dubd {

struct CenetConfig {
  int in_channels = 3;
  int width = 64;
  std::vector<int> strides{1, 2, 1, 2, 1, 1};  // last entry is the C-channel head

  /// Product of all strides.
  [[nodiscard]] int downsample() const {
    int f = 1;
    for (int s : strides) f *= s;
    return f;
  }

  void validate() const {
    if (in_channels < 1 || width < 1) throw ConfigError("cenet config: channels and width must be positive");
    if (strides.size() < 2) throw ConfigError("cenet config: need at least two conv layers");
    for (int s : strides)
      if (s < 1) throw ConfigError("cenet config: strides must be positive");
  }

  [[nodiscard]] KeyValue to_key_value() const {
    KeyValue kv;
    kv.set("in_channels", in_channels);
    kv.set("width", width);
    std::vector<double> s(strides.begin(), strides.end());
    kv.set_list("strides", s);
    return kv;
  }

  static CenetConfig from_key_value(const KeyValue& kv) {
    CenetConfig c;
    c.in_channels = static_cast<int>(kv.integer("in_channels", c.in_channels));
    c.width = static_cast<int>(kv.integer("width", c.width));
    if (kv.has("strides")) {
      c.strides.clear();
      for (double s : kv.list("strides")) c.strides.push_back(static_cast<int>(s));
    }
    c.validate();
    return c;
  }

  friend bool operator==(const CenetConfig&, const CenetConfig&) = default;
};

struct DenoiserConfig {
  int in_channels = 3;
  int width = 64;
  int cat_blocks = 5;      // D
  int res_blocks = 5;      // N, per CATBlock
  int encoder_hidden = 128;

  void validate() const {
    if (in_channels < 1 || width < 1 || encoder_hidden < 1) {
      throw ConfigError("denoiser config: channel counts must be positive");
    }
    if (cat_blocks < 1 || res_blocks < 0) throw ConfigError("denoiser config: invalid block counts");
  }

  [[nodiscard]] KeyValue to_key_value() const {
    KeyValue kv;
    kv.set("in_channels", in_channels);
    kv.set("width", width);
    kv.set("cat_blocks", cat_blocks);
    kv.set("res_blocks", res_blocks);
    kv.set("encoder_hidden", encoder_hidden);
    return kv;
  }

  static DenoiserConfig from_key_value(const KeyValue& kv) {
    DenoiserConfig c;
    c.in_channels = static_cast<int>(kv.integer("in_channels", c.in_channels));
    c.width = static_cast<int>(kv.integer("width", c.width));
    c.cat_blocks = static_cast<int>(kv.integer("cat_blocks", c.cat_blocks));
    c.res_blocks = static_cast<int>(kv.integer("res_blocks", c.res_blocks));
    c.encoder_hidden = static_cast<int>(kv.integer("encoder_hidden", c.encoder_hidden));
    c.validate();
    return c;
  }

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

inline constexpr std::size_t conv_param_count(int cin, int cout, int k) {
  return static_cast<std::size_t>(cout) * cin * k * k + static_cast<std::size_t>(cout);
}

/// Parameter count implied by the config alone.
inline std::size_t count_params(const CenetConfig& cfg) {
  std::size_t total = 0;
  int cin = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.strides.size(); ++i) {
    const bool last = i + 1 == cfg.strides.size();
    const int cout = last ? cfg.in_channels : cfg.width;
    total += conv_param_count(cin, cout, 3);
    cin = cout;
  }
  return total;
}

inline std::size_t count_encoder_params(const DenoiserConfig& cfg) {
  return conv_param_count(cfg.in_channels, cfg.encoder_hidden, 1) +
         2 * conv_param_count(cfg.encoder_hidden, cfg.width, 1);
}

inline std::size_t count_resblock_params(int width) { return 2 * conv_param_count(width, width, 3); }

inline std::size_t count_catblock_params(const DenoiserConfig& cfg) {
  return static_cast<std::size_t>(cfg.res_blocks) * count_resblock_params(cfg.width) +
         conv_param_count(cfg.width, cfg.width, 3);
}

inline std::size_t count_params(const DenoiserConfig& cfg) {
  return conv_param_count(cfg.in_channels, cfg.width, 3) +
         static_cast<std::size_t>(cfg.cat_blocks) * count_catblock_params(cfg) +
         conv_param_count(cfg.width, cfg.width, 3) + conv_param_count(cfg.width, cfg.in_channels, 3) +
         count_encoder_params(cfg);
}

namespace detail {

/// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
template <typename T>
void add_conv(ParameterSet<T>& ps, const std::string& name, int cin, int cout, int k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> w(static_cast<std::size_t>(cout) * cin * k * k);
  for (auto& v : w) v = static_cast<T>(u(rng));
  std::vector<T> b(static_cast<std::size_t>(cout));
  for (auto& v : b) v = static_cast<T>(u(rng));
  ps.add(name + ".weight", Tensor<T>::from_data(Shape{cout, cin, k, k}, std::move(w)));
  ps.add(name + ".bias", Tensor<T>::from_data(Shape{1, cout, 1, 1}, std::move(b)));
}

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ParameterSet<T>& ps, const std::string& name, int stride = 1) {
  const Tensor<T>& w = ps.get(name + ".weight");
  return ops::conv2d(x, w, ps.get(name + ".bias"), stride, w.shape().h / 2);
}

inline std::string res_name(int d, int r) { return "cat" + std::to_string(d) + ".res" + std::to_string(r); }

template <typename T>
void expect_shape(const ParameterSet<T>& ps, const std::string& name, Shape s) {
  if (!ps.contains(name)) throw ConfigError("checkpoint lacks parameter '" + name + "'");
  if (ps.get(name).shape() != s) {
    throw ConfigError("parameter '" + name + "' has shape " + ps.get(name).shape().str() + ", config expects " +
                      s.str());
  }
}

template <typename T>
void expect_conv(const ParameterSet<T>& ps, const std::string& name, int cin, int cout, int k) {
  expect_shape(ps, name + ".weight", Shape{cout, cin, k, k});
  expect_shape(ps, name + ".bias", Shape{1, cout, 1, 1});
}

}  // namespace detail

template <typename T>
ParameterSet<T> init_cenet_params(const CenetConfig& cfg, Rng& rng) {
  cfg.validate();
  ParameterSet<T> ps;
  int cin = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.strides.size(); ++i) {
    const int cout = i + 1 == cfg.strides.size() ? cfg.in_channels : cfg.width;
    detail::add_conv(ps, "cenet.conv" + std::to_string(i), cin, cout, 3, rng);
    cin = cout;
  }
  return ps;
}

/// Throws ConfigError unless `ps` holds exactly the parameters `cfg` implies.
template <typename T>
void check_cenet_params(const CenetConfig& cfg, const ParameterSet<T>& ps) {
  int cin = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.strides.size(); ++i) {
    const int cout = i + 1 == cfg.strides.size() ? cfg.in_channels : cfg.width;
    detail::expect_conv(ps, "cenet.conv" + std::to_string(i), cin, cout, 3);
    cin = cout;
  }
  if (ps.numel() != count_params(cfg)) throw ConfigError("cenet checkpoint has extra parameters");
}

template <typename T>
ParameterSet<T> init_denoiser_params(const DenoiserConfig& cfg, Rng& rng) {
  cfg.validate();
  ParameterSet<T> ps;
  detail::add_conv(ps, "head", cfg.in_channels, cfg.width, 3, rng);
  detail::add_conv(ps, "enc.hidden", cfg.in_channels, cfg.encoder_hidden, 1, rng);
  detail::add_conv(ps, "enc.gamma", cfg.encoder_hidden, cfg.width, 1, rng);
  detail::add_conv(ps, "enc.beta", cfg.encoder_hidden, cfg.width, 1, rng);
  // Start at identity modulation: gamma = 1, beta = 0 before any training signal.
  for (auto& v : ps.get("enc.gamma.bias").data()) v = T(1);
  for (auto& v : ps.get("enc.beta.bias").data()) v = T(0);
  for (int d = 0; d < cfg.cat_blocks; ++d) {
    for (int r = 0; r < cfg.res_blocks; ++r) {
      detail::add_conv(ps, detail::res_name(d, r) + ".conv1", cfg.width, cfg.width, 3, rng);
      detail::add_conv(ps, detail::res_name(d, r) + ".conv2", cfg.width, cfg.width, 3, rng);
    }
    detail::add_conv(ps, "cat" + std::to_string(d) + ".conv", cfg.width, cfg.width, 3, rng);
  }
  detail::add_conv(ps, "body", cfg.width, cfg.width, 3, rng);
  detail::add_conv(ps, "tail", cfg.width, cfg.in_channels, 3, rng);
  return ps;
}

template <typename T>
void check_denoiser_params(const DenoiserConfig& cfg, const ParameterSet<T>& ps) {
  detail::expect_conv(ps, "head", cfg.in_channels, cfg.width, 3);
  detail::expect_conv(ps, "enc.hidden", cfg.in_channels, cfg.encoder_hidden, 1);
  detail::expect_conv(ps, "enc.gamma", cfg.encoder_hidden, cfg.width, 1);
  detail::expect_conv(ps, "enc.beta", cfg.encoder_hidden, cfg.width, 1);
  for (int d = 0; d < cfg.cat_blocks; ++d) {
    for (int r = 0; r < cfg.res_blocks; ++r) {
      detail::expect_conv(ps, detail::res_name(d, r) + ".conv1", cfg.width, cfg.width, 3);
      detail::expect_conv(ps, detail::res_name(d, r) + ".conv2", cfg.width, cfg.width, 3);
    }
    detail::expect_conv(ps, "cat" + std::to_string(d) + ".conv", cfg.width, cfg.width, 3);
  }
  detail::expect_conv(ps, "body", cfg.width, cfg.width, 3);
  detail::expect_conv(ps, "tail", cfg.width, cfg.in_channels, 3);
  if (ps.numel() != count_params(cfg)) throw ConfigError("denoiser checkpoint has extra parameters");
}

// ---------------------------------------------------------------------------
// Noise-level estimator

/// Unclamped estimator output at full resolution. H and W must be
/// multiples of cfg.downsample(). Differentiable.
template <typename T>
Tensor<T> cenet_raw(const Tensor<T>& y, const ParameterSet<T>& ps, const CenetConfig& cfg) {
  const Shape& s = y.shape();
  if (s.c != cfg.in_channels) throw ShapeError("cenet: expected " + std::to_string(cfg.in_channels) + " channels");
  const int f = cfg.downsample();
  if (s.h % f != 0 || s.w % f != 0) {
    throw ShapeError("cenet: spatial size " + s.str() + " not divisible by " + std::to_string(f));
  }
  Tensor<T> h = y;
  for (std::size_t i = 0; i < cfg.strides.size(); ++i) {
    h = detail::conv(h, ps, "cenet.conv" + std::to_string(i), cfg.strides[i]);
    if (i + 1 < cfg.strides.size()) h = ops::relu(h);
  }
  return ops::bilinear_resize(h, s.h, s.w);
}

/// Estimated noise-level map for `y` (any spatial size).
///
/// Inputs whose sides are not multiples of the downsample factor are
/// reflect-padded and the map is cropped back. Output is clamped to [0, 1].
template <typename T>
SigmaMap<T> cenet_forward(const Tensor<T>& y, const ParameterSet<T>& ps, const CenetConfig& cfg) {
  const Shape& s = y.shape();
  const int f = cfg.downsample();
  const int ph = (f - s.h % f) % f;
  const int pw = (f - s.w % f) % f;
  Tensor<T> raw = (ph || pw) ? ops::crop(cenet_raw(ops::pad_reflect(y, 0, ph, 0, pw), ps, cfg), 0, 0, s.h, s.w)
                             : cenet_raw(y, ps, cfg);
  auto v = raw.data();
  std::vector<T> clamped(v.begin(), v.end());
  for (auto& x : clamped) x = std::clamp(x, T(0), T(1));
  return SigmaMap<T>(Tensor<T>::from_data(s, std::move(clamped)), SigmaProvenance::Estimated);
}

// ---------------------------------------------------------------------------
// Tunable denoiser

/// Modulation maps shared by every CATBlock: F_out = gamma * F_in + beta.
template <typename T>
struct AffineParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Encodes a full-resolution condition map (noise levels or pooled image).
template <typename T>
AffineParams<T> condition_encode(const Tensor<T>& c, const ParameterSet<T>& ps) {
  const Tensor<T> hidden = ops::relu(detail::conv(c, ps, "enc.hidden"));
  return AffineParams<T>{detail::conv(hidden, ps, "enc.gamma"), detail::conv(hidden, ps, "enc.beta")};
}

/// F + conv(relu(conv(F))).
template <typename T>
Tensor<T> resblock_forward(const Tensor<T>& f, const ParameterSet<T>& ps, const std::string& prefix) {
  const Tensor<T> t = detail::conv(ops::relu(detail::conv(f, ps, prefix + ".conv1")), ps, prefix + ".conv2");
  return ops::add(f, t);
}

template <typename T>
Tensor<T> catblock_forward(const Tensor<T>& f, const AffineParams<T>& affine, const ParameterSet<T>& ps,
                           const DenoiserConfig& cfg, int block) {
  const Shape& fs = f.shape();
  const Shape& gs = affine.gamma.shape();
  if (gs.h != fs.h || gs.w != fs.w || gs.c != fs.c || affine.beta.shape() != gs) {
    throw ShapeError("catblock: affine params " + gs.str() + " do not match features " + fs.str());
  }
  Tensor<T> t = f;
  for (int r = 0; r < cfg.res_blocks; ++r) t = resblock_forward(t, ps, detail::res_name(block, r));
  t = detail::conv(t, ps, "cat" + std::to_string(block) + ".conv");
  t = ops::add(ops::mul_elementwise(affine.gamma, t), affine.beta);
  return ops::add(f, t);
}

enum class ConditionKind {
  NoiseLevel,  // c is a noise-level map; must be non-negative
  Image,       // c is a pooled image (real-noise mode)
};

namespace detail {

template <typename T>
void check_condition(const Tensor<T>& y, const Tensor<T>& c, ConditionKind kind) {
  const Shape& ys = y.shape();
  const Shape& cs = c.shape();
  if (cs.c != ys.c || cs.h != ys.h || cs.w != ys.w || (cs.n != 1 && cs.n != ys.n)) {
    throw ShapeError("denoiser: condition " + cs.str() + " does not match input " + ys.str());
  }
  if (kind == ConditionKind::NoiseLevel) {
    for (T v : c.data())
      if (v < T(0)) throw ConfigError("denoiser: noise-level condition must be non-negative");
  }
}

}  // namespace detail

/// Denoiser trunk given precomputed affine params; the same object feeds every block.
template <typename T>
Tensor<T> denoiser_with_affine(const Tensor<T>& y, const AffineParams<T>& affine, const ParameterSet<T>& ps,
                               const DenoiserConfig& cfg) {
  if (y.shape().c != cfg.in_channels) {
    throw ShapeError("denoiser: expected " + std::to_string(cfg.in_channels) + " channels, got " + y.shape().str());
  }
  const Tensor<T> h0 = detail::conv(y, ps, "head");
  Tensor<T> h = h0;
  for (int d = 0; d < cfg.cat_blocks; ++d) h = catblock_forward(h, affine, ps, cfg, d);
  h = ops::add(detail::conv(h, ps, "body"), h0);
  const Tensor<T> noise = detail::conv(h, ps, "tail");
  return ops::sub(y, noise);
}

/// Clean-image estimate of `y` under condition `c` (same C x H x W as y).
template <typename T>
Tensor<T> denoiser_forward(const Tensor<T>& y, const Tensor<T>& c, const ParameterSet<T>& ps,
                           const DenoiserConfig& cfg, ConditionKind kind = ConditionKind::NoiseLevel) {
  detail::check_condition(y, c, kind);
  const AffineParams<T> affine = condition_encode(c, ps);
  return denoiser_with_affine(y, affine, ps, cfg);
}

/// Real-noise condition: 4x4 average pooling, replicated back to full size.
/// Sides that are not multiples of 4 are reflect-padded, then cropped.
template <typename T>
Tensor<T> avgpool_condition(const Tensor<T>& y) {
  constexpr int k = 4;
  const Shape& s = y.shape();
  const int ph = (k - s.h % k) % k;
  const int pw = (k - s.w % k) % k;
  const Tensor<T> padded = (ph || pw) ? ops::pad_reflect(y, 0, ph, 0, pw) : y;
  Tensor<T> c = ops::upsample_nearest(ops::avg_pool(padded, k, k), k);
  return (ph || pw) ? ops::crop(c, 0, 0, s.h, s.w) : c;
}

/// Config plus parameters of a noise-level estimator.
template <typename T>
struct CenetModel {
  CenetConfig config;
  ParameterSet<T> params;

  [[nodiscard]] SigmaMap<T> operator()(const Tensor<T>& y) const { return cenet_forward(y, params, config); }
};

/// Config plus parameters of a tunable denoiser.
template <typename T>
struct DenoiserModel {
  DenoiserConfig config;
  ParameterSet<T> params;

  [[nodiscard]] Tensor<T> operator()(const Tensor<T>& y, const Tensor<T>& c,
                                     ConditionKind kind = ConditionKind::NoiseLevel) const {
    return denoiser_forward(y, c, params, config, kind);
  }
};

}  // namespace dubd
