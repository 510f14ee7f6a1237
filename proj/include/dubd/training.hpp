#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dubd/checkpoint.hpp"
#include "dubd/dihedral.hpp"
#include "dubd/key_value.hpp"
#include "dubd/models.hpp"
#include "dubd/noise.hpp"
#include "dubd/ops.hpp"
#include "dubd/tensor.hpp"

namespace dubd {

// ---------------------------------------------------------------------------
// Losses

/// Mean squared error between true and predicted noise-level maps.
template <typename T>
Tensor<T> loss_cenet(const Tensor<T>& sigma_true, const Tensor<T>& sigma_pred) {
  return ops::mse(sigma_pred, sigma_true);
}

template <typename T>
Tensor<T> loss_cenet(const SigmaMap<T>& sigma_true, const SigmaMap<T>& sigma_pred) {
  return ops::mse(sigma_pred.values(), sigma_true.values());
}

/// Mean squared error between clean image and reconstruction.
template <typename T>
Tensor<T> loss_denoiser(const Tensor<T>& x, const Tensor<T>& x_hat) {
  return ops::mse(x_hat, x);
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  long long t = 0;
};

/// One bias-corrected Adam update of every parameter, using its grad.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ConfigError("adam state does not match parameter set");
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) throw ConfigError("adam_step: parameter '" + name + "' has no gradient");
  }
  ++state.t;
  const AdamHyper& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  std::size_t k = 0;
  for (auto& [name, p] : params) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    ++k;
    if (m.size() != p.numel()) throw ConfigError("adam state shape mismatch for '" + name + "'");
    auto w = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(h.beta1 * m[i] + (1.0 - h.beta1) * gi);
      v[i] = static_cast<T>(h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<T>(w[i] - lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Configuration

enum class ConditionMode { Oracle, Blind, Real };

inline const char* to_string(ConditionMode m) {
  switch (m) {
    case ConditionMode::Oracle: return "oracle-c";
    case ConditionMode::Blind: return "blind-c";
    case ConditionMode::Real: return "real-c";
  }
  return "unknown";
}

inline ConditionMode parse_condition_mode(const std::string& s) {
  if (s == "oracle-c" || s == "oracle") return ConditionMode::Oracle;
  if (s == "blind-c" || s == "blind") return ConditionMode::Blind;
  if (s == "real-c" || s == "real") return ConditionMode::Real;
  throw ConfigError("unknown condition mode '" + s + "'");
}

struct TrainConfig {
  int patch_size = 96;
  int batch_size = 16;
  int steps = 1000;
  double base_lr = 2e-4;
  int halve_at = 0;  // 0 selects steps / 2
  std::uint64_t seed = 0;
  std::string corpus = "synthetic:20:64:0";
  bool augment = false;
  double variant_fraction = 0.0;  // share of training maps drawn from spectral/spatial kinds
  NoiseSpec noise;
  CenetConfig cenet;
  DenoiserConfig denoiser;
  ConditionMode mode = ConditionMode::Oracle;

  [[nodiscard]] int effective_halve_at() const { return halve_at > 0 ? halve_at : steps / 2; }

  void validate() const {
    if (patch_size < 1 || batch_size < 1 || steps < 2) throw ConfigError("train config: sizes and steps must be positive");
    if (!(base_lr > 0)) throw ConfigError("train config: lr must be positive");
    const int h = effective_halve_at();
    if (h <= 0 || h >= steps) throw ConfigError("train config: halve_at must lie in (0, steps)");
    if (variant_fraction < 0 || variant_fraction > 1) throw ConfigError("train config: variant_fraction outside [0, 1]");
    if (noise.kind != NoiseKind::Uniform) throw ConfigError("train config: base noise kind must be uniform");
    noise.validate_training();
    cenet.validate();
    denoiser.validate();
  }

  [[nodiscard]] KeyValue to_key_value() const {
    KeyValue kv;
    kv.set("patch_size", patch_size);
    kv.set("batch_size", batch_size);
    kv.set("steps", steps);
    kv.set("lr", base_lr);
    kv.set("halve_at", effective_halve_at());
    kv.set("seed", static_cast<long long>(seed));
    kv.set("corpus", corpus);
    kv.set("augment", augment);
    kv.set("variant_fraction", variant_fraction);
    kv.set("mode", to_string(mode));
    kv.merge(noise.to_key_value(), "noise.");
    kv.merge(cenet.to_key_value(), "cenet.");
    kv.merge(denoiser.to_key_value(), "denoiser.");
    return kv;
  }

  static TrainConfig from_key_value(const KeyValue& kv) {
    static const std::vector<std::string> known{"patch_size", "batch_size", "steps",  "lr",   "halve_at",
                                                "seed",       "corpus",     "augment", "variant_fraction", "mode"};
    for (const auto& [k, v] : kv.items()) {
      const bool ok = std::find(known.begin(), known.end(), k) != known.end() || k.starts_with("noise.") ||
                      k.starts_with("cenet.") || k.starts_with("denoiser.");
      if (!ok) throw ConfigError("unknown train config key '" + k + "'");
    }
    TrainConfig c;
    c.patch_size = static_cast<int>(kv.integer("patch_size", c.patch_size));
    c.batch_size = static_cast<int>(kv.integer("batch_size", c.batch_size));
    c.steps = static_cast<int>(kv.integer("steps", c.steps));
    c.base_lr = kv.num("lr", c.base_lr);
    c.halve_at = static_cast<int>(kv.integer("halve_at", 0));
    c.seed = static_cast<std::uint64_t>(kv.integer("seed", 0));
    c.corpus = kv.str("corpus", c.corpus);
    c.augment = kv.flag("augment", false);
    c.variant_fraction = kv.num("variant_fraction", 0.0);
    c.mode = parse_condition_mode(kv.str("mode", "oracle-c"));
    c.noise = NoiseSpec::from_key_value(kv.section("noise."));
    c.cenet = CenetConfig::from_key_value(kv.section("cenet."));
    c.denoiser = DenoiserConfig::from_key_value(kv.section("denoiser."));
    c.validate();
    return c;
  }
};

/// Base rate until `halve_at`, half of it from then on.
inline double lr_schedule(int step, const TrainConfig& cfg) {
  return step < cfg.effective_halve_at() ? cfg.base_lr : cfg.base_lr / 2;
}

// ---------------------------------------------------------------------------
// Data

/// A patch_size x patch_size crop at a uniformly random corner, optionally
/// passed through a random dihedral transform.
template <typename T>
Tensor<T> sample_patches(const Tensor<T>& image, int patch_size, Rng& rng, bool augment = false) {
  const Shape& s = image.shape();
  if (s.n != 1) throw ShapeError("sample_patches: expected a single image");
  if (patch_size < 1 || s.h < patch_size || s.w < patch_size) {
    throw ShapeError("sample_patches: image " + s.str() + " smaller than patch " + std::to_string(patch_size));
  }
  std::uniform_int_distribution<int> ry(0, s.h - patch_size), rx(0, s.w - patch_size);
  const int top = ry(rng);
  const int left = rx(rng);
  Tensor<T> patch = ops::crop(image, top, left, patch_size, patch_size);
  if (augment) {
    std::uniform_int_distribution<int> rk(0, 7);
    patch = dihedral_transform(patch, rk(rng));
  }
  return patch;
}

namespace detail {

/// Noise spec for one training sample: the base uniform spec, or with
/// probability `variant_fraction` a spectral / spatial variant over the same range.
inline NoiseSpec draw_training_spec(const TrainConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  NoiseSpec spec = cfg.noise;
  if (cfg.variant_fraction > 0 && u(rng) < cfg.variant_fraction) {
    std::uniform_int_distribution<int> pick(0, 2);
    spec.levels.clear();
    switch (pick(rng)) {
      case 0: spec.kind = NoiseKind::Spectral; break;
      case 1:
        spec.kind = NoiseKind::SpatialGradient;
        spec.axis = u(rng) < 0.5 ? 0 : 1;
        break;
      default:
        spec.kind = NoiseKind::SpatialRegions;
        spec.layout = u(rng) < 0.5 ? "split" : "rects";
        break;
    }
  }
  return spec;
}

struct Batch {
  Tensor<float> clean;
  Tensor<float> noisy;
  Tensor<float> sigma;  // true noise-level maps (empty in real mode)
};

inline Batch draw_batch(const std::vector<Tensor<float>>& corpus, const TrainConfig& cfg, Rng& rng, bool real_noise) {
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<Tensor<float>> clean, noisy, sigma;
  for (int b = 0; b < cfg.batch_size; ++b) {
    Tensor<float> x = sample_patches(corpus[pick(rng)], cfg.patch_size, rng, cfg.augment);
    const Shape& s = x.shape();
    if (real_noise) {
      noisy.push_back(signal_dependent_noise(x, cfg.noise.gain_a, cfg.noise.gain_b, rng, cfg.noise.blur));
    } else {
      const NoiseSpec spec = draw_training_spec(cfg, rng);
      SigmaMap<float> map = sample_training_sigma<float>(spec, s.c, s.h, s.w, rng);
      noisy.push_back(add_gaussian_noise(x, map, rng));
      sigma.push_back(map.values());
    }
    clean.push_back(std::move(x));
  }
  Batch out{stack_batch(clean), stack_batch(noisy), {}};
  if (!sigma.empty()) out.sigma = stack_batch(sigma);
  return out;
}

inline void check_corpus(const std::vector<Tensor<float>>& corpus, const TrainConfig& cfg, int channels) {
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  for (const auto& img : corpus) {
    const Shape& s = img.shape();
    if (s.c != channels) throw ConfigError("corpus image has " + std::to_string(s.c) + " channels, model expects " + std::to_string(channels));
    if (s.h < cfg.patch_size || s.w < cfg.patch_size) {
      throw ConfigError("patch_size " + std::to_string(cfg.patch_size) + " exceeds corpus image " + s.str());
    }
  }
}

inline void check_loss(const Tensor<float>& loss, int step) {
  if (!std::isfinite(loss.item())) {
    throw NumericError("non-finite training loss at step " + std::to_string(step) + "; lower the learning rate or check the corpus");
  }
}

}  // namespace detail

struct LossPoint {
  int step;
  double lr;
  double loss;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossPoint> curve;
};

using ProgressFn = std::function<void(const LossPoint&)>;

/// Writes "step,lr,loss" rows.
inline std::string loss_curve_csv(const std::vector<LossPoint>& curve) {
  std::ostringstream os;
  os.precision(9);
  os << "step,lr,loss\n";
  for (const auto& p : curve) os << p.step << ',' << p.lr << ',' << p.loss << '\n';
  return os.str();
}

/// Trains the noise-level estimator on synthetic noise over `corpus`.
inline TrainResult train_cenet(const std::vector<Tensor<float>>& corpus, const TrainConfig& cfg,
                               const ProgressFn& progress = {}) {
  cfg.validate();
  detail::check_corpus(corpus, cfg, cfg.cenet.in_channels);
  if (cfg.patch_size % cfg.cenet.downsample() != 0) {
    throw ConfigError("patch_size must be a multiple of the estimator's downsample factor");
  }
  Rng rng(cfg.seed);
  CenetModel<float> model{cfg.cenet, init_cenet_params<float>(cfg.cenet, rng)};
  AdamState<float> adam;
  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    const detail::Batch batch = detail::draw_batch(corpus, cfg, rng, false);
    Tape<float> tape;
    Tensor<float> loss;
    {
      auto rec = tape.record();
      loss = loss_cenet(batch.sigma, cenet_raw(batch.noisy, model.params, model.config));
    }
    detail::check_loss(loss, step);
    model.params.zero_grad();
    tape.backward(loss);
    const double lr = lr_schedule(step, cfg);
    adam_step(model.params, adam, lr);
    result.curve.push_back({step, lr, loss.item()});
    if (progress) progress(result.curve.back());
  }
  KeyValue meta = cfg.to_key_value();
  meta.set("final_loss", result.curve.back().loss);
  result.checkpoint = make_checkpoint(model, meta);
  return result;
}

/// Trains the tunable denoiser. The condition fed during training depends
/// on `cfg.mode`: the true noise-level map (oracle), the frozen estimator's
/// output (blind, requires `cenet`), or the pooled noisy image under
/// signal-dependent noise (real).
inline TrainResult train_denoiser(const std::vector<Tensor<float>>& corpus, const TrainConfig& cfg,
                                  const CenetModel<float>* cenet = nullptr, const ProgressFn& progress = {}) {
  cfg.validate();
  detail::check_corpus(corpus, cfg, cfg.denoiser.in_channels);
  if (cfg.mode == ConditionMode::Blind && cenet == nullptr) throw ConfigError("blind-c training needs a trained estimator");
  Rng rng(cfg.seed);
  DenoiserModel<float> model{cfg.denoiser, init_denoiser_params<float>(cfg.denoiser, rng)};
  AdamState<float> adam;
  TrainResult result;
  const bool real = cfg.mode == ConditionMode::Real;
  const ConditionKind kind = real ? ConditionKind::Image : ConditionKind::NoiseLevel;
  for (int step = 0; step < cfg.steps; ++step) {
    const detail::Batch batch = detail::draw_batch(corpus, cfg, rng, real);
    Tensor<float> c;
    switch (cfg.mode) {
      case ConditionMode::Oracle: c = batch.sigma; break;
      case ConditionMode::Blind: c = cenet_forward(batch.noisy, cenet->params, cenet->config).values(); break;
      case ConditionMode::Real: c = avgpool_condition(batch.noisy); break;
    }
    Tape<float> tape;
    Tensor<float> loss;
    {
      auto rec = tape.record();
      loss = loss_denoiser(batch.clean, denoiser_forward(batch.noisy, c, model.params, model.config, kind));
    }
    detail::check_loss(loss, step);
    model.params.zero_grad();
    tape.backward(loss);
    const double lr = lr_schedule(step, cfg);
    adam_step(model.params, adam, lr);
    result.curve.push_back({step, lr, loss.item()});
    if (progress) progress(result.curve.back());
  }
  KeyValue meta = cfg.to_key_value();
  meta.set("final_loss", result.curve.back().loss);
  result.checkpoint = make_checkpoint(model, meta);
  return result;
}

}  // namespace dubd
