#pragma once

// Clean-image corpora: a directory of PNGs, or a procedural set of
// piecewise-smooth color images ("synthetic:COUNT[:SIZE[:SEED]]").

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dubd/image_io.hpp"
#include "dubd/noise.hpp"
#include "dubd/tensor.hpp"

namespace dubd {

/// One procedural image: smooth background, flat and shaded shapes, a striped patch.
inline Tensor<float> synthetic_image(int channels, int h, int w, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto color = [&] {
    std::vector<double> c(static_cast<std::size_t>(channels));
    for (auto& v : c) v = 0.1 + 0.8 * u01(rng);
    return c;
  };
  std::vector<double> img(static_cast<std::size_t>(channels) * h * w);
  auto at = [&](int c, int y, int x) -> double& { return img[(static_cast<std::size_t>(c) * h + y) * w + x]; };

  const auto c0 = color();
  const auto c1 = color();
  const double angle = u01(rng) * 2 * std::numbers::pi;
  const double dx = std::cos(angle), dy = std::sin(angle);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double t = std::clamp(0.5 + ((x - w / 2.0) * dx + (y - h / 2.0) * dy) / (h + w), 0.0, 1.0);
      for (int c = 0; c < channels; ++c) at(c, y, x) = (1 - t) * c0[c] + t * c1[c];
    }

  std::uniform_int_distribution<int> shapes_n(3, 7);
  const int shapes = shapes_n(rng);
  for (int s = 0; s < shapes; ++s) {
    const auto col = color();
    const double cy = u01(rng) * h, cx = u01(rng) * w;
    const double ry = (0.08 + 0.3 * u01(rng)) * h, rx = (0.08 + 0.3 * u01(rng)) * w;
    const bool disk = u01(rng) < 0.5;
    const double shade = 0.3 * (u01(rng) - 0.5);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double ny = (y - cy) / ry, nx = (x - cx) / rx;
        const bool inside = disk ? nx * nx + ny * ny <= 1.0 : std::abs(nx) <= 1.0 && std::abs(ny) <= 1.0;
        if (!inside) continue;
        for (int c = 0; c < channels; ++c) at(c, y, x) = col[c] + shade * ny;
      }
  }

  // Striped patch: oriented sinusoid blended over a rectangle.
  const int sy = static_cast<int>(u01(rng) * h * 0.6), sx = static_cast<int>(u01(rng) * w * 0.6);
  const int sh = std::max(4, static_cast<int>(h * (0.2 + 0.2 * u01(rng))));
  const int sw = std::max(4, static_cast<int>(w * (0.2 + 0.2 * u01(rng))));
  const double period = 3.0 + 6.0 * u01(rng);
  const double theta = u01(rng) * std::numbers::pi;
  const double amp = 0.1 + 0.15 * u01(rng);
  for (int y = sy; y < std::min(h, sy + sh); ++y)
    for (int x = sx; x < std::min(w, sx + sw); ++x) {
      const double phase = 2 * std::numbers::pi * (x * std::cos(theta) + y * std::sin(theta)) / period;
      for (int c = 0; c < channels; ++c) at(c, y, x) += amp * std::sin(phase);
    }

  std::vector<float> out(img.size());
  std::transform(img.begin(), img.end(), out.begin(),
                 [](double v) { return static_cast<float>(std::clamp(v, 0.02, 0.98)); });
  return Tensor<float>::from_data(Shape{1, channels, h, w}, std::move(out));
}

inline std::vector<Tensor<float>> synthetic_corpus(int count, int size, std::uint64_t seed, int channels = 3) {
  if (count < 1 || size < 1) throw ConfigError("synthetic corpus: count and size must be positive");
  Rng rng(seed);
  std::vector<Tensor<float>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(synthetic_image(channels, size, size, rng));
  return out;
}

/// Loads a corpus from a PNG file, a directory of PNGs (sorted by name),
/// or "synthetic:COUNT[:SIZE[:SEED]]".
inline std::vector<Tensor<float>> load_corpus(const std::string& spec) {
  namespace fs = std::filesystem;
  if (spec.starts_with("synthetic:")) {
    std::vector<long long> parts;
    std::stringstream ss(spec.substr(10));
    std::string item;
    while (std::getline(ss, item, ':')) {
      try {
        parts.push_back(std::stoll(item));
      } catch (const std::exception&) {
        throw ConfigError("bad synthetic corpus spec '" + spec + "'");
      }
    }
    if (parts.empty() || parts.size() > 3) throw ConfigError("bad synthetic corpus spec '" + spec + "'");
    const int count = static_cast<int>(parts[0]);
    const int size = parts.size() > 1 ? static_cast<int>(parts[1]) : 64;
    const auto seed = parts.size() > 2 ? static_cast<std::uint64_t>(parts[2]) : 0;
    return synthetic_corpus(count, size, seed);
  }
  const fs::path p(spec);
  if (fs::is_regular_file(p)) return {read_png(spec)};
  if (!fs::is_directory(p)) throw IoError("corpus path '" + spec + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Tensor<float>> out;
  for (const auto& f : files) out.push_back(read_png(f.string()));
  if (out.empty()) throw ConfigError("corpus '" + spec + "' contains no PNG images");
  return out;
}

}  // namespace dubd
