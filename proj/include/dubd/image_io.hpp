#pragma once

// 8-bit PNG <-> 1xCxHxW tensors in [0, 1]. Gray and RGB are supported;
// alpha is dropped. Encoding clips to [0, 1] and rounds half-to-even.

#include <png.h>

#include <cfenv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dubd/tensor.hpp"

namespace dubd {

namespace detail {

struct PngImage {
  png_image img{};
  PngImage() {
    img.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&img); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

}  // namespace detail

/// Decodes PNG bytes. Color inputs become 3 channels, gray inputs 1.
inline Tensor<float> decode_png(const std::string& bytes) {
  detail::PngImage p;
  if (!png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size())) {
    throw IoError(std::string("invalid PNG: ") + p.img.message);
  }
  const bool color = (p.img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  p.img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int c = color ? 3 : 1;
  const int h = static_cast<int>(p.img.height);
  const int w = static_cast<int>(p.img.width);
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(p.img));
  if (!png_image_finish_read(&p.img, nullptr, buf.data(), 0, nullptr)) {
    throw IoError(std::string("PNG decode failed: ") + p.img.message);
  }
  std::vector<float> out(static_cast<std::size_t>(c) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<std::size_t>(ch) * h + y) * w + x] = static_cast<float>(buf[(static_cast<std::size_t>(y) * w + x) * c + ch]) / 255.0f;
  return Tensor<float>::from_data(Shape{1, c, h, w}, std::move(out));
}

/// Quantizes one value the way encode_png does.
inline std::uint8_t quantize_u8(double v) {
  const double scaled = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::nearbyint(scaled));  // default mode rounds half to even
}

/// The 8-bit round trip of an image (what encode_png then decode_png yields).
template <typename T>
Tensor<T> quantize_image(const Tensor<T>& x) {
  auto out = x.clone();
  for (auto& v : out.data()) v = static_cast<T>(quantize_u8(v) / 255.0);
  return out;
}

/// Encodes a 1xCxHxW image (C = 1 or 3).
template <typename T>
std::string encode_png(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) throw ShapeError("encode_png: expected 1x1xHxW or 1x3xHxW, got " + s.str());
  if (std::fegetround() != FE_TONEAREST) throw Error("encode_png: floating-point rounding mode must be to-nearest");
  std::vector<png_byte> buf(s.numel());
  auto v = x.data();
  for (int y = 0; y < s.h; ++y)
    for (int xx = 0; xx < s.w; ++xx)
      for (int ch = 0; ch < s.c; ++ch)
        buf[(static_cast<std::size_t>(y) * s.w + xx) * s.c + ch] = quantize_u8(v[(static_cast<std::size_t>(ch) * s.h + y) * s.w + xx]);
  detail::PngImage p;
  p.img.width = static_cast<png_uint_32>(s.w);
  p.img.height = static_cast<png_uint_32>(s.h);
  p.img.format = s.c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&p.img, nullptr, &size, 0, buf.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + p.img.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&p.img, out.data(), &size, 0, buf.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + p.img.message);
  }
  out.resize(size);
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline Tensor<float> read_png(const std::string& path) { return decode_png(read_file(path)); }

template <typename T>
void write_png(const Tensor<T>& x, const std::string& path) {
  write_file(path, encode_png(x));
}

}  // namespace dubd
