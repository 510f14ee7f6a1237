#pragma once

// Checkpoint files. Layout (all integers little-endian uint32):
//
//   "DUBDCKPT"                       8-byte magic
//   version                          currently 1
//   header_len, header bytes         "key = value" text, see below
//   param_count
//   param_count times:
//     name_len, name bytes           UTF-8
//     n, c, h, w                     tensor dims
//     n*c*h*w float32 values         IEEE-754, little-endian
//
// Header keys: "kind" (cenet | denoiser), "model.*" (the model config),
// and free-form "meta.*" training metadata. Parameters appear in
// declaration order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "dubd/key_value.hpp"
#include "dubd/models.hpp"
#include "dubd/parameter_set.hpp"

namespace dubd {

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'U', 'B', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;  // "cenet" or "denoiser"
  KeyValue model;    // model config
  KeyValue meta;     // training metadata
  ParameterSet<float> params;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  KeyValue header;
  header.set("kind", ck.kind);
  header.merge(ck.model, "model.");
  header.merge(ck.meta, "meta.");
  const std::string text = header.to_string();
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  detail::put_u32(out, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const Shape& s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_f32(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw IoError("not a checkpoint file (bad magic)");
  }
  detail::Reader r(bytes);
  r.str(kCheckpointMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const KeyValue header = KeyValue::parse(r.str(r.u32()));
  Checkpoint ck;
  ck.kind = header.str("kind");
  ck.model = header.section("model.");
  ck.meta = header.section("meta.");
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    Shape s{};
    s.n = static_cast<int>(r.u32());
    s.c = static_cast<int>(r.u32());
    s.h = static_cast<int>(r.u32());
    s.w = static_cast<int>(r.u32());
    check_shape_valid(s);
    std::vector<float> values(s.numel());
    for (auto& v : values) v = r.f32();
    ck.params.add(std::move(name), Tensor<float>::from_data(s, std::move(values)));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  const std::string bytes = encode_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

inline Checkpoint make_checkpoint(const CenetModel<float>& m, KeyValue meta = {}) {
  return Checkpoint{"cenet", m.config.to_key_value(), std::move(meta), m.params.clone()};
}

inline Checkpoint make_checkpoint(const DenoiserModel<float>& m, KeyValue meta = {}) {
  return Checkpoint{"denoiser", m.config.to_key_value(), std::move(meta), m.params.clone()};
}

/// Validates kind, config and parameter shapes; ConfigError on mismatch.
template <typename T = float>
CenetModel<T> cenet_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "cenet") throw ConfigError("expected a cenet checkpoint, got '" + ck.kind + "'");
  CenetModel<T> m{CenetConfig::from_key_value(ck.model), ck.params.template cast<T>()};
  check_cenet_params(m.config, m.params);
  m.params.set_requires_grad(false);
  return m;
}

template <typename T = float>
DenoiserModel<T> denoiser_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "denoiser") throw ConfigError("expected a denoiser checkpoint, got '" + ck.kind + "'");
  DenoiserModel<T> m{DenoiserConfig::from_key_value(ck.model), ck.params.template cast<T>()};
  check_denoiser_params(m.config, m.params);
  m.params.set_requires_grad(false);
  return m;
}

}  // namespace dubd
