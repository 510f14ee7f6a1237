#pragma once

// HTTP front end for the tuning UI. Wire formats are documented in
// docs/http_api.md; summary:
//
//   GET  /health      -> JSON {status, version, cenet_params, denoiser_params, ...}
//   POST /denoise     multipart: image (PNG), c ("<level>" | "blind" | "real"),
//                     optional reference (PNG), optional ensemble ("1")
//                     -> image/png; header X-PSNR when a reference is given
//   POST /add-noise   multipart: image (PNG), sigma (noise text), optional seed
//                     -> image/png
//   GET  /sweep       query: image, reference (base64url PNG), optional grid "lo:hi:step"
//   POST /sweep       multipart with the same fields
//                     -> JSON {csv, argmax, max_psnr, grid_size, blind_c?, blind_psnr?}
//
// Errors answer with JSON {"error": "..."}: 400 for malformed requests,
// 413 when a body exceeds the size cap, 500 for internal failures.

#ifndef CPPHTTPLIB_REQUEST_URI_MAX_LENGTH
// Large enough for two base64 images of up to the default body cap.
#define CPPHTTPLIB_REQUEST_URI_MAX_LENGTH (12 * 1024 * 1024)
#endif

#include <httplib.h>

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dubd/eval.hpp"
#include "dubd/image_io.hpp"
#include "dubd/inference.hpp"

namespace dubd {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr std::size_t kDefaultBodyCap = 4u * 1024u * 1024u;

/// Thrown for client-side request problems; maps to HTTP 400 or 413.
class RequestError : public Error {
 public:
  RequestError(int status, const std::string& what) : Error(what), status_(status) {}
  [[nodiscard]] int status() const { return status_; }

 private:
  int status_;
};

/// Decodes standard or URL-safe base64, padding optional.
inline std::string base64_decode(const std::string& in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+' || c == '-') return 62;
    if (c == '/' || c == '_') return 63;
    return -1;
  };
  std::string out;
  out.reserve(in.size() * 3 / 4);
  std::uint32_t buf = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=') break;
    const int v = value(c);
    if (v < 0) throw RequestError(400, "invalid base64 payload");
    buf = (buf << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((buf >> bits) & 0xFFu));
    }
  }
  return out;
}

/// URL-safe base64 without padding.
inline std::string base64url_encode(const std::string& in) {
  static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_";
  std::string out;
  std::uint32_t buf = 0;
  int bits = 0;
  for (unsigned char c : in) {
    buf = (buf << 8) | c;
    bits += 8;
    while (bits >= 6) {
      bits -= 6;
      out.push_back(table[(buf >> bits) & 0x3Fu]);
    }
  }
  if (bits > 0) out.push_back(table[(buf << (6 - bits)) & 0x3Fu]);
  return out;
}

struct ServiceOptions {
  std::size_t body_cap = kDefaultBodyCap;
  std::string static_dir;  // served at "/" when non-empty
};

namespace detail {

inline std::optional<std::string> field(const httplib::Request& req, const std::string& name) {
  if (req.is_multipart_form_data()) {
    if (req.has_file(name)) return req.get_file_value(name).content;
    return std::nullopt;
  }
  if (req.has_param(name)) return req.get_param_value(name);
  return std::nullopt;
}

inline std::string required(const httplib::Request& req, const std::string& name) {
  auto v = field(req, name);
  if (!v) throw RequestError(400, "missing field '" + name + "'");
  return *v;
}

inline Tensor<float> image_field(const httplib::Request& req, const std::string& name, bool base64) {
  std::string bytes = required(req, name);
  if (base64) bytes = base64_decode(bytes);
  try {
    return decode_png(bytes);
  } catch (const IoError& e) {
    throw RequestError(400, "field '" + name + "': " + e.what());
  }
}

inline std::optional<Tensor<float>> optional_image(const httplib::Request& req, const std::string& name, bool base64) {
  if (!field(req, name)) return std::nullopt;
  return image_field(req, name, base64);
}

inline void send_error(httplib::Response& res, int status, const std::string& msg) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
}

/// Runs `body`, translating library errors into HTTP statuses.
template <typename Fn>
httplib::Server::Handler guarded(Fn body) {
  return [body](const httplib::Request& req, httplib::Response& res) {
    try {
      body(req, res);
    } catch (const RequestError& e) {
      send_error(res, e.status(), e.what());
    } catch (const ConfigError& e) {
      send_error(res, 400, e.what());
    } catch (const ShapeError& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, std::string("internal error: ") + e.what());
    }
  };
}

inline std::vector<double> parse_grid(const std::string& text) {
  KeyValue kv;
  std::string t = text;
  std::replace(t.begin(), t.end(), ':', ',');
  kv.set("grid", t);
  const auto v = kv.list("grid");
  if (v.size() != 3) throw RequestError(400, "grid must be 'lo:hi:step'");
  return make_grid(v[0], v[1], v[2]);
}

}  // namespace detail

/// JSON body of GET /health.
inline nlohmann::json health_json(const Engine& engine) {
  nlohmann::json j{{"status", "ok"},
                   {"version", kVersion},
                   {"denoiser_params", engine.denoiser.params.numel()},
                   {"cenet_params", engine.cenet ? nlohmann::json(engine.cenet->params.numel()) : nlohmann::json(nullptr)},
                   {"default_cenet_params", count_params(CenetConfig{})},
                   {"default_denoiser_params", count_params(DenoiserConfig{})},
                   {"fingerprint", engine.fingerprint}};
  return j;
}

/// Registers every route on `server`. The engine must outlive the server
/// and is only read, so concurrent requests are safe.
inline void install_routes(httplib::Server& server, const Engine& engine, const ServiceOptions& opts = {}) {
  server.set_payload_max_length(opts.body_cap);
  // Statuses raised by the server itself (413, 404) still answer in JSON.
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) detail::send_error(res, res.status, httplib::status_message(res.status));
  });
  if (!opts.static_dir.empty()) server.set_mount_point("/", opts.static_dir);

  server.Get("/health", detail::guarded([&engine](const httplib::Request&, httplib::Response& res) {
    res.set_content(health_json(engine).dump(), "application/json");
  }));

  server.Post("/denoise", detail::guarded([&engine](const httplib::Request& req, httplib::Response& res) {
    const Tensor<float> y = detail::image_field(req, "image", false);
    const ConditionRequest cond = ConditionRequest::parse(detail::required(req, "c"));
    const bool ensemble = detail::field(req, "ensemble").value_or("0") == "1";
    const auto reference = detail::optional_image(req, "reference", false);
    const Tensor<float> x_hat = denoise_image(engine, y, cond, ensemble);
    if (reference) {
      if (reference->shape() != y.shape()) throw RequestError(400, "reference and image differ in shape");
      std::ostringstream os;
      os.precision(10);
      os << psnr(quantize_image(x_hat), *reference);
      res.set_header("X-PSNR", os.str());
    }
    res.set_content(encode_png(x_hat), "image/png");
  }));

  server.Post("/add-noise", detail::guarded([](const httplib::Request& req, httplib::Response& res) {
    const Tensor<float> x = detail::image_field(req, "image", false);
    const std::string sigma = detail::required(req, "sigma");
    std::uint64_t seed = 0;
    if (auto s = detail::field(req, "seed")) {
      try {
        seed = std::stoull(*s);
      } catch (const std::exception&) {
        throw RequestError(400, "seed must be a non-negative integer");
      }
    }
    res.set_content(encode_png(synthesize_noise(x, sigma, seed)), "image/png");
  }));

  auto sweep = [&engine](bool base64) {
    return detail::guarded([&engine, base64](const httplib::Request& req, httplib::Response& res) {
      const Tensor<float> y = detail::image_field(req, "image", base64);
      const Tensor<float> x = detail::image_field(req, "reference", base64);
      const auto grid_text = detail::field(req, "grid");
      const std::vector<double> grid = grid_text ? detail::parse_grid(*grid_text) : make_grid(5, 70, 1);
      const SweepResult r = sweep_engine(engine, y, x, grid);
      nlohmann::json j{{"csv", r.to_csv()},
                       {"argmax", r.argmax_c},
                       {"max_psnr", r.max_psnr},
                       {"grid_size", r.grid.size()}};
      if (r.blind_c) {
        j["blind_c"] = *r.blind_c;
        j["blind_psnr"] = *r.blind_psnr;
      }
      res.set_content(j.dump(), "application/json");
    });
  };
  server.Get("/sweep", sweep(true));
  server.Post("/sweep", sweep(false));
}

}  // namespace dubd
