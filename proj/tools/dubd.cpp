// dubd: command-line front end (training, inference, analysis, HTTP service).
//
// Exit codes: 0 ok, 1 unexpected failure, 2 I/O error,
// 3 checkpoint/config mismatch, 4 invalid flags.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "dubd/corpus.hpp"
#include "dubd/image_io.hpp"
#include "dubd/inference.hpp"
#include "dubd/service.hpp"
#include "dubd/training.hpp"

namespace fs = std::filesystem;
using namespace dubd;

namespace {

constexpr int kExitIo = 2;
constexpr int kExitMismatch = 3;
constexpr int kExitFlags = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string default_dir() {
  const char* env = std::getenv("DUBD_CHECKPOINT_DIR");
  return env && *env ? env : ".";
}

// Explicit path, else <DUBD_CHECKPOINT_DIR>/<name>, else empty.
std::string resolve(const std::string& given, const std::string& name, bool required) {
  if (!given.empty()) return given;
  const fs::path p = fs::path(default_dir()) / name;
  if (fs::exists(p)) return p.string();
  if (required) throw UsageError("no --checkpoint given and " + p.string() + " does not exist");
  return "";
}

struct TrainArgs {
  std::string config;
  std::string out_dir;
  std::string corpus;
  std::string cenet;
  std::string mode;
  std::vector<std::string> overrides;
  int steps = 0;
  long long seed = -1;
  bool quiet = false;
};

TrainConfig build_config(const TrainArgs& a) {
  KeyValue kv = a.config.empty() ? KeyValue{} : KeyValue::load(a.config);
  for (const auto& o : a.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + o + "'");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (!a.corpus.empty()) kv.set("corpus", a.corpus);
  if (a.steps > 0) kv.set("steps", a.steps);
  if (a.seed >= 0) kv.set("seed", a.seed);
  if (!a.mode.empty()) kv.set("mode", a.mode);
  return TrainConfig::from_key_value(kv);
}

void add_train_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config, "TrainConfig file (key = value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--out-dir", a.out_dir, "Output directory (default: $DUBD_CHECKPOINT_DIR or .)");
  cmd->add_option("--corpus", a.corpus, "PNG file, PNG directory, or synthetic:COUNT[:SIZE[:SEED]]");
  cmd->add_option("--steps", a.steps, "Override the number of steps");
  cmd->add_option("--seed", a.seed, "Override the seed");
  cmd->add_option("--set", a.overrides, "Override any config key (key=value), repeatable");
  cmd->add_flag("--quiet", a.quiet, "Suppress per-step progress");
}

ProgressFn progress_printer(bool quiet, int steps) {
  if (quiet) return {};
  return [steps](const LossPoint& p) {
    if (p.step % 50 == 0 || p.step + 1 == steps) std::cerr << "step " << p.step << " lr " << p.lr << " loss " << p.loss << '\n';
  };
}

void write_training_outputs(const TrainResult& r, const std::string& dir, const std::string& stem) {
  fs::create_directories(dir);
  save_checkpoint(r.checkpoint, (fs::path(dir) / (stem + ".ckpt")).string());
  write_file((fs::path(dir) / (stem + "_loss.csv")).string(), loss_curve_csv(r.curve));
  std::cout << "wrote " << (fs::path(dir) / (stem + ".ckpt")).string() << " (final loss " << r.curve.back().loss << ")\n";
}

std::string mode_tag(const ConditionRequest& r) {
  switch (r.kind) {
    case ConditionRequest::Kind::Sigma: return "NB";
    case ConditionRequest::Kind::Blind: return "B";
    case ConditionRequest::Kind::Real: return "R";
  }
  return "?";
}

void require_cenet_for(const ConditionRequest& r, const std::string& cenet) {
  if (r.kind == ConditionRequest::Kind::Blind && cenet.empty()) throw UsageError("--mode blind requires --cenet");
}

ConditionRequest parse_mode(const std::string& text) {
  try {
    return ConditionRequest::parse(text);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Blind denoiser with a tunable noise-level condition"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // train-cenet
  TrainArgs tc;
  auto* train_cenet_cmd = app.add_subcommand("train-cenet", "Train the noise-level estimator");
  add_train_flags(train_cenet_cmd, tc);
  train_cenet_cmd->callback([&] {
    const TrainConfig cfg = build_config(tc);
    const auto corpus = load_corpus(cfg.corpus);
    const TrainResult r = train_cenet(corpus, cfg, progress_printer(tc.quiet, cfg.steps));
    write_training_outputs(r, tc.out_dir.empty() ? default_dir() : tc.out_dir, "cenet");
  });

  // train-denoiser
  TrainArgs td;
  auto* train_den_cmd = app.add_subcommand("train-denoiser", "Train the tunable denoiser");
  add_train_flags(train_den_cmd, td);
  train_den_cmd->add_option("--mode", td.mode, "Condition during training: oracle-c, blind-c or real-c");
  train_den_cmd->add_option("--cenet", td.cenet, "Estimator checkpoint (blind-c)");
  train_den_cmd->callback([&] {
    const TrainConfig cfg = build_config(td);
    std::optional<CenetModel<float>> cenet;
    if (cfg.mode == ConditionMode::Blind) {
      if (td.cenet.empty()) throw UsageError("--mode blind-c requires --cenet");
      cenet = cenet_from_checkpoint(load_checkpoint(td.cenet));
    }
    const auto corpus = load_corpus(cfg.corpus);
    const TrainResult r = train_denoiser(corpus, cfg, cenet ? &*cenet : nullptr, progress_printer(td.quiet, cfg.steps));
    write_training_outputs(r, td.out_dir.empty() ? default_dir() : td.out_dir, "denoiser");
  });

  // denoise
  std::string input, checkpoint, cenet_path, mode = "blind", output, reference;
  bool ensemble = false;
  auto* denoise_cmd = app.add_subcommand("denoise", "Denoise one PNG image");
  denoise_cmd->add_option("--input", input, "Noisy PNG")->required();
  denoise_cmd->add_option("--checkpoint", checkpoint, "Denoiser checkpoint (default: $DUBD_CHECKPOINT_DIR/denoiser.ckpt)");
  denoise_cmd->add_option("--cenet", cenet_path, "Estimator checkpoint (required for --mode blind)");
  denoise_cmd->add_option("--mode", mode, "blind, real, sigma=S or S (255 scale)");
  denoise_cmd->add_option("--output", output, "Output PNG")->required();
  denoise_cmd->add_option("--reference", reference, "Clean PNG; prints PSNR of the output");
  denoise_cmd->add_flag("--ensemble", ensemble, "Average over the 8 dihedral transforms");
  denoise_cmd->callback([&] {
    const ConditionRequest req = parse_mode(mode);
    require_cenet_for(req, cenet_path);
    const Engine e = Engine::load(resolve(checkpoint, "denoiser.ckpt", true), cenet_path);
    const Tensor<float> y = read_png(input);
    const Tensor<float> x_hat = quantize_image(denoise_image(e, y, req, ensemble));
    write_png(x_hat, output);
    if (!reference.empty()) {
      const Tensor<float> x = read_png(reference);
      std::cout << "psnr " << psnr(x_hat, x) << '\n';
    }
  });

  // estimate-sigma
  std::string est_input, est_cenet, est_map;
  auto* est_cmd = app.add_subcommand("estimate-sigma", "Estimate the noise level of a PNG image");
  est_cmd->add_option("--input", est_input, "Noisy PNG")->required();
  est_cmd->add_option("--cenet", est_cenet, "Estimator checkpoint (default: $DUBD_CHECKPOINT_DIR/cenet.ckpt)");
  est_cmd->add_option("--map-output", est_map, "Write the full noise-level map (binary)");
  est_cmd->callback([&] {
    const auto c = cenet_from_checkpoint(load_checkpoint(resolve(est_cenet, "cenet.ckpt", true)));
    const Tensor<float> y = read_png(est_input);
    if (y.shape().c != c.config.in_channels) throw ConfigError("image channel count does not match the estimator");
    const SigmaMap<float> m = c(y);
    std::cout << "sigma " << m.mean() * kPixelScale << '\n';
    if (!est_map.empty()) write_file(est_map, m.serialize());
  });

  // sweep-c
  std::string sw_input, sw_ref, sw_ckpt, sw_cenet, sw_grid = "5:70:1", sw_out, sw_plot;
  auto* sweep_cmd = app.add_subcommand("sweep-c", "PSNR as a function of the condition level");
  sweep_cmd->add_option("--input", sw_input, "Noisy PNG")->required();
  sweep_cmd->add_option("--reference", sw_ref, "Clean PNG")->required();
  sweep_cmd->add_option("--checkpoint", sw_ckpt, "Denoiser checkpoint");
  sweep_cmd->add_option("--cenet", sw_cenet, "Estimator checkpoint; adds the blind estimate row");
  sweep_cmd->add_option("--grid", sw_grid, "lo:hi:step on the 255 scale");
  sweep_cmd->add_option("--output", sw_out, "CSV (kind,c,psnr); default stdout");
  sweep_cmd->add_option("--plot", sw_plot, "Two-column c,psnr CSV");
  sweep_cmd->callback([&] {
    std::vector<double> grid;
    try {
      grid = detail::parse_grid(sw_grid);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    const Engine e = Engine::load(resolve(sw_ckpt, "denoiser.ckpt", true), sw_cenet);
    const SweepResult r = sweep_engine(e, read_png(sw_input), read_png(sw_ref), grid);
    if (sw_out.empty()) std::cout << r.to_csv();
    else write_file(sw_out, r.to_csv());
    if (!sw_plot.empty()) write_file(sw_plot, r.to_plot_csv());
    std::cerr << "argmax c " << r.argmax_c << " psnr " << r.max_psnr << '\n';
  });

  // eval
  std::string ev_ckpt, ev_cenet, ev_corpus = "synthetic:8:64:1000", ev_mode = "30", ev_noise, ev_out;
  std::uint64_t ev_seed = 0;
  bool ev_ensemble = false;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM report over a clean corpus with synthetic noise");
  eval_cmd->add_option("--checkpoint", ev_ckpt, "Denoiser checkpoint");
  eval_cmd->add_option("--cenet", ev_cenet, "Estimator checkpoint (required for --mode blind)");
  eval_cmd->add_option("--corpus", ev_corpus, "Clean images: PNG file, directory, or synthetic:COUNT[:SIZE[:SEED]]");
  eval_cmd->add_option("--mode", ev_mode, "Condition: blind, real, sigma=S or S");
  eval_cmd->add_option("--noise", ev_noise, "Noise to add, e.g. 30, spectral:15,30,45, split:10,50, signal "
                                            "(default: the --mode level, or 30 for blind, signal for real)");
  eval_cmd->add_option("--seed", ev_seed, "Noise seed");
  eval_cmd->add_option("--output", ev_out, "Report CSV; default stdout");
  eval_cmd->add_flag("--ensemble", ev_ensemble, "Use the 8-fold self-ensemble");
  eval_cmd->callback([&] {
    const ConditionRequest req = parse_mode(ev_mode);
    require_cenet_for(req, ev_cenet);
    std::string noise = ev_noise;
    if (noise.empty()) {
      if (req.kind == ConditionRequest::Kind::Sigma) noise = std::to_string(req.sigma255);
      else noise = req.kind == ConditionRequest::Kind::Real ? "signal" : "30";
    }
    const Engine e = Engine::load(resolve(ev_ckpt, "denoiser.ckpt", true), ev_cenet);
    const auto corpus = load_corpus(ev_corpus);
    EvalReport report{mode_tag(req), e.fingerprint, {}};
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const Tensor<float>& x = corpus[i];
      const Tensor<float> y = synthesize_noise(x, noise, ev_seed + i);
      const Tensor<float> x_hat = quantize_image(denoise_image(e, y, req, ev_ensemble));
      report.rows.push_back({"image" + std::to_string(i), psnr(x_hat, x), ssim(x_hat, x)});
    }
    if (ev_out.empty()) std::cout << report.to_csv();
    else write_file(ev_out, report.to_csv());
    std::cerr << "mean psnr " << report.mean_psnr() << " ssim " << report.mean_ssim() << '\n';
  });

  // serve
  std::string sv_ckpt, sv_cenet, sv_host = "127.0.0.1", sv_static;
  int sv_port = 8080;
  std::size_t sv_cap = kDefaultBodyCap;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--checkpoint", sv_ckpt, "Denoiser checkpoint");
  serve_cmd->add_option("--cenet", sv_cenet, "Estimator checkpoint (enables blind requests)");
  serve_cmd->add_option("--host", sv_host, "Bind address");
  serve_cmd->add_option("--port", sv_port, "Port (0 picks a free one)");
  serve_cmd->add_option("--static", sv_static, "Directory served at /")->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--max-body", sv_cap, "Request body cap in bytes");
  serve_cmd->callback([&] {
    const Engine e = Engine::load(resolve(sv_ckpt, "denoiser.ckpt", true), resolve(sv_cenet, "cenet.ckpt", false));
    httplib::Server server;
    install_routes(server, e, ServiceOptions{sv_cap, sv_static});
    int port = sv_port;
    if (port == 0) {
      port = server.bind_to_any_port(sv_host);
    } else if (!server.bind_to_port(sv_host, port)) {
      throw IoError("cannot bind " + sv_host + ":" + std::to_string(port));
    }
    std::cout << "listening on " << sv_host << ':' << port << std::endl;
    server.listen_after_bind();
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitFlags;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitFlags;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    // Config, shape and checkpoint problems: the inputs do not fit together.
    std::cerr << "mismatch: " << e.what() << '\n';
    return kExitMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int main(int argc, char** argv) { return run(argc, argv); }
