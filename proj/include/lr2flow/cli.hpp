#pragma once

// Command-line driver. Exit codes: 0 success, 1 usage or configuration
// error, 2 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lr2flow/bicubic.hpp"
#include "lr2flow/checkpoint.hpp"
#include "lr2flow/config.hpp"
#include "lr2flow/framelet.hpp"
#include "lr2flow/image_io.hpp"
#include "lr2flow/jpeg.hpp"
#include "lr2flow/metrics.hpp"
#include "lr2flow/operators.hpp"
#include "lr2flow/theory.hpp"
#include "lr2flow/train.hpp"

namespace lr2flow {

inline constexpr const char* kVersion = "0.1.0";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Tiling: models act on fixed-size patches

struct Tiling {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t h = 0;
  std::size_t w = 0;
};

/// Crops `img` to whole tiles and stacks them row-major into [B, h, w].
inline std::pair<Tensor, Tiling> to_tiles(const Tensor& img, const Shape& patch) {
  if (img.rank() != 2 || patch.size() != 2) throw ShapeError("to_tiles: expected 2-D image and patch shapes");
  Tiling t{img.dim(0) / patch[0], img.dim(1) / patch[1], patch[0], patch[1]};
  if (t.rows == 0 || t.cols == 0) {
    throw ShapeError("image " + shape_str(img.shape()) + " is smaller than the model patch " + shape_str(patch));
  }
  Tensor out(Shape{t.rows * t.cols, t.h, t.w});
  const std::size_t W = img.dim(1);
  for (std::size_t tr = 0; tr < t.rows; ++tr)
    for (std::size_t tc = 0; tc < t.cols; ++tc)
      for (std::size_t i = 0; i < t.h; ++i)
        for (std::size_t j = 0; j < t.w; ++j)
          out[((tr * t.cols + tc) * t.h + i) * t.w + j] = img[(tr * t.h + i) * W + tc * t.w + j];
  return {std::move(out), t};
}

/// Inverse of to_tiles for [B, h', w'] stacks (h', w' may differ from the tiling).
inline Tensor from_tiles(const Tensor& tiles, const Tiling& t) {
  const std::size_t h = tiles.dim(1), w = tiles.dim(2);
  Tensor out(Shape{t.rows * h, t.cols * w});
  const std::size_t W = t.cols * w;
  for (std::size_t tr = 0; tr < t.rows; ++tr)
    for (std::size_t tc = 0; tc < t.cols; ++tc)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          out[(tr * h + i) * W + tc * w + j] = tiles[((tr * t.cols + tc) * h + i) * w + j];
  return out;
}

inline Tensor crop(const Tensor& img, std::size_t h, std::size_t w) {
  Tensor out(Shape{h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = img.at(i, j);
  return out;
}

inline Tensor bicubic_baseline(const Tensor& x, std::size_t levels) {
  Tensor y = x;
  for (std::size_t l = 0; l < levels; ++l) y = bicubic_resize(y, 0.5);
  for (std::size_t l = 0; l < levels; ++l) y = bicubic_resize(y, 2.0);
  return y;
}

// ---------------------------------------------------------------------------
// Commands

namespace cli_detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_manifest(const std::filesystem::path& out, const std::string& command, const RunConfig& c) {
  std::string m;
  m += "command = " + command + "\n";
  m += "config_hash = fnv1a64:" + config_hash(c) + "\n";
  m += "seed = " + std::to_string(c.seed) + "\n";
  m += "version = " + std::string(kVersion) + "\n";
  m += "rng = " + std::string(Rng::algorithm) + "\n";
  write_text(out / "manifest.txt", m);
  write_text(out / "config.txt", serialize_config(c));
}

inline Tensor require_input(const RunConfig& c) {
  if (c.input.empty()) throw UsageError("this command needs 'input' in the config");
  return image_to_tensor(load_image(c.input));
}

inline FlowModel require_checkpoint(const RunConfig& c) {
  if (c.checkpoint.empty()) throw UsageError("this command needs 'checkpoint' in the config");
  return load_checkpoint(c.checkpoint);
}

inline ToyDataset make_dataset(const RunConfig& c, std::size_t count, std::uint64_t seed) {
  if (c.dataset == DatasetKind::SyntheticBandlimited) return make_synthetic_dataset(count, c.patch, seed);
  if (c.dataset_path.empty()) throw UsageError("dataset = image needs 'dataset_path'");
  return make_image_dataset(image_to_tensor(load_image(c.dataset_path)), count, c.patch, seed);
}

inline int cmd_transform(const RunConfig& c, const std::filesystem::path& out, std::ostream& os) {
  const Tensor img = require_input(c);
  const FilterBank bank = make_bank(c.bank);
  const std::size_t unit = std::size_t{1} << c.levels;
  const Tensor x = crop(img, img.dim(0) / unit * unit, img.dim(1) / unit * unit);
  const auto levels = multi_level_analyze(x, bank, c.levels, 2);
  save_coefficients(out, levels, bank);
  Tensor low = levels.back().low;
  for (double& v : low.data()) v /= static_cast<double>(unit);
  save_image((out / "low.pgm").string(), tensor_to_image(low));
  const double err = max_abs_diff(multi_level_synthesize(levels, bank, 2), x);
  os << "transform: " << c.levels << " level(s), " << bank.name << ", input " << shape_str(x.shape())
     << ", reconstruction max error " << err << "\n";
  return 0;
}

inline int cmd_train(const RunConfig& c, const std::filesystem::path& out, std::ostream& os) {
  const ToyDataset data = make_dataset(c, c.train_count, c.seed);
  const ToyDataset val = make_dataset(c, c.val_count, c.seed + 1);
  FlowModel model = make_flow_model(flow_config(c));
  std::optional<RestorationHead> head;
  if (c.task == Task::Denoise) head = make_restoration_head(model, c.head_width, c.head_hidden, c.seed);
  TrainConfig tc = train_config(c);
  tc.log_path = (out / "log.csv").string();
  tc.checkpoint_dir = (out / "checkpoint").string();
  const TrainResult r = train(model, head ? &*head : nullptr, data, &val, tc);
  std::string summary = "task = " + std::string(task_name(c.task)) + "\nsteps = " + std::to_string(r.steps_done) + "\n";
  summary += "aborted = " + std::to_string(r.aborted ? 1 : 0) + "\n";
  if (c.task == Task::Rescale) {
    summary += "psnr_val = " + fmt(eval_rescaling_psnr(model, val)) + "\n";
    summary += "psnr_bicubic = " + fmt(eval_bicubic_psnr(val)) + "\n";
  } else if (c.task == Task::Compress) {
    summary += "psnr_val = " + fmt(eval_compression_psnr(model, val, c.eval_quality)) + "\n";
  } else {
    Rng g(c.seed, 20);
    const std::vector<Tensor> noisy = add_noise(val.patches, c.noise_sigma, g);
    double pn = 0.0;
    for (std::size_t i = 0; i < noisy.size(); ++i) pn += psnr(val.patches[i], noisy[i]);
    summary += "psnr_val = " + fmt(eval_denoising_psnr(model, *head, val.patches, noisy)) + "\n";
    summary += "psnr_noisy = " + fmt(pn / static_cast<double>(noisy.size())) + "\n";
  }
  write_text(out / "summary.txt", summary);
  os << summary;
  if (r.aborted) {
    os << "training aborted: " << r.message << "\n";
    return 2;
  }
  return 0;
}

inline int cmd_eval(const RunConfig& c, const std::filesystem::path& out, std::ostream& os) {
  if (c.input.empty()) throw UsageError("eval needs 'input' (an image or a directory of PGM/PPM images)");
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(c.input)) {
    for (const auto& e : std::filesystem::directory_iterator(c.input)) {
      const std::string ext = e.path().extension().string();
      if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(c.input);
  }
  if (files.empty()) throw std::runtime_error("no PGM/PPM images in " + c.input);
  FlowModel model = c.checkpoint.empty() ? make_flow_model(flow_config(c)) : load_checkpoint(c.checkpoint);
  std::string csv = "file,psnr,ssim,psnr_bicubic,z_energy\n";
  for (const auto& f : files) {
    const Tensor img = image_to_tensor(load_image(f.string()));
    const auto [tiles, t] = to_tiles(img, model.config.spatial);
    const LatentSplit s = flow_forward(model, tiles);
    const Tensor rec = from_tiles(upscale(model, s.y, {c.temperature}, c.samples, c.seed), t);
    const Tensor x = from_tiles(tiles, t);
    double ze = 0.0;
    for (const Tensor& z : s.z) ze += sum_squares(z) / static_cast<double>(z.size());
    const double p = psnr(x, rec), q = ssim(x, rec), pb = psnr(x, bicubic_baseline(x, model.config.levels));
    csv += f.filename().string() + "," + fmt(p) + "," + fmt(q) + "," + fmt(pb) + "," + fmt(ze) + "\n";
    os << f.filename().string() << ": psnr " << p << " dB, ssim " << q << ", bicubic " << pb << " dB\n";
  }
  write_text(out / "eval.csv", csv);
  return 0;
}

inline int cmd_denoise(const RunConfig& c, const std::filesystem::path& out, std::ostream& os) {
  const FlowModel model = require_checkpoint(c);
  const RestorationHead head = load_head(c.checkpoint);
  const Tensor img = require_input(c);
  const auto [tiles, t] = to_tiles(img, model.config.spatial);
  Rng g(c.seed, 21);
  Tensor noisy = randn(tiles.shape(), g, c.noise_sigma);
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += tiles[i];
  const Tensor clean = from_tiles(tiles, t), xn = from_tiles(noisy, t);
  const Tensor xhat = from_tiles(denoise(model, head, noisy), t);
  save_image((out / "noisy.pgm").string(), tensor_to_image(xn));
  save_image((out / "denoised.pgm").string(), tensor_to_image(xhat));
  const std::string m = "psnr_noisy = " + fmt(psnr(clean, xn)) + "\npsnr_denoised = " + fmt(psnr(clean, xhat)) + "\n";
  write_text(out / "metrics.txt", m);
  os << m;
  return 0;
}

inline int cmd_compress(const RunConfig& c, const std::filesystem::path& out, std::ostream& os) {
  const FlowModel model = require_checkpoint(c);
  const Tensor img = require_input(c);
  const auto [tiles, t] = to_tiles(img, model.config.spatial);
  const Tensor y = downscale(model, tiles);
  JpegSimConfig jc;
  jc.quality = c.eval_quality;
  const Tensor yq = jpeg_simulate(y, jc);
  const Tensor rec = from_tiles(upscale(model, yq, {c.temperature}, c.samples, c.seed), t);
  const Tensor x = from_tiles(tiles, t);
  save_image((out / "lr.pgm").string(), tensor_to_image(from_tiles(y, t)));
  save_image((out / "lr_jpeg.pgm").string(), tensor_to_image(from_tiles(yq, t)));
  save_image((out / "restored.pgm").string(), tensor_to_image(rec));
  const std::string m = "quality = " + std::to_string(c.eval_quality) + "\npsnr_restored = " + fmt(psnr(x, rec)) + "\n";
  write_text(out / "metrics.txt", m);
  os << m;
  return 0;
}

inline int cmd_verify_theory(const RunConfig& c, const std::filesystem::path& out, bool quick, bool strict,
                             std::ostream& os) {
  theory::SuiteOptions o;
  if (quick) {
    o.mc_samples = 20000;
    o.coupling_steps = 1000;
    o.ires_steps = 200;
    o.random_sigmas = 4;
    o.lemma_models = 3;
  }
  const std::vector<theory::BoundReport> rows = theory::theory_suite(c.seed, o);
  write_text(out / "bound_reports.csv", theory::reports_csv(rows));
  std::size_t failed = 0;
  std::string summary;
  for (const auto& r : rows) {
    summary += std::string(r.pass ? "PASS " : "FAIL ") + r.name + "  analytic " + fmt(r.analytic) + "  empirical " +
               fmt(r.empirical) + "\n";
    if (!r.pass) ++failed;
  }
  summary += std::to_string(rows.size() - failed) + "/" + std::to_string(rows.size()) + " reports pass\n";
  write_text(out / "summary.txt", summary);
  os << summary;
  return strict && failed > 0 ? 2 : 0;
}

}  // namespace cli_detail

/// Parses argv and runs one subcommand.
inline int run_cli(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& es = std::cerr) {
  CLI::App app{"Wavelet-flow image rescaling, compression and denoising toolkit", "lr2flow"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool quick = false, strict = false;
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--out", out_dir, "output directory");
  app.set_version_flag("--version", kVersion);
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"transform", "multi-level framelet analysis of an image"},
      {"train", "train a model for the configured task"},
      {"eval", "roundtrip metrics on an image or a directory of images"},
      {"denoise", "denoise an image with a trained model and head"},
      {"compress", "downscale, JPEG-simulate and restore an image"},
      {"verify-theory", "check the closed-form results against their oracles"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    if (name == "verify-theory") {
      sub->add_flag("--quick", quick, "smaller sample counts");
      sub->add_flag("--strict", strict, "exit 2 when any report fails");
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, os, es) == 0 ? 0 : 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    if (cfg.out.empty()) throw UsageError("an output directory is required (--out or 'out' in the config)");
  } catch (const std::exception& e) {
    es << "error: " << e.what() << "\n";
    return 1;
  }
  try {
    const std::filesystem::path out(cfg.out);
    std::filesystem::create_directories(out);
    cli_detail::write_manifest(out, command, cfg);
    if (command == "transform") return cli_detail::cmd_transform(cfg, out, os);
    if (command == "train") return cli_detail::cmd_train(cfg, out, os);
    if (command == "eval") return cli_detail::cmd_eval(cfg, out, os);
    if (command == "denoise") return cli_detail::cmd_denoise(cfg, out, os);
    if (command == "compress") return cli_detail::cmd_compress(cfg, out, os);
    return cli_detail::cmd_verify_theory(cfg, out, quick, strict, os);
  } catch (const UsageError& e) {
    es << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    es << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace lr2flow
