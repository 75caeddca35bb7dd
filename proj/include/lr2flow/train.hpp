#pragma once

// Desk-scale training loops for rescaling, compression and denoising.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lr2flow/checkpoint.hpp"
#include "lr2flow/dataset.hpp"
#include "lr2flow/losses.hpp"
#include "lr2flow/metrics.hpp"
#include "lr2flow/operators.hpp"
#include "lr2flow/optim.hpp"

namespace lr2flow {

enum class Task { Rescale, Compress, Denoise };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::Rescale: return "rescale";
    case Task::Compress: return "compress";
    case Task::Denoise: return "denoise";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  if (s == "rescale") return Task::Rescale;
  if (s == "compress") return Task::Compress;
  if (s == "denoise") return Task::Denoise;
  throw std::invalid_argument("unknown task '" + std::string(s) + "'");
}

struct TrainConfig {
  Task task = Task::Rescale;
  std::size_t steps = 2000;
  std::size_t batch = 16;
  double lr = 2e-4;
  std::vector<std::size_t> milestones;  // lr halves at each
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  RescaleLossWeights rescale;
  DenoiseLossWeights denoise;
  std::vector<int> qualities{50, 55, 60, 65, 70, 75, 80, 85, 90};
  RoundingMode rounding = RoundingMode::AdditiveNoise;
  int eval_quality = 75;
  double noise_sigma = 25.0 / 255.0;
  std::size_t val_every = 100;
  std::string log_path;
  std::string checkpoint_dir;
  std::size_t checkpoint_every = 0;
};

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double z_energy = 0.0;
  std::optional<double> psnr_val;
};

struct TrainResult {
  std::vector<LogRow> log;
  std::size_t steps_done = 0;
  bool aborted = false;
  std::string message;
};

inline double learning_rate(const TrainConfig& c, std::size_t step) {
  double lr = c.lr;
  for (std::size_t m : c.milestones)
    if (step >= m) lr *= 0.5;
  return lr;
}

inline std::string log_header(Task t) {
  return t == Task::Denoise ? "step,loss,l_img,l_lf,l_hf,z_energy,psnr_val" : "step,loss,l_hr,l_lr,l_dist,z_energy,psnr_val";
}

inline std::string format_log_row(const LogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,", r.step, r.loss, r.c1, r.c2, r.c3, r.z_energy);
  std::string s = buf;
  if (r.psnr_val) {
    std::snprintf(buf, sizeof buf, "%.17g", *r.psnr_val);
    s += buf;
  }
  return s;
}

inline void write_log_csv(const std::string& path, Task t, const std::vector<LogRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write log " + path);
  f << log_header(t) << "\n";
  for (const LogRow& r : rows) f << format_log_row(r) << "\n";
}

// ---------------------------------------------------------------------------
// Evaluation

/// Mean PSNR of psi(phi(x)) (sigma = 0) over the patches of `data`.
inline double eval_rescaling_psnr(const FlowModel& m, const ToyDataset& data) {
  const Tensor xs = stack_all(data);
  const LatentSplit s = flow_forward(m, xs);
  const Tensor rec = upscale(m, s.y, LatentPrior{0.0}, 1, 0);
  const std::size_t n = data.patches[0].size();
  double acc = 0.0;
  for (std::size_t b = 0; b < data.size(); ++b) {
    Tensor r(data.patches[b].shape());
    std::copy(rec.data().begin() + static_cast<std::ptrdiff_t>(b * n), rec.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * n),
              r.data().begin());
    acc += psnr(data.patches[b], r);
  }
  return acc / static_cast<double>(data.size());
}

/// Mean PSNR of the bicubic down/up baseline over `data`.
inline double eval_bicubic_psnr(const ToyDataset& data) {
  double acc = 0.0;
  for (const Tensor& x : data.patches) acc += psnr(x, bicubic_roundtrip(x));
  return acc / static_cast<double>(data.size());
}

/// Mean PSNR of psi(JPEG_QF(phi(x))) in eval mode.
inline double eval_compression_psnr(const FlowModel& m, const ToyDataset& data, int quality) {
  double acc = 0.0;
  for (const Tensor& x : data.patches) {
    const Tensor y = downscale(m, x);
    JpegSimConfig cfg;
    cfg.quality = quality;
    const Tensor rec = upscale(m, jpeg_simulate(y, cfg), LatentPrior{0.0}, 1, 0);
    acc += psnr(x, rec);
  }
  return acc / static_cast<double>(data.size());
}

/// Noisy copies of every patch with N(0, sigma^2) noise from the given stream.
inline std::vector<Tensor> add_noise(const std::vector<Tensor>& xs, double sigma, Rng& g) {
  std::vector<Tensor> out;
  for (const Tensor& x : xs) {
    Tensor n = randn(x.shape(), g, sigma);
    for (std::size_t i = 0; i < n.size(); ++i) n[i] += x[i];
    out.push_back(std::move(n));
  }
  return out;
}

inline double eval_denoising_psnr(const FlowModel& m, const RestorationHead& h, const std::vector<Tensor>& clean,
                                  const std::vector<Tensor>& noisy) {
  double acc = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) acc += psnr(clean[i], denoise(m, h, noisy[i]));
  return acc / static_cast<double>(clean.size());
}

/// ||y_n - y_c||^2 / d averaged over pairs.
inline double eval_lowfreq_gap(const FlowModel& m, const std::vector<Tensor>& clean, const std::vector<Tensor>& noisy) {
  double acc = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) acc += mse(downscale(m, noisy[i]), downscale(m, clean[i]));
  return acc / static_cast<double>(clean.size());
}

// ---------------------------------------------------------------------------
// Head checkpoints

inline void save_head(const std::filesystem::path& dir, const RestorationHead& h) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < h.mlp.layers(); ++i) {
    save_lrtf((dir / ("head.w" + std::to_string(i) + ".lrtf")).string(), h.mlp.w[i]);
    save_lrtf((dir / ("head.b" + std::to_string(i) + ".lrtf")).string(), h.mlp.b[i]);
  }
}

inline RestorationHead load_head(const std::filesystem::path& dir) {
  RestorationHead h;
  for (std::size_t i = 0; std::filesystem::exists(dir / ("head.w" + std::to_string(i) + ".lrtf")); ++i) {
    h.mlp.w.push_back(load_lrtf((dir / ("head.w" + std::to_string(i) + ".lrtf")).string()));
    h.mlp.b.push_back(load_lrtf((dir / ("head.b" + std::to_string(i) + ".lrtf")).string()));
  }
  if (h.mlp.w.empty()) throw CheckpointError("no restoration head in " + dir.string());
  return h;
}

// ---------------------------------------------------------------------------
// Training

namespace train_detail {

inline std::vector<Tensor> snapshot(FlowModel& m, RestorationHead* h) {
  std::vector<Tensor> out;
  for (Tensor* p : parameters(m)) out.push_back(*p);
  if (h)
    for (std::size_t i = 0; i < h->mlp.layers(); ++i) {
      out.push_back(h->mlp.w[i]);
      out.push_back(h->mlp.b[i]);
    }
  return out;
}

inline void restore(FlowModel& m, RestorationHead* h, const std::vector<Tensor>& v) {
  std::size_t k = 0;
  for (Tensor* p : parameters(m)) *p = v[k++];
  if (h)
    for (std::size_t i = 0; i < h->mlp.layers(); ++i) {
      h->mlp.w[i] = v[k++];
      h->mlp.b[i] = v[k++];
    }
}

inline void save_state(const TrainConfig& c, const FlowModel& m, const RestorationHead* h) {
  if (c.checkpoint_dir.empty()) return;
  save_checkpoint(c.checkpoint_dir, m);
  if (h) save_head(c.checkpoint_dir, *h);
}

inline bool all_finite(const std::vector<Tensor>& ts) {
  for (const Tensor& t : ts)
    if (!t.all_finite()) return false;
  return true;
}

}  // namespace train_detail

/// Trains in place. Batches, JPEG quality factors, rounding noise and
/// denoising noise each draw from their own stream of `config.seed`. A
/// non-finite loss or gradient stops training with the parameters restored to
/// their last finite state; the last saved checkpoint is left untouched.
inline TrainResult train(FlowModel& model, RestorationHead* head, const ToyDataset& data, const ToyDataset* val,
                         const TrainConfig& config) {
  if (config.task != Task::Denoise) head = nullptr;
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (config.batch == 0) throw std::invalid_argument("train: batch size must be positive");
  if (config.task == Task::Denoise && !head) throw std::invalid_argument("train: denoising needs a restoration head");
  if (config.task == Task::Compress)
    for (int q : config.qualities) (void)quantization_table(q);
  TrainResult result;
  if (config.steps == 0) return result;

  Rng batch_rng(config.seed, 10), noise_rng(config.seed, 11), qf_rng(config.seed, 12), jpeg_rng(config.seed, 13);
  std::vector<Tensor> val_noisy;
  if (val && config.task == Task::Denoise) {
    Rng g(config.seed, 20);
    val_noisy = add_noise(val->patches, config.noise_sigma, g);
  }
  auto draw_batch = [&]() {
    std::vector<std::size_t> idx(config.batch);
    for (std::size_t& i : idx) i = batch_rng.below(data.size());
    return stack_patches(data, idx);
  };
  auto noisy_of = [&](const Tensor& x) {
    Tensor n = randn(x.shape(), noise_rng, config.noise_sigma);
    for (std::size_t i = 0; i < n.size(); ++i) n[i] += x[i];
    return n;
  };

  bool initialized = true;
  for (const auto& level : model.levels)
    for (const Block& b : level) initialized = initialized && b.actnorm.initialized;

  std::vector<Tensor> flat = train_detail::snapshot(model, head);
  AdamWConfig acfg;
  acfg.lr = config.lr;
  acfg.weight_decay = config.weight_decay;
  OptimState opt = make_optim_state(flat, acfg);
  std::vector<Tensor> last_good = flat;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const Tensor xc = draw_batch();
    const Tensor xin = config.task == Task::Denoise ? noisy_of(xc) : xc;
    if (!initialized) {
      initialize_actnorm(model, xin);
      initialized = true;
      flat = train_detail::snapshot(model, head);
      last_good = flat;
    }
    JpegSimConfig jcfg;
    if (config.task == Task::Compress) {
      jcfg.quality = config.qualities[qf_rng.below(config.qualities.size())];
      jcfg.rounding = config.rounding;
      jcfg.train = true;
    }

    LogRow row;
    row.step = step;
    std::vector<Tensor> grads;
    bool finite = true;
    try {
      ad::Tape t;
      const BoundModel bm = bind(t, model, true);
      std::vector<ad::Var> head_leaves;
      LossTerms terms;
      if (config.task == Task::Denoise) {
        const BoundMlp hb = bind_head(t, *head, true, &head_leaves);
        terms = loss_denoising(bm, hb, head->residual, t.constant(xc), t.constant(xin), config.denoise);
      } else if (config.task == Task::Compress) {
        terms = loss_compression(bm, t.constant(xc), config.rescale, jcfg, &jpeg_rng);
      } else {
        terms = loss_rescaling(bm, t.constant(xc), config.rescale);
      }
      const LossValues v = values_of(terms);
      row.loss = v.total;
      row.c1 = v.c1;
      row.c2 = v.c2;
      row.c3 = v.c3;
      row.z_energy = v.z_energy;
      if (!std::isfinite(v.total)) {
        finite = false;
      } else {
        t.backward(terms.total);
        for (const ad::Var& p : bm.leaves) grads.push_back(t.grad(p));
        for (const ad::Var& p : head_leaves) grads.push_back(t.grad(p));
        finite = train_detail::all_finite(grads);
      }
    } catch (const NonFiniteError& e) {
      finite = false;
      result.message = e.what();
    }
    if (!finite) {
      train_detail::restore(model, head, last_good);
      result.aborted = true;
      if (result.message.empty()) result.message = "non-finite loss at step " + std::to_string(step);
      break;
    }
    last_good = flat;
    opt.config.lr = learning_rate(config, step);
    adamw_step(flat, grads, opt);
    train_detail::restore(model, head, flat);
    spectral_normalize(model);
    if (model.config.kind == BlockKind::IRes) flat = train_detail::snapshot(model, head);
    ++model.step;
    result.steps_done = step + 1;

    if (val && config.val_every > 0 && (step + 1) % config.val_every == 0) {
      if (config.task == Task::Rescale) row.psnr_val = eval_rescaling_psnr(model, *val);
      if (config.task == Task::Compress) row.psnr_val = eval_compression_psnr(model, *val, config.eval_quality);
      if (config.task == Task::Denoise) row.psnr_val = eval_denoising_psnr(model, *head, val->patches, val_noisy);
    }
    result.log.push_back(row);
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) train_detail::save_state(config, model, head);
  }
  if (!result.aborted && !config.checkpoint_dir.empty()) train_detail::save_state(config, model, head);
  if (!config.log_path.empty()) write_log_csv(config.log_path, config.task, result.log);
  return result;
}

}  // namespace lr2flow
