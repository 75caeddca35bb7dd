#pragma once

// Task losses. Norms are taken per sample and averaged over the batch.

#include <stdexcept>
#include <vector>

#include "lr2flow/bicubic.hpp"
#include "lr2flow/flow.hpp"
#include "lr2flow/jpeg.hpp"

namespace lr2flow {

struct RescaleLossWeights {
  double hr = 1.0;
  double lr = 5e-2;
  double dist = 1e-5;
};

struct DenoiseLossWeights {
  double img = 1.0;
  double lf = 1e-2;
  double hf = 1e-2;
};

inline void validate(const RescaleLossWeights& w) {
  if (w.hr < 0 || w.lr < 0 || w.dist < 0) throw std::invalid_argument("rescale loss weights must be nonnegative");
  if (w.hr == 0 && w.lr == 0 && w.dist == 0) throw std::invalid_argument("rescale loss weights are all zero");
}

inline void validate(const DenoiseLossWeights& w) {
  if (w.img < 0 || w.lf < 0 || w.hf < 0) throw std::invalid_argument("denoise loss weights must be nonnegative");
  if (w.img == 0 && w.lf == 0 && w.hf == 0) throw std::invalid_argument("denoise loss weights are all zero");
}

/// Total and raw components; for denoising c1, c2, c3 are L_img, L_lf, L_hf.
struct LossTerms {
  ad::Var total;
  ad::Var c1;
  ad::Var c2;
  ad::Var c3;
  double z_energy = 0.0;  // sum_l ||z_l||^2 / h_l, batch mean

  double value() const { return total.value().item(); }
};

namespace loss_detail {

inline double batch_of(const ad::Var& x) { return static_cast<double>(x.shape()[0]); }

inline ad::Var l1(ad::Var a, ad::Var b) { return ad::scale(ad::sum(ad::abs(ad::sub(a, b))), 1.0 / batch_of(a)); }
inline ad::Var l2sq(ad::Var a, ad::Var b) { return ad::scale(ad::sum(ad::square(ad::sub(a, b))), 1.0 / batch_of(a)); }

inline ad::Var latent_energy(std::span<const ad::Var> z) {
  ad::Var acc = ad::sum(ad::square(z[0]));
  for (std::size_t l = 1; l < z.size(); ++l) acc = ad::add(acc, ad::sum(ad::square(z[l])));
  return ad::scale(acc, 1.0 / batch_of(z[0]));
}

inline double z_energy(std::span<const ad::Var> z) {
  double e = 0.0;
  for (const ad::Var& v : z) e += sum_squares(v.value()) / static_cast<double>(v.size());
  return e;
}

inline std::vector<ad::Var> zero_latents(ad::Tape& t, std::span<const ad::Var> z) {
  std::vector<ad::Var> out;
  for (const ad::Var& v : z) out.push_back(t.constant(Tensor::zeros(v.shape())));
  return out;
}

inline ad::Var weighted(ad::Var a, double wa, ad::Var b, double wb, ad::Var c, double wc) {
  return ad::add(ad::add(ad::scale(a, wa), ad::scale(b, wb)), ad::scale(c, wc));
}

inline LossTerms rescale_like(const BoundModel& bm, ad::Var x, const RescaleLossWeights& w, bool true_latents,
                              const JpegSimConfig* jpeg, Rng* noise) {
  validate(w);
  ad::Tape& t = x.tape();
  const std::size_t dims = bm.model->config.dims;
  if (x.value().rank() != dims + 1) throw ShapeError("loss: expected a batched input, got " + shape_str(x.shape()));
  const FlowOutputVar f = flow_forward(bm, x);
  const std::vector<ad::Var> z = true_latents ? f.z : zero_latents(t, f.z);
  ad::Var y = f.y;
  ad::Var yin = jpeg ? jpeg_simulate(y, *jpeg, noise) : y;
  ad::Var xhat = flow_inverse(bm, yin, z);
  LossTerms out;
  out.c1 = l1(xhat, x);
  Tensor bic = x.value();
  for (std::size_t l = 0; l < bm.model->config.levels; ++l) bic = bicubic_resize(bic, 0.5, dims);
  out.c2 = l2sq(y, t.constant(bic));
  out.c3 = latent_energy(f.z);
  out.z_energy = z_energy(f.z);
  out.total = weighted(out.c1, w.hr, out.c2, w.lr, out.c3, w.dist);
  return out;
}

}  // namespace loss_detail

/// L = l_hr ||xhat - x||_1 + l_lr ||y - Bic(x)||^2 + l_dist sum_l ||z_l||^2, with
/// xhat reconstructed from (y, 0). Bic applies one bicubic halving per level.
/// `true_latents` reconstructs from the forward latents instead of zeros.
inline LossTerms loss_rescaling(const BoundModel& bm, ad::Var x, const RescaleLossWeights& w, bool true_latents = false) {
  return loss_detail::rescale_like(bm, x, w, true_latents, nullptr, nullptr);
}

/// As loss_rescaling with xhat reconstructed from jpeg_simulate(y). `noise`
/// feeds the additive-noise rounding in train mode.
inline LossTerms loss_compression(const BoundModel& bm, ad::Var x, const RescaleLossWeights& w, const JpegSimConfig& cfg,
                                  Rng* noise = nullptr) {
  if (bm.model->config.dims != 2) throw std::invalid_argument("loss_compression needs a 2-D model");
  return loss_detail::rescale_like(bm, x, w, false, &cfg, noise);
}

// ---------------------------------------------------------------------------
// Restoration head R(z; y) = z + MLP([z; y]) for denoising

struct RestorationHead {
  Mlp mlp;
  bool residual = true;
};

inline std::size_t latent_numel(const FlowModel& m) {
  std::size_t n = 0;
  for (std::size_t l = 1; l <= m.config.levels; ++l) n += (m.channels() - 1) * m.level_positions(l);
  return n;
}

inline std::size_t lr_numel(const FlowModel& m) { return numel(m.level_spatial(m.config.levels + 1)); }

/// Zero-initialized last layer: R starts as the identity on z.
inline RestorationHead make_restoration_head(const FlowModel& m, std::size_t width, std::size_t hidden, std::uint64_t seed) {
  Rng g(seed, 3);
  const std::size_t nz = latent_numel(m);
  RestorationHead h;
  h.mlp = make_mlp(nz + lr_numel(m), width, nz, hidden, g, true);
  return h;
}

inline BoundMlp bind_head(ad::Tape& t, const RestorationHead& h, bool trainable, std::vector<ad::Var>* leaves = nullptr) {
  return bind_mlp(t, h.mlp, trainable, leaves);
}

/// Head bound to existing variables in (w0, b0, w1, b1, ...) order.
inline BoundMlp bind_head_vars(std::span<const ad::Var> vars) {
  if (vars.size() % 2 != 0) throw std::invalid_argument("bind_head_vars: expected weight/bias pairs");
  BoundMlp m;
  for (std::size_t i = 0; i < vars.size(); i += 2) {
    m.w.push_back(vars[i]);
    m.b.push_back(vars[i + 1]);
  }
  return m;
}

inline std::vector<ad::Var> head_apply(const BoundMlp& head, bool residual, std::span<const ad::Var> z, ad::Var y) {
  const std::size_t B = y.shape()[0];
  std::vector<ad::Var> parts;
  for (const ad::Var& v : z) parts.push_back(ad::reshape(v, {B, v.size() / B}));
  parts.push_back(ad::reshape(y, {B, y.size() / B}));
  ad::Var out = mlp_forward(head, ad::concat(std::span<const ad::Var>(parts), 1));
  std::vector<ad::Var> zhat;
  std::size_t off = 0;
  for (std::size_t l = 0; l < z.size(); ++l) {
    const std::size_t n = z[l].size() / B;
    ad::Var r = ad::reshape(ad::slice(out, 1, off, n), z[l].shape());
    zhat.push_back(residual ? ad::add(z[l], r) : r);
    off += n;
  }
  return zhat;
}

struct DenoiseOutput {
  ad::Var xhat;
  FlowOutputVar noisy;
  std::vector<ad::Var> zhat;
};

/// xhat = W^T F^-1(y_n, R(z_n; y_n)).
inline DenoiseOutput denoise_forward(const BoundModel& bm, const BoundMlp& head, bool residual, ad::Var xn) {
  DenoiseOutput o;
  o.noisy = flow_forward(bm, xn);
  o.zhat = head_apply(head, residual, o.noisy.z, o.noisy.y);
  o.xhat = flow_inverse(bm, o.noisy.y, o.zhat);
  return o;
}

/// L = l_img ||xhat - x_c||_1 + l_lf ||y_n - y_c||^2 + l_hf sum_l ||z_c - zhat||^2.
inline LossTerms loss_denoising(const BoundModel& bm, const BoundMlp& head, bool residual, ad::Var xc, ad::Var xn,
                                const DenoiseLossWeights& w) {
  validate(w);
  if (xc.shape() != xn.shape()) throw ShapeError("loss_denoising: clean/noisy shapes differ");
  const DenoiseOutput d = denoise_forward(bm, head, residual, xn);
  const FlowOutputVar clean = flow_forward(bm, xc);
  LossTerms out;
  out.c1 = loss_detail::l1(d.xhat, xc);
  out.c2 = loss_detail::l2sq(d.noisy.y, clean.y);
  ad::Var hf = loss_detail::l2sq(clean.z[0], d.zhat[0]);
  for (std::size_t l = 1; l < clean.z.size(); ++l) hf = ad::add(hf, loss_detail::l2sq(clean.z[l], d.zhat[l]));
  out.c3 = hf;
  out.z_energy = loss_detail::z_energy(d.noisy.z);
  out.total = loss_detail::weighted(out.c1, w.img, out.c2, w.lf, out.c3, w.hf);
  return out;
}

// Tensor-level conveniences.

struct LossValues {
  double total = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double z_energy = 0.0;
};

inline LossValues values_of(const LossTerms& t) {
  return {t.total.value().item(), t.c1.value().item(), t.c2.value().item(), t.c3.value().item(), t.z_energy};
}

inline Tensor with_batch_axis(const Tensor& x, std::size_t dims) {
  if (x.rank() != dims) return x;
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return x.reshaped(s);
}

inline LossValues loss_rescaling(const FlowModel& m, const Tensor& x, const RescaleLossWeights& w, bool true_latents = false) {
  ad::Tape t;
  return values_of(loss_rescaling(bind(t, m, false), t.constant(with_batch_axis(x, m.config.dims)), w, true_latents));
}

inline LossValues loss_compression(const FlowModel& m, const Tensor& x, const RescaleLossWeights& w, const JpegSimConfig& cfg,
                                   Rng* noise = nullptr) {
  ad::Tape t;
  return values_of(loss_compression(bind(t, m, false), t.constant(with_batch_axis(x, m.config.dims)), w, cfg, noise));
}

inline LossValues loss_denoising(const FlowModel& m, const RestorationHead& h, const Tensor& xc, const Tensor& xn,
                                 const DenoiseLossWeights& w) {
  ad::Tape t;
  return values_of(loss_denoising(bind(t, m, false), bind_head(t, h, false), h.residual,
                                  t.constant(with_batch_axis(xc, m.config.dims)), t.constant(with_batch_axis(xn, m.config.dims)),
                                  w));
}

inline Tensor denoise(const FlowModel& m, const RestorationHead& h, const Tensor& xn) {
  ad::Tape t;
  const bool added = xn.rank() == m.config.dims;
  const Tensor out = denoise_forward(bind(t, m, false), bind_head(t, h, false), h.residual,
                                     t.constant(with_batch_axis(xn, m.config.dims)))
                         .xhat.value();
  return added ? out.reshaped(xn.shape()) : out;
}

}  // namespace lr2flow
