#pragma once

// Gaussian closed forms for the reconstruction-error results and the
// Monte Carlo / optimization oracles that check them.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lr2flow/autodiff.hpp"
#include "lr2flow/flow.hpp"
#include "lr2flow/framelet.hpp"
#include "lr2flow/optim.hpp"
#include "lr2flow/rng.hpp"

namespace lr2flow::theory {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline Mat to_eigen(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("to_eigen: expected a matrix, got " + shape_str(t.shape()));
  Mat m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t[i * t.dim(1) + j];
  return m;
}

inline Tensor from_eigen(const Mat& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t[i * m.cols() + j] = m(i, j);
  return t;
}

// ---------------------------------------------------------------------------
// Gaussian models and frames

struct GaussianModel {
  Vec mean;
  Mat cov;

  std::size_t dim() const { return static_cast<std::size_t>(cov.rows()); }
};

inline GaussianModel gaussian(const Mat& cov, Vec mean = Vec()) {
  if (cov.rows() != cov.cols()) throw ShapeError("gaussian: covariance must be square");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw std::invalid_argument("gaussian: covariance not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  if (es.eigenvalues().minCoeff() < -1e-12) throw std::invalid_argument("gaussian: covariance not positive semidefinite");
  if (mean.size() == 0) mean = Vec::Zero(cov.rows());
  if (mean.size() != cov.rows()) throw ShapeError("gaussian: mean/covariance size mismatch");
  return {std::move(mean), cov};
}

/// Sigma_ij = rho^|i-j|, or rho^min(|i-j|, n-|i-j|) when `circulant`.
inline Mat ar1_covariance(std::size_t n, double rho, bool circulant = false) {
  Mat s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t k = i > j ? i - j : j - i;
      if (circulant) k = std::min(k, n - k);
      s(i, j) = std::pow(rho, static_cast<double>(k));
    }
  return s;
}

/// count x n matrix of draws, one sample per row.
inline Mat sample_gaussian(const GaussianModel& g, std::size_t count, Rng& r) {
  Eigen::SelfAdjointEigenSolver<Mat> es(g.cov);
  const Mat factor = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  const std::size_t n = g.dim();
  Mat e(count, n);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < n; ++j) e(i, j) = r.normal();
  Mat x = e * factor.transpose();
  x.rowwise() += g.mean.transpose();
  return x;
}

/// Haar-distributed orthonormal matrix (QR of a Gaussian matrix, sign-fixed).
inline Mat random_orthonormal(std::size_t n, Rng& r) {
  Mat a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = r.normal();
  Eigen::HouseholderQR<Mat> qr(a);
  Mat q = qr.householderQ();
  const Mat rr = qr.matrixQR().triangularView<Eigen::Upper>();
  for (std::size_t j = 0; j < n; ++j)
    if (rr(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

inline Mat random_psd(std::size_t n, Rng& r) {
  Mat a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = r.normal();
  return a * a.transpose() / static_cast<double>(n);
}

struct FrameMatrices {
  Mat low;   // d x n
  Mat high;  // (N - d) x n

  std::size_t d() const { return static_cast<std::size_t>(low.rows()); }
  std::size_t m() const { return static_cast<std::size_t>(high.rows()); }
  std::size_t n() const { return static_cast<std::size_t>(low.cols()); }
  Mat full() const {
    Mat w(low.rows() + high.rows(), low.cols());
    w << low, high;
    return w;
  }
};

inline FrameMatrices frame_matrices(const FilterBank& bank, std::size_t n) {
  return {to_eigen(low_matrix(bank, n)), to_eigen(high_matrix(bank, n))};
}

inline FrameMatrices frame_matrices(BankKind kind, std::size_t n) { return frame_matrices(make_bank(kind), n); }

/// Splits an orthonormal n x n matrix into its first d rows and the rest.
inline FrameMatrices split_rows(const Mat& w, std::size_t d) {
  if (d > static_cast<std::size_t>(w.rows())) throw std::invalid_argument("split_rows: d exceeds the row count");
  return {w.topRows(d), w.bottomRows(w.rows() - d)};
}

struct SplitCov {
  Mat ll;
  Mat lh;
  Mat hh;
};

inline SplitCov split_cov(const GaussianModel& g, const FrameMatrices& w) {
  if (w.n() != g.dim()) throw ShapeError("split_cov: frame and covariance sizes differ");
  return {w.low * g.cov * w.low.transpose(), w.low * g.cov * w.high.transpose(), w.high * g.cov * w.high.transpose()};
}

struct ConditionalMoments {
  Mat mean_map;       // E[x_H | x_L] = offset + mean_map x_L
  Vec offset;
  Mat cov;            // Var[x_H | x_L], the Schur complement
  double regularization = 0.0;
};

/// Gaussian conditioning of x_H = W_H x on x_L = W_L x. A singular Sigma_LL is
/// regularized by +1e-10 I when `regularize`, and rejected otherwise.
inline ConditionalMoments conditional_moments(const GaussianModel& g, const FrameMatrices& w, bool regularize = true) {
  const SplitCov s = split_cov(g, w);
  ConditionalMoments out;
  Mat ll = s.ll;
  Eigen::LLT<Mat> llt(ll);
  const double scale = std::max(1.0, ll.diagonal().cwiseAbs().maxCoeff());
  Eigen::SelfAdjointEigenSolver<Mat> es(ll, Eigen::EigenvaluesOnly);
  if (llt.info() != Eigen::Success || es.eigenvalues().minCoeff() < 1e-12 * scale) {
    if (!regularize) throw std::domain_error("conditional_moments: Sigma_LL is singular");
    out.regularization = 1e-10;
    ll += out.regularization * Mat::Identity(ll.rows(), ll.cols());
    llt.compute(ll);
  }
  out.mean_map = llt.solve(s.lh).transpose();
  out.cov = s.hh - out.mean_map * s.lh;
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  const Vec mu_l = w.low * g.mean, mu_h = w.high * g.mean;
  out.offset = mu_h - out.mean_map * mu_l;
  return out;
}

struct Estimate {
  double mean = 0.0;
  double se = 0.0;
  std::size_t samples = 0;
};

inline Estimate estimate(const Vec& v) {
  const double n = static_cast<double>(v.size());
  const double m = v.mean();
  const double var = v.size() > 1 ? (v.array() - m).square().sum() / (n - 1.0) : 0.0;
  return {m, std::sqrt(var / n), static_cast<std::size_t>(v.size())};
}

/// Average within-bin covariance of `values` (rows) after sorting on a scalar
/// key and cutting equal-count bins of at least `min_per_bin` samples.
inline Mat binned_conditional_covariance(const Vec& key, const Mat& values, std::size_t min_per_bin = 500) {
  const std::size_t n = static_cast<std::size_t>(key.size());
  if (static_cast<std::size_t>(values.rows()) != n) throw ShapeError("binned_conditional_covariance: size mismatch");
  if (n < 2 * min_per_bin) throw std::invalid_argument("binned_conditional_covariance: too few samples");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  const std::size_t bins = n / min_per_bin;
  Mat acc = Mat::Zero(values.cols(), values.cols());
  double weight = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t lo = b * n / bins, hi = (b + 1) * n / bins;
    Mat chunk(hi - lo, values.cols());
    for (std::size_t i = lo; i < hi; ++i) chunk.row(i - lo) = values.row(idx[i]);
    const Vec mu = chunk.colwise().mean();
    chunk.rowwise() -= mu.transpose();
    acc += chunk.transpose() * chunk;
    weight += static_cast<double>(hi - lo - 1);
  }
  return acc / weight;
}

// ---------------------------------------------------------------------------
// Toy coupling on explicit coefficients: z = x_H * exp(alpha tanh rho(x_L)) + eta(x_L),
// eta(x_L) = mlp(x_L) + offset + linear x_L.

struct ToyCoupling {
  Mlp rho;
  Mlp eta;
  Mat linear;
  Vec offset;
  double alpha = 2.0;

  std::size_t d() const { return static_cast<std::size_t>(linear.cols()); }
  std::size_t m() const { return static_cast<std::size_t>(linear.rows()); }
};

/// Zero last layers: the map starts as the identity.
inline ToyCoupling make_toy_coupling(std::size_t d, std::size_t m, std::size_t width, std::uint64_t seed,
                                     double alpha = 2.0) {
  Rng g(seed, 0);
  ToyCoupling tc;
  tc.rho = make_mlp(d, width, m, 2, g, true);
  tc.eta = make_mlp(d, width, m, 2, g, true);
  tc.linear = Mat::Zero(m, d);
  tc.offset = Vec::Zero(m);
  tc.alpha = alpha;
  return tc;
}

/// The Prop. 1 optimum: unit scale and eta = -E[x_H | x_L].
inline ToyCoupling optimal_coupling(const ConditionalMoments& cm, std::size_t d, std::size_t width = 4) {
  ToyCoupling tc = make_toy_coupling(d, static_cast<std::size_t>(cm.cov.rows()), width, 0);
  tc.linear = -cm.mean_map;
  tc.offset = -cm.offset;
  return tc;
}

namespace detail {

inline Mat eval_mlp(const Mlp& m, const Mat& x) { return to_eigen(lr2flow::mlp_eval(m, from_eigen(x))); }

inline Mat toy_scale(const ToyCoupling& tc, const Mat& xl) {
  return (tc.alpha * eval_mlp(tc.rho, xl).array().tanh()).matrix();
}

inline Mat toy_shift(const ToyCoupling& tc, const Mat& xl) {
  Mat s = eval_mlp(tc.eta, xl) + xl * tc.linear.transpose();
  s.rowwise() += tc.offset.transpose();
  return s;
}

inline std::vector<Tensor*> mlp_params(Mlp& m) {
  std::vector<Tensor*> out;
  for (std::size_t i = 0; i < m.layers(); ++i) {
    out.push_back(&m.w[i]);
    out.push_back(&m.b[i]);
  }
  return out;
}

// AdamW over externally owned tensors.
struct PtrAdam {
  std::vector<Tensor*> params;
  OptimState state;

  PtrAdam(std::vector<Tensor*> p, double lr) : params(std::move(p)) {
    std::vector<Tensor> copy;
    for (Tensor* t : params) copy.push_back(*t);
    AdamWConfig c;
    c.lr = lr;
    state = make_optim_state(copy, c);
  }

  void step(const std::vector<Tensor>& grads, double lr) {
    std::vector<Tensor> values;
    for (Tensor* t : params) values.push_back(std::move(*t));
    state.config.lr = lr;
    adamw_step(values, grads, state);
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] = std::move(values[i]);
  }
};

inline double step_lr(double lr, std::size_t step, std::size_t steps) {
  if (2 * step >= steps) lr *= 0.5;
  if (4 * step >= 3 * steps) lr *= 0.5;
  return lr;
}

}  // namespace detail

/// Rows of x_L [B, d], x_H [B, m] -> latent z [B, m].
inline Mat toy_forward(const ToyCoupling& tc, const Mat& xl, const Mat& xh) {
  return (xh.array() * detail::toy_scale(tc, xl).array().exp()).matrix() + detail::toy_shift(tc, xl);
}

inline Mat toy_inverse(const ToyCoupling& tc, const Mat& xl, const Mat& z) {
  return ((z - detail::toy_shift(tc, xl)).array() * (-detail::toy_scale(tc, xl).array()).exp()).matrix();
}

/// Rows of W^T [x_L; x_H].
inline Mat synthesize_rows(const FrameMatrices& w, const Mat& xl, const Mat& xh) { return xl * w.low + xh * w.high; }

/// Per-sample ||x - W^T F^-1([F(Wx)]_{1:d}, 0)||^2.
inline Vec toy_zero_prior_errors(const ToyCoupling& tc, const FrameMatrices& w, const Mat& x) {
  const Mat xl = x * w.low.transpose();
  const Mat xhat = synthesize_rows(w, xl, toy_inverse(tc, xl, Mat::Zero(x.rows(), w.m())));
  return (x - xhat).rowwise().squaredNorm();
}

struct ToyTrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 256;
  double lr = 5e-3;
  std::uint64_t seed = 0;
};

/// Gradient descent on E||x - W^T F^-1(y, 0)||^2 over the rho/eta networks;
/// returns the last batch loss.
inline double train_toy_coupling(ToyCoupling& tc, const GaussianModel& g, const FrameMatrices& w, const ToyTrainConfig& cfg) {
  Rng data(cfg.seed, 1);
  std::vector<Tensor*> ptrs = detail::mlp_params(tc.rho);
  for (Tensor* p : detail::mlp_params(tc.eta)) ptrs.push_back(p);
  detail::PtrAdam opt(ptrs, cfg.lr);
  const Tensor wh = from_eigen(w.high);
  double last = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Mat x = sample_gaussian(g, cfg.batch, data);
    const Mat xl = x * w.low.transpose(), xh = x * w.high.transpose();
    Mat fixed = xl * tc.linear.transpose();
    fixed.rowwise() += tc.offset.transpose();
    ad::Tape t;
    std::vector<ad::Var> leaves;
    const BoundMlp rho = bind_mlp(t, tc.rho, true, &leaves);
    const BoundMlp eta = bind_mlp(t, tc.eta, true, &leaves);
    ad::Var vl = t.constant(from_eigen(xl));
    ad::Var s = ad::scale(ad::tanh(mlp_forward(rho, vl)), tc.alpha);
    ad::Var shift = ad::add(mlp_forward(eta, vl), t.constant(from_eigen(fixed)));
    ad::Var xh_hat = ad::mul(ad::neg(shift), ad::exp(ad::neg(s)));
    ad::Var err = ad::matmul(ad::sub(t.constant(from_eigen(xh)), xh_hat), t.constant(wh));
    ad::Var loss = ad::scale(ad::sum(ad::square(err)), 1.0 / static_cast<double>(cfg.batch));
    t.backward(loss);
    std::vector<Tensor> grads;
    for (const ad::Var& v : leaves) grads.push_back(t.grad(v));
    opt.step(grads, detail::step_lr(cfg.lr, step, cfg.steps));
    last = loss.value().item();
  }
  return last;
}

// ---------------------------------------------------------------------------
// Proposition 1

/// e* = Tr(Var[x_H | x_L] W_H W_H^T).
inline double prop1_error(const GaussianModel& g, const FrameMatrices& w) {
  const ConditionalMoments cm = conditional_moments(g, w);
  return (cm.cov * w.high * w.high.transpose()).trace();
}

inline double prop1_error(const GaussianModel& g, BankKind bank, std::size_t n) {
  return prop1_error(g, frame_matrices(bank, n));
}

/// Monte Carlo reconstruction error of the optimal coupling (or of eta = 0
/// when `optimal` is false) under the sigma = 0 prior.
inline Estimate prop1_empirical(const GaussianModel& g, const FrameMatrices& w, std::size_t samples, std::uint64_t seed,
                                bool optimal = true) {
  const ToyCoupling tc =
      optimal ? optimal_coupling(conditional_moments(g, w), w.d()) : make_toy_coupling(w.d(), w.m(), 4, 0);
  Rng r(seed, 0);
  return estimate(toy_zero_prior_errors(tc, w, sample_gaussian(g, samples, r)));
}

inline Estimate prop1_empirical(const GaussianModel& g, BankKind bank, std::size_t n, std::size_t samples,
                                std::uint64_t seed, bool optimal = true) {
  return prop1_empirical(g, frame_matrices(bank, n), samples, seed, optimal);
}

// ---------------------------------------------------------------------------
// Proposition 2 and the remark

inline Mat pinv(const Mat& a) { return Eigen::CompleteOrthogonalDecomposition<Mat>(a).pseudoInverse(); }

/// P = I - W_L^+ W_L.
inline Mat high_projector(const FrameMatrices& w) {
  return Mat::Identity(w.n(), w.n()) - pinv(w.low) * w.low;
}

/// J(W) = Tr((W_H^T W_H)^2 P Sigma P).
inline double prop2_bound(const GaussianModel& g, const FrameMatrices& w) {
  const Mat p = high_projector(w);
  const Mat h = w.high.transpose() * w.high;
  return (h * h * p * g.cov * p).trace();
}

inline double prop2_bound(const GaussianModel& g, BankKind bank, std::size_t n) {
  return prop2_bound(g, frame_matrices(bank, n));
}

/// Empirical error of xhat = W_L^+ x_L + P mu(x_L), mu(x_L) = E[x | W_L x = x_L].
inline Estimate prop2_construction(const GaussianModel& g, const FrameMatrices& w, std::size_t samples, std::uint64_t seed) {
  const Mat p = high_projector(w);
  const Mat wl_pinv = pinv(w.low);
  const Mat gain = g.cov * w.low.transpose() * pinv(w.low * g.cov * w.low.transpose());
  Rng r(seed, 0);
  const Mat x = sample_gaussian(g, samples, r);
  Mat xl = x * w.low.transpose();
  const Vec mu_l = w.low * g.mean;
  Mat mu = (xl.rowwise() - mu_l.transpose()) * gain.transpose();
  mu.rowwise() += g.mean.transpose();
  const Mat xhat = xl * wl_pinv.transpose() + mu * p.transpose();
  return estimate((x - xhat).rowwise().squaredNorm());
}

/// sum_{i=1}^{n-d} (lambda_up_i(W_H^T W_H))^2 lambda_down_{i+d}(Sigma).
inline double remark_value(const Mat& sigma, std::vector<double> spectrum, std::size_t d) {
  const std::size_t n = static_cast<std::size_t>(sigma.rows());
  if (spectrum.size() != n) throw ShapeError("remark_value: spectrum length must equal n");
  if (d > n) throw std::invalid_argument("remark_value: d exceeds n");
  std::sort(spectrum.begin(), spectrum.end());
  Eigen::SelfAdjointEigenSolver<Mat> es(sigma, Eigen::EigenvaluesOnly);
  const Vec lam = es.eigenvalues().reverse();
  double v = 0.0;
  for (std::size_t i = 0; i + d < n; ++i) v += spectrum[i] * spectrum[i] * lam(i + d);
  return v;
}

inline std::vector<double> high_gram_spectrum(const FrameMatrices& w) {
  Eigen::SelfAdjointEigenSolver<Mat> es(w.high.transpose() * w.high, Eigen::EigenvaluesOnly);
  return {es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size()};
}

struct RemarkResult {
  double value = 0.0;     // closed form
  double attained = 0.0;  // J of the constructed W
  double tail = 0.0;      // sum_{i>d} lambda_down_i(Sigma)
  FrameMatrices w;
};

/// Orthonormal W whose low rows span the top-d eigenvectors of Sigma.
inline RemarkResult remark_bound(const Mat& sigma, std::size_t d) {
  const std::size_t n = static_cast<std::size_t>(sigma.rows());
  if (d > n) throw std::invalid_argument("remark_bound: d exceeds n");
  Eigen::SelfAdjointEigenSolver<Mat> es(sigma);
  const Mat q = es.eigenvectors().rowwise().reverse();
  RemarkResult r;
  r.w = split_rows(q.transpose(), d);
  r.value = remark_value(sigma, high_gram_spectrum(r.w), d);
  r.attained = prop2_bound(gaussian(sigma), r.w);
  const Vec lam = es.eigenvalues().reverse();
  r.tail = lam.tail(n - d).sum();
  return r;
}

// ---------------------------------------------------------------------------
// Proposition 3

/// Eq. 13 at f = 0: sqrt(d) ||Var[x_H | x_L]||_F / (1 - L)^2.
inline double prop3_bound(const GaussianModel& g, const FrameMatrices& w, double lipschitz) {
  if (!(lipschitz > 0.0 && lipschitz < 1.0)) throw std::invalid_argument("prop3_bound: L must lie in (0, 1)");
  const ConditionalMoments cm = conditional_moments(g, w);
  return std::sqrt(static_cast<double>(w.d())) * cm.cov.norm() / ((1.0 - lipschitz) * (1.0 - lipschitz));
}

inline double prop3_bound(const GaussianModel& g, BankKind bank, std::size_t n, double lipschitz) {
  return prop3_bound(g, frame_matrices(bank, n), lipschitz);
}

/// c -> c + phi(c) on stacked coefficients [x_L; x_H], Lip(phi) <= L.
struct ToyIRes {
  IResParams params;
  double lipschitz = 0.9;
};

inline ToyIRes make_toy_ires(std::size_t channels, std::size_t width, std::uint64_t seed, double lipschitz = 0.9) {
  Rng g(seed, 0);
  ToyIRes m;
  m.params.phi = make_mlp(channels, width, channels, 2, g, false);
  m.lipschitz = lipschitz;
  for (int i = 0; i < 10; ++i) spectral_normalize(m.params, lipschitz);
  return m;
}

inline double train_toy_ires(ToyIRes& m, const GaussianModel& g, const FrameMatrices& w, const ToyTrainConfig& cfg) {
  Rng data(cfg.seed, 1);
  detail::PtrAdam opt(detail::mlp_params(m.params.phi), cfg.lr);
  const std::size_t d = w.d(), N = d + w.m();
  const Tensor wfull = from_eigen(w.full());
  double last = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Mat x = sample_gaussian(g, cfg.batch, data);
    const Mat c = x * w.full().transpose();
    ad::Tape t;
    std::vector<ad::Var> leaves;
    const BoundMlp phi = bind_mlp(t, m.params.phi, true, &leaves);
    ad::Var state = t.constant(from_eigen(c).reshaped({cfg.batch, N, 1}));
    ad::Var y = ad::slice(ires_fwd(state, phi), 1, 0, d);
    ad::Var start = ad::concat({y, t.constant(Tensor::zeros({cfg.batch, N - d, 1}))}, 1);
    ad::Var chat = ad::reshape(ires_inv(start, phi), {cfg.batch, N});
    ad::Var err = ad::sub(ad::matmul(chat, t.constant(wfull)), t.constant(from_eigen(x)));
    ad::Var loss = ad::scale(ad::sum(ad::square(err)), 1.0 / static_cast<double>(cfg.batch));
    t.backward(loss);
    std::vector<Tensor> grads;
    for (const ad::Var& v : leaves) grads.push_back(t.grad(v));
    opt.step(grads, detail::step_lr(cfg.lr, step, cfg.steps));
    spectral_normalize(m.params, m.lipschitz);
    last = loss.value().item();
  }
  return last;
}

inline Estimate ires_empirical(const ToyIRes& m, const GaussianModel& g, const FrameMatrices& w, std::size_t samples,
                               std::uint64_t seed) {
  Rng r(seed, 0);
  const Mat x = sample_gaussian(g, samples, r);
  const std::size_t d = w.d(), N = d + w.m();
  const Tensor c = from_eigen(x * w.full().transpose()).reshaped({samples, N, 1});
  Tensor f = iresblock_fwd(c, m.params);
  for (std::size_t i = 0; i < samples; ++i)
    for (std::size_t k = d; k < N; ++k) f[i * N + k] = 0.0;
  const Mat chat = to_eigen(iresblock_inv(f, m.params).first.reshaped({samples, N}));
  return estimate((x - chat * w.full()).rowwise().squaredNorm());
}

// ---------------------------------------------------------------------------
// Linear models (orthogonal F)

/// e* = sum_{i>d} lambda_down_i(Sigma) + (n - d) sigma^2.
inline double theorem_linear_value(const Mat& sigma, std::size_t d, double temperature) {
  const std::size_t n = static_cast<std::size_t>(sigma.rows());
  if (d > n) throw std::invalid_argument("theorem_linear_value: d exceeds n");
  Eigen::SelfAdjointEigenSolver<Mat> es(sigma, Eigen::EigenvaluesOnly);
  const Vec lam = es.eigenvalues().reverse();
  return lam.tail(n - d).sum() + static_cast<double>(n - d) * temperature * temperature;
}

/// J(F) = Tr((W^T F_2^T F_2 W)^2 Sigma) + sigma^2 Tr(W^T F_2^T F_2 W), F_2 = rows d.. of F.
inline double linear_objective(const Mat& sigma, const Mat& w, const Mat& f, std::size_t d, double temperature) {
  const Mat f2 = f.bottomRows(f.rows() - d);
  const Mat m = w.transpose() * f2.transpose() * f2 * w;
  return (m * m * sigma).trace() + temperature * temperature * m.trace();
}

/// F whose discarded rows are the bottom eigenvectors of W Sigma W^T.
inline Mat constructive_optimum(const Mat& sigma, const Mat& w) {
  Eigen::SelfAdjointEigenSolver<Mat> es(w * sigma * w.transpose());
  return es.eigenvectors().rowwise().reverse().transpose();
}

struct OrthoOptions {
  std::size_t restarts = 10;
  std::size_t steps = 1500;
  double lr = 0.05;
  double init_scale = 1.0;
};

struct OrthoResult {
  double constructive = 0.0;
  double optimized = 0.0;
  std::vector<double> restarts;
  Mat w;
  Mat best;
};

/// Two oracles for min over F in O(N) of J(F) with W a fixed random orthonormal
/// matrix: the eigenvector construction, and Adam over Cayley-parameterized F.
inline OrthoResult optimize_orthogonal(const Mat& sigma, std::size_t d, double temperature, std::uint64_t seed,
                                       const OrthoOptions& opt = {}) {
  const std::size_t n = static_cast<std::size_t>(sigma.rows());
  if (d > n) throw std::invalid_argument("optimize_orthogonal: d exceeds n");
  Rng wr(seed, 0);
  OrthoResult out;
  out.w = random_orthonormal(n, wr);
  out.constructive = linear_objective(sigma, out.w, constructive_optimum(sigma, out.w), d, temperature);
  out.optimized = std::numeric_limits<double>::infinity();
  const Tensor wt = from_eigen(out.w), st = from_eigen(sigma), eye = Tensor::eye(n);
  for (std::size_t r = 0; r < opt.restarts; ++r) {
    Rng g(seed, 1 + r);
    Tensor raw = randn({n, n}, g, opt.init_scale);
    detail::PtrAdam adam({&raw}, opt.lr);
    auto objective = [&](ad::Tape& t, ad::Var rv) {
      ad::Var f2 = ad::slice(cayley(rv), 0, d, n - d);
      ad::Var proj = ad::matmul(f2, t.constant(wt));
      ad::Var m = ad::matmul(ad::transpose(proj), proj);
      ad::Var quad = ad::sum(ad::mul(ad::matmul(m, m), t.constant(st)));
      return ad::add(quad, ad::scale(ad::sum(ad::mul(m, t.constant(eye))), temperature * temperature));
    };
    for (std::size_t step = 0; step < opt.steps && d < n; ++step) {
      ad::Tape t;
      ad::Var rv = t.leaf(raw);
      ad::Var j = objective(t, rv);
      t.backward(j);
      adam.step({t.grad(rv)}, detail::step_lr(opt.lr, step, opt.steps));
    }
    ad::Tape t;
    const Mat f = to_eigen(cayley(t.constant(raw)).value());
    const double value = linear_objective(sigma, out.w, f, d, temperature);
    out.restarts.push_back(value);
    if (value < out.optimized) {
      out.optimized = value;
      out.best = f;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinear example: polar coordinates

struct PolarReport {
  double empirical = 0.0;
  double se = 0.0;
  double analytic = 0.0;      // (2 - pi/2) tau^2
  double linear_value = 0.0;  // tau^2
  double mean_r = 0.0;        // E[r / tau]
  std::size_t samples = 0;
};

/// F(x, y) = (theta, r / tau) with the prior delta(z - E[r / tau]); reconstruction
/// tau E[r/tau] (cos theta, sin theta).
inline PolarReport polar_example(double tau, std::size_t samples, std::uint64_t seed) {
  if (samples < 10000) throw std::invalid_argument("polar_example: needs at least 1e4 samples");
  if (!(tau > 0.0)) throw std::invalid_argument("polar_example: tau must be positive");
  const double z0 = std::sqrt(std::numbers::pi / 2.0);
  Rng r(seed, 0);
  Vec err(samples);
  double rsum = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = tau * r.normal(), y = tau * r.normal();
    const double theta = std::atan2(y, x);
    const double z = std::hypot(x, y) / tau;
    rsum += z;
    const double xh = tau * z0 * std::cos(theta), yh = tau * z0 * std::sin(theta);
    err(i) = (x - xh) * (x - xh) + (y - yh) * (y - yh);
  }
  const Estimate e = estimate(err);
  PolarReport p;
  p.empirical = e.mean;
  p.se = e.se;
  p.analytic = (2.0 - std::numbers::pi / 2.0) * tau * tau;
  p.linear_value = tau * tau;
  p.mean_r = rsum / static_cast<double>(samples);
  p.samples = samples;
  return p;
}

// ---------------------------------------------------------------------------
// Jacobian-path audit for the coupling reconstruction error

struct LemmaAudit {
  double lhs = 0.0;                 // E||x - E_z W^T F^-1(y, z)||^2
  double constant = 0.0;            // C: max over samples of E_z int_0^1 ||W^T D_H F^-1||_F^2 dt
  double latent_distance = 0.0;     // E||z_f - z||^2
  double rhs = 0.0;                 // C * latent_distance
  double conditional_variance = 0.0;  // E Tr Var[z_f | y] (binned, d = 1 only; else NaN)
  double pathwise_rhs = 0.0;        // E[c(x) E_z||z_f - z||^2]
  std::size_t samples = 0;
  bool pass = false;
};

/// Checks ||x - xhat||^2 <= (E_z int ||W^T D_H F^-1||^2)(E_z||z_f - z||^2) along the
/// segment z -> z_f, with finite-difference Jacobians and midpoint quadrature.
inline LemmaAudit lemma_b1_audit(const ToyCoupling& tc, const GaussianModel& g, const FrameMatrices& w, double prior_sigma,
                                 std::size_t samples, std::uint64_t seed, std::size_t prior_draws = 8,
                                 std::size_t nodes = 16) {
  if (prior_sigma < 0.0) throw std::invalid_argument("lemma_b1_audit: prior sigma must be nonnegative");
  if (prior_sigma == 0.0) prior_draws = 1;
  Rng r(seed, 0), zr(seed, 1);
  const Mat x = sample_gaussian(g, samples, r);
  const Mat xl = x * w.low.transpose(), xh = x * w.high.transpose();
  const Mat zf = toy_forward(tc, xl, xh);
  const std::size_t m = w.m();
  const double h = 1e-5;
  Mat xbar = Mat::Zero(samples, w.n());
  Vec dist = Vec::Zero(samples), c = Vec::Zero(samples);
  for (std::size_t k = 0; k < prior_draws; ++k) {
    Mat z(samples, m);
    for (std::size_t i = 0; i < samples; ++i)
      for (std::size_t j = 0; j < m; ++j) z(i, j) = prior_sigma * zr.normal();
    xbar += synthesize_rows(w, xl, toy_inverse(tc, xl, z));
    dist += (zf - z).rowwise().squaredNorm();
    for (std::size_t q = 0; q < nodes; ++q) {
      const double t = (static_cast<double>(q) + 0.5) / static_cast<double>(nodes);
      const Mat zt = z + t * (zf - z);
      for (std::size_t j = 0; j < m; ++j) {
        Mat zp = zt, zm = zt;
        zp.col(j).array() += h;
        zm.col(j).array() -= h;
        const Mat col = (synthesize_rows(w, xl, toy_inverse(tc, xl, zp)) - synthesize_rows(w, xl, toy_inverse(tc, xl, zm))) /
                        (2.0 * h);
        c += col.rowwise().squaredNorm();
      }
    }
  }
  const double draws = static_cast<double>(prior_draws);
  xbar /= draws;
  dist /= draws;
  c /= draws * static_cast<double>(nodes);
  LemmaAudit a;
  a.samples = samples;
  a.lhs = (x - xbar).rowwise().squaredNorm().mean();
  a.constant = c.maxCoeff();
  a.latent_distance = dist.mean();
  a.rhs = a.constant * a.latent_distance;
  a.pathwise_rhs = (c.array() * dist.array()).mean();
  a.conditional_variance = w.d() == 1 && samples >= 1000
                               ? binned_conditional_covariance(xl.col(0), zf, std::min<std::size_t>(500, samples / 2)).trace()
                               : std::numeric_limits<double>::quiet_NaN();
  a.pass = a.lhs <= a.rhs;
  return a;
}

// ---------------------------------------------------------------------------
// Reports

enum class Relation { Equal, Upper, Lower };

inline const char* relation_name(Relation r) {
  switch (r) {
    case Relation::Equal: return "equal";
    case Relation::Upper: return "analytic>=empirical";
    case Relation::Lower: return "analytic<=empirical";
  }
  return "?";
}

struct BoundReport {
  std::string name;
  double analytic = 0.0;
  double empirical = 0.0;
  std::size_t samples = 0;
  double tol = 0.0;
  Relation relation = Relation::Equal;
  bool pass = false;
};

/// Equal: |a - e| <= tol max(1, |a|). Upper: e <= a + tol max(1, |a|). Lower: e >= a - tol max(1, |a|).
inline BoundReport make_report(std::string name, double analytic, double empirical, std::size_t samples, double tol,
                               Relation rel = Relation::Equal) {
  BoundReport b{std::move(name), analytic, empirical, samples, tol, rel, false};
  const double slack = tol * std::max(1.0, std::abs(analytic));
  switch (rel) {
    case Relation::Equal: b.pass = std::abs(analytic - empirical) <= slack; break;
    case Relation::Upper: b.pass = empirical <= analytic + slack; break;
    case Relation::Lower: b.pass = empirical >= analytic - slack; break;
  }
  return b;
}

inline std::string reports_csv(std::span<const BoundReport> rows) {
  std::string out = "name,analytic,empirical,samples,tol,relation,pass\n";
  char buf[512];
  for (const BoundReport& b : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%zu,%.17g,%s,%d\n", b.name.c_str(), b.analytic, b.empirical, b.samples,
                  b.tol, relation_name(b.relation), b.pass ? 1 : 0);
    out += buf;
  }
  return out;
}

inline Mat two_by_two(double a, double b, double c) {
  Mat m(2, 2);
  m << a, b, b, c;
  return m;
}

struct SuiteOptions {
  std::size_t mc_samples = 100000;
  std::size_t polar_samples = 1000000;
  std::size_t coupling_steps = 5000;
  std::size_t ires_steps = 1000;
  std::size_t random_sigmas = 20;
  std::size_t lemma_models = 10;
  std::size_t lemma_steps = 300;
  std::size_t lemma_samples = 2000;
  OrthoOptions ortho;
};

/// Every closed form against its oracle, in a fixed order.
inline std::vector<BoundReport> theory_suite(std::uint64_t seed, const SuiteOptions& o = {}) {
  std::vector<BoundReport> rows;
  const GaussianModel g = gaussian(two_by_two(2, 1, 2));
  const FrameMatrices haar = frame_matrices(BankKind::Haar, 2);

  // Proposition 1
  const double e_star = prop1_error(g, haar);
  rows.push_back(make_report("prop1.haar.analytic", 1.0, e_star, 0, 1e-12));
  const Estimate opt = prop1_empirical(g, haar, o.mc_samples, seed);
  rows.push_back(make_report("prop1.haar.optimal_coupling", e_star, opt.mean, opt.samples, 3.0 * opt.se));
  const Estimate zero = prop1_empirical(g, haar, o.mc_samples, seed, false);
  rows.push_back(make_report("prop1.haar.eta_zero", e_star, zero.mean, zero.samples, 3.0 * zero.se, Relation::Lower));
  ToyCoupling tc = make_toy_coupling(1, 1, 32, seed);
  train_toy_coupling(tc, g, haar, {o.coupling_steps, 256, 5e-3, seed});
  Rng er(seed, 7);
  const Estimate trained = estimate(toy_zero_prior_errors(tc, haar, sample_gaussian(g, o.mc_samples, er)));
  rows.push_back(make_report("prop1.haar.trained_coupling", e_star, trained.mean, trained.samples, 0.05));

  // Proposition 2 and the remark
  const Mat ar1 = ar1_covariance(16, 0.9);
  for (BankKind k : {BankKind::LinearBspline, BankKind::Haar, BankKind::PixelUnshuffle}) {
    const FrameMatrices w = frame_matrices(k, 16);
    const GaussianModel ga = gaussian(ar1);
    const double j = prop2_bound(ga, w);
    const Estimate c = prop2_construction(ga, w, o.mc_samples / 10, seed);
    const std::string name = "prop2.ar1." + make_bank(k).name;
    rows.push_back(make_report(name + ".construction", j, c.mean, c.samples, 3.0 * c.se, Relation::Upper));
    rows.push_back(make_report(name + ".dominates_prop1", j, prop1_error(ga, w), 0, 1e-12, Relation::Upper));
  }
  const Mat diag4 = Vec::LinSpaced(4, 4, 1).asDiagonal();
  std::vector<double> ortho_spectrum{0, 1, 1, 1};
  const double rv = remark_value(diag4, ortho_spectrum, 1);
  rows.push_back(make_report("remark.diag4321.value", 3.0, rv, 0, 1e-12));
  double worst = std::numeric_limits<double>::infinity();
  Rng wr(seed, 8);
  for (int i = 0; i < 200; ++i) worst = std::min(worst, prop2_bound(gaussian(diag4), split_rows(random_orthonormal(4, wr), 1)));
  rows.push_back(make_report("remark.diag4321.random_w_min", rv, worst, 200, 1e-9, Relation::Lower));
  const RemarkResult rem = remark_bound(diag4, 1);
  rows.push_back(make_report("remark.diag4321.attained", rv, rem.attained, 0, 1e-8));
  rows.push_back(make_report("remark.diag4321.attained_tail", rem.tail, rem.attained, 0, 1e-8));

  // Proposition 3
  ToyIRes ires = make_toy_ires(2, 16, seed, 0.9);
  train_toy_ires(ires, g, haar, {o.ires_steps, 128, 5e-3, seed});
  const Estimate ie = ires_empirical(ires, g, haar, 10000, seed);
  rows.push_back(make_report("prop3.haar.L0.9", prop3_bound(g, haar, 0.9), ie.mean, ie.samples, 0.0, Relation::Upper));

  // Linear theorem
  for (double t : {0.0, 0.1}) {
    const double v = theorem_linear_value(diag4, 2, t);
    const OrthoResult r = optimize_orthogonal(diag4, 2, t, seed, o.ortho);
    const std::string name = "theorem.diag4321.sigma" + std::string(t == 0.0 ? "0" : "0.1");
    rows.push_back(make_report(name + ".constructive", v, r.constructive, 0, 1e-6));
    rows.push_back(make_report(name + ".optimized", v, r.optimized, o.ortho.restarts * o.ortho.steps, 1e-3));
  }
  for (std::size_t i = 0; i < o.random_sigmas; ++i) {
    Rng pr(seed, 100 + i);
    const Mat s = random_psd(6, pr);
    const double v = theorem_linear_value(s, 3, 0.2);
    const OrthoResult r = optimize_orthogonal(s, 3, 0.2, seed + i, o.ortho);
    const std::string name = "theorem.random" + std::to_string(i);
    rows.push_back(make_report(name + ".constructive", v, r.constructive, 0, 1e-6));
    rows.push_back(make_report(name + ".optimized", v, r.optimized, o.ortho.restarts * o.ortho.steps, 1e-3));
  }

  // Polar example
  const PolarReport p = polar_example(1.0, o.polar_samples, seed);
  rows.push_back(make_report("example.polar.error", 2.0 - std::numbers::pi / 2.0, p.empirical, p.samples, 0.002));
  rows.push_back(make_report("example.polar.below_linear", p.linear_value, p.empirical, p.samples, 0.0, Relation::Upper));
  rows.push_back(make_report("example.polar.mean_r", std::sqrt(std::numbers::pi / 2.0), p.mean_r, p.samples, 0.002));

  // Ablation ordering on AR(1)
  const GaussianModel ga = gaussian(ar1);
  const double eb = prop1_error(ga, BankKind::LinearBspline, 16), eh = prop1_error(ga, BankKind::Haar, 16),
               ep = prop1_error(ga, BankKind::PixelUnshuffle, 16);
  rows.push_back(make_report("ablation.ar1.bspline<=haar", eh, eb, 0, 0.0, Relation::Upper));
  rows.push_back(make_report("ablation.ar1.haar<=unshuffle", ep, eh, 0, 0.0, Relation::Upper));
  const GaussianModel gc = gaussian(ar1_covariance(16, 0.9, true));
  rows.push_back(make_report("ablation.ar1_circulant.bspline<=haar", prop1_error(gc, BankKind::Haar, 16),
                             prop1_error(gc, BankKind::LinearBspline, 16), 0, 0.0, Relation::Upper));

  // Jacobian-path audit on trained toy couplings
  const GaussianModel gb = gaussian(two_by_two(2, 0.5, 1));
  for (std::size_t i = 0; i < o.lemma_models; ++i) {
    ToyCoupling m = make_toy_coupling(1, 1, 16, seed + i);
    train_toy_coupling(m, gb, haar, {o.lemma_steps, 128, 1e-2, seed + i});
    const LemmaAudit a = lemma_b1_audit(m, gb, haar, 0.3, o.lemma_samples, seed + i);
    rows.push_back(make_report("lemma.trained" + std::to_string(i), a.rhs, a.lhs, a.samples, 0.0, Relation::Upper));
  }
  return rows;
}

}  // namespace lr2flow::theory
