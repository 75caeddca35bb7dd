#pragma once

// Invertible flow blocks and the hierarchical model F. The working state of a
// level is a channel-stacked coefficient tensor [B, C, P]: C subbands in the
// frozen framelet order (channel 0 = low), P samples per subband.
//
// block f = g o Inv1x1 o ActNorm, g = affine coupling or iResBlock.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lr2flow/autodiff.hpp"
#include "lr2flow/framelet.hpp"
#include "lr2flow/kernels.hpp"
#include "lr2flow/rng.hpp"
#include "lr2flow/tensor.hpp"

namespace lr2flow {

enum class BlockKind { Coupling, IRes };

inline const char* block_kind_name(BlockKind k) { return k == BlockKind::Coupling ? "coupling" : "ires"; }

inline BlockKind parse_block_kind(std::string_view s) {
  if (s == "coupling") return BlockKind::Coupling;
  if (s == "ires") return BlockKind::IRes;
  throw std::invalid_argument("unknown block kind '" + std::string(s) + "'");
}

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual, std::size_t iterations)
      : std::runtime_error(what), residual(residual), iterations(iterations) {}
  double residual;
  std::size_t iterations;
};

// ---------------------------------------------------------------------------
// Parameter containers

/// Fully connected network x -> W_L(...tanh(x W_1 + b_1)...) + b_L with row-vector inputs;
/// w[i] has shape [in, out], b[i] has shape [1, out].
struct Mlp {
  std::vector<Tensor> w;
  std::vector<Tensor> b;

  std::size_t layers() const { return w.size(); }
  std::size_t in_dim() const { return w.empty() ? 0 : w.front().dim(0); }
  std::size_t out_dim() const { return w.empty() ? 0 : w.back().dim(1); }
};

/// Hidden layers ~ N(0, 1/in); final layer zero when `zero_last`.
inline Mlp make_mlp(std::size_t in, std::size_t width, std::size_t out, std::size_t hidden, Rng& g, bool zero_last) {
  Mlp m;
  std::size_t prev = in;
  for (std::size_t l = 0; l <= hidden; ++l) {
    const bool last = l == hidden;
    const std::size_t next = last ? out : width;
    Tensor w(Shape{prev, next});
    if (!(last && zero_last)) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(prev));
      for (double& v : w.data()) v = sd * g.normal();
    }
    m.w.push_back(std::move(w));
    m.b.push_back(Tensor(Shape{1, next}));
    prev = next;
  }
  return m;
}

/// Plain (tape-free) evaluation on a batch x of shape [B, in].
inline Tensor mlp_eval(const Mlp& m, const Tensor& x) {
  Tensor h = x;
  for (std::size_t l = 0; l < m.layers(); ++l) {
    Tensor o = kernels::matmul(h, m.w[l]);
    const std::size_t cols = o.dim(1);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += m.b[l][i % cols];
    if (l + 1 < m.layers())
      for (double& v : o.data()) v = std::tanh(v);
    h = std::move(o);
  }
  return h;
}

struct ActNormParams {
  Tensor log_scale;  // s = exp(log_scale) > 0 by construction
  Tensor bias;
  bool initialized = false;
};

struct Inv1x1Params {
  Tensor raw;  // A = raw - raw^T, K = (I - A)(I + A)^-1
};

struct CouplingParams {
  Mlp rho;
  Mlp eta;
};

struct IResParams {
  Mlp phi;
  std::vector<Tensor> u;  // persistent power-iteration vectors, one per layer
};

struct Block {
  ActNormParams actnorm;
  Inv1x1Params inv;
  CouplingParams coupling;
  IResParams ires;
};

struct FlowConfig {
  BankKind bank = BankKind::LinearBspline;
  std::size_t dims = 2;
  Shape spatial{16, 16};
  std::size_t levels = 1;
  std::size_t blocks = 4;
  BlockKind kind = BlockKind::Coupling;
  std::size_t width = 64;
  std::size_t hidden_layers = 2;
  double lipschitz = 0.9;
  double alpha = 2.0;
  std::uint64_t seed = 0;
};

struct FlowModel {
  FlowConfig config;
  FilterBank bank;
  std::vector<std::vector<Block>> levels;
  std::size_t step = 0;

  std::size_t channels() const { return subband_count(bank, config.dims); }

  /// Spatial shape of the image entering level l (1-based).
  Shape level_spatial(std::size_t l) const {
    Shape s = config.spatial;
    for (std::size_t& d : s) d >>= (l - 1);
    return s;
  }

  /// Samples per subband at level l.
  std::size_t level_positions(std::size_t l) const { return numel(level_spatial(l)) >> config.dims; }
};

/// Visits every trainable tensor in a fixed order with a stable name.
template <class Model, class F>
void for_each_parameter(Model& model, F&& f) {
  auto visit_mlp = [&](auto& m, const std::string& prefix) {
    for (std::size_t i = 0; i < m.layers(); ++i) {
      f(prefix + ".w" + std::to_string(i), m.w[i]);
      f(prefix + ".b" + std::to_string(i), m.b[i]);
    }
  };
  for (std::size_t l = 0; l < model.levels.size(); ++l) {
    for (std::size_t k = 0; k < model.levels[l].size(); ++k) {
      auto& blk = model.levels[l][k];
      const std::string p = "l" + std::to_string(l + 1) + ".b" + std::to_string(k + 1);
      f(p + ".actnorm.log_scale", blk.actnorm.log_scale);
      f(p + ".actnorm.bias", blk.actnorm.bias);
      f(p + ".inv1x1.raw", blk.inv.raw);
      if (model.config.kind == BlockKind::Coupling) {
        visit_mlp(blk.coupling.rho, p + ".rho");
        visit_mlp(blk.coupling.eta, p + ".eta");
      } else {
        visit_mlp(blk.ires.phi, p + ".phi");
      }
    }
  }
}

inline std::vector<Tensor*> parameters(FlowModel& model) {
  std::vector<Tensor*> out;
  for_each_parameter(model, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

// ---------------------------------------------------------------------------
// Spectral normalization

/// Largest singular value of w by power iteration, updating the persistent right vector u.
inline double power_iteration(const Tensor& w, Tensor& u, std::size_t iterations) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  if (u.size() != in) u = Tensor(Shape{in}, 1.0 / std::sqrt(static_cast<double>(in)));
  Tensor v(Shape{out});
  double sigma = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    // v = W^T u / |.|, u = W v / |.|
    for (std::size_t j = 0; j < out; ++j) v[j] = 0.0;
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t j = 0; j < out; ++j) v[j] += w[i * out + j] * u[i];
    const double nv = std::sqrt(sum_squares(v));
    if (nv == 0.0) return 0.0;
    for (double& x : v.data()) x /= nv;
    for (std::size_t i = 0; i < in; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < out; ++j) s += w[i * out + j] * v[j];
      u[i] = s;
    }
    sigma = std::sqrt(sum_squares(u));
    if (sigma == 0.0) return 0.0;
    for (double& x : u.data()) x /= sigma;
  }
  return sigma;
}

/// Divides each layer's weight by max(1, sigma / L^(1/layers)).
inline void spectral_normalize(IResParams& p, double lipschitz, std::size_t iterations = 20) {
  const std::size_t layers = p.phi.layers();
  const double target = std::pow(lipschitz, 1.0 / static_cast<double>(layers));
  p.u.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const double sigma = power_iteration(p.phi.w[l], p.u[l], iterations);
    const double factor = std::max(1.0, sigma / target);
    if (factor > 1.0)
      for (double& v : p.phi.w[l].data()) v /= factor;
  }
}

inline void spectral_normalize(FlowModel& model, std::size_t iterations = 20) {
  if (model.config.kind != BlockKind::IRes) return;
  for (auto& level : model.levels)
    for (Block& b : level) spectral_normalize(b.ires, model.config.lipschitz, iterations);
}

// ---------------------------------------------------------------------------
// Model construction

inline void validate_config(const FlowConfig& c) {
  if (c.dims != 1 && c.dims != 2) throw std::invalid_argument("flow: dims must be 1 or 2");
  if (c.spatial.size() != c.dims) throw std::invalid_argument("flow: spatial shape rank must equal dims");
  if (c.levels == 0) throw std::invalid_argument("flow: levels must be >= 1");
  if (!(c.lipschitz > 0.0 && c.lipschitz < 1.0)) throw std::invalid_argument("flow: lipschitz budget must lie in (0, 1)");
  if (!(c.alpha > 0.0)) throw std::invalid_argument("flow: alpha must be positive");
  if (c.width == 0 || c.hidden_layers == 0) throw std::invalid_argument("flow: width and hidden layers must be positive");
  for (std::size_t d : c.spatial) {
    if (d == 0 || d % (std::size_t{1} << c.levels) != 0) {
      throw ShapeError("flow: spatial size " + shape_str(c.spatial) + " is not divisible by 2^" + std::to_string(c.levels));
    }
  }
}

/// Identity-initialized model: ActNorm (s=1, b=0), K = I, zero final layers.
inline FlowModel make_flow_model(const FlowConfig& config) {
  validate_config(config);
  FlowModel m;
  m.config = config;
  m.bank = make_bank(config.bank);
  const std::size_t C = m.channels();
  Rng g(config.seed, 1);
  for (std::size_t l = 1; l <= config.levels; ++l) {
    const std::size_t P = m.level_positions(l);
    std::vector<Block> blocks;
    for (std::size_t k = 0; k < config.blocks; ++k) {
      Block b;
      b.actnorm.log_scale = Tensor(Shape{C});
      b.actnorm.bias = Tensor(Shape{C});
      b.inv.raw = Tensor(Shape{C, C});
      if (config.kind == BlockKind::Coupling) {
        b.coupling.rho = make_mlp(P, config.width, (C - 1) * P, config.hidden_layers, g, true);
        b.coupling.eta = make_mlp(P, config.width, (C - 1) * P, config.hidden_layers, g, true);
      } else {
        b.ires.phi = make_mlp(C * P, config.width, C * P, config.hidden_layers, g, true);
      }
      blocks.push_back(std::move(b));
    }
    m.levels.push_back(std::move(blocks));
  }
  spectral_normalize(m);
  return m;
}

/// Overwrites every parameter with N(0, scale^2) draws (a generic non-identity
/// model for invertibility and gradient checks); iRes weights are then
/// spectrally normalized.
inline void randomize_parameters(FlowModel& model, std::uint64_t seed, double scale) {
  Rng g(seed, 2);
  for_each_parameter(model, [&](const std::string& name, Tensor& t) {
    double s = scale;
    if (name.find(".w") != std::string::npos) s = scale * 3.0 / std::sqrt(static_cast<double>(t.dim(0)));
    for (double& v : t.data()) v = s * g.normal();
  });
  if (model.config.kind == BlockKind::IRes) {
    // warm the persistent vectors so the first normalization sees converged estimates
    for (int i = 0; i < 10; ++i) spectral_normalize(model);
  }
}

// ---------------------------------------------------------------------------
// Differentiable block maps on [B, C, P]

struct BoundMlp {
  std::vector<ad::Var> w;
  std::vector<ad::Var> b;

  Mlp values() const {
    Mlp m;
    for (const ad::Var& v : w) m.w.push_back(v.value());
    for (const ad::Var& v : b) m.b.push_back(v.value());
    return m;
  }
  std::vector<ad::Var> flat() const {
    std::vector<ad::Var> out;
    for (std::size_t i = 0; i < w.size(); ++i) {
      out.push_back(w[i]);
      out.push_back(b[i]);
    }
    return out;
  }
};

struct BoundBlock {
  ad::Var log_scale;
  ad::Var bias;
  ad::Var raw;
  BoundMlp rho;
  BoundMlp eta;
  BoundMlp phi;
};

struct BoundModel {
  const FlowModel* model = nullptr;
  std::vector<std::vector<BoundBlock>> levels;
  std::vector<ad::Var> leaves;  // for_each_parameter order
};

inline BoundMlp bind_mlp(ad::Tape& t, const Mlp& m, bool trainable, std::vector<ad::Var>* leaves) {
  BoundMlp out;
  for (std::size_t i = 0; i < m.layers(); ++i) {
    out.w.push_back(trainable ? t.leaf(m.w[i]) : t.constant(m.w[i]));
    out.b.push_back(trainable ? t.leaf(m.b[i]) : t.constant(m.b[i]));
    if (leaves) {
      leaves->push_back(out.w.back());
      leaves->push_back(out.b.back());
    }
  }
  return out;
}

inline BoundBlock bind_block(ad::Tape& t, const Block& b, BlockKind kind, bool trainable,
                             std::vector<ad::Var>* leaves = nullptr) {
  BoundBlock out;
  auto bind = [&](const Tensor& v) {
    ad::Var x = trainable ? t.leaf(v) : t.constant(v);
    if (leaves) leaves->push_back(x);
    return x;
  };
  out.log_scale = bind(b.actnorm.log_scale);
  out.bias = bind(b.actnorm.bias);
  out.raw = bind(b.inv.raw);
  if (kind == BlockKind::Coupling) {
    out.rho = bind_mlp(t, b.coupling.rho, trainable, leaves);
    out.eta = bind_mlp(t, b.coupling.eta, trainable, leaves);
  } else {
    out.phi = bind_mlp(t, b.ires.phi, trainable, leaves);
  }
  return out;
}

/// Places the model's parameters on a tape: leaves when trainable, constants otherwise.
inline BoundModel bind(ad::Tape& t, const FlowModel& model, bool trainable) {
  BoundModel bm;
  bm.model = &model;
  for (const auto& level : model.levels) {
    std::vector<BoundBlock> bl;
    for (const Block& b : level) bl.push_back(bind_block(t, b, model.config.kind, trainable, &bm.leaves));
    bm.levels.push_back(std::move(bl));
  }
  return bm;
}

/// Builds a BoundModel from caller-supplied variables in for_each_parameter order.
inline BoundModel bind_vars(const FlowModel& model, std::span<const ad::Var> vars) {
  BoundModel bm;
  bm.model = &model;
  std::size_t k = 0;
  auto next = [&]() {
    if (k >= vars.size()) throw std::invalid_argument("bind_vars: too few variables for the model");
    bm.leaves.push_back(vars[k]);
    return vars[k++];
  };
  auto take_mlp = [&](const Mlp& m) {
    BoundMlp out;
    for (std::size_t i = 0; i < m.layers(); ++i) {
      out.w.push_back(next());
      out.b.push_back(next());
    }
    return out;
  };
  for (const auto& level : model.levels) {
    std::vector<BoundBlock> bl;
    for (const Block& b : level) {
      BoundBlock bb;
      bb.log_scale = next();
      bb.bias = next();
      bb.raw = next();
      if (model.config.kind == BlockKind::Coupling) {
        bb.rho = take_mlp(b.coupling.rho);
        bb.eta = take_mlp(b.coupling.eta);
      } else {
        bb.phi = take_mlp(b.ires.phi);
      }
      bl.push_back(std::move(bb));
    }
    bm.levels.push_back(std::move(bl));
  }
  if (k != vars.size()) throw std::invalid_argument("bind_vars: too many variables for the model");
  return bm;
}

inline ad::Var mlp_forward(const BoundMlp& m, ad::Var x) {
  const std::size_t batch = x.shape()[0];
  ad::Var h = x;
  for (std::size_t l = 0; l < m.w.size(); ++l) {
    h = ad::add(ad::matmul(h, m.w[l]), ad::tile(m.b[l], {batch, 1}));
    if (l + 1 < m.w.size()) h = ad::tanh(h);
  }
  return h;
}

namespace flow_detail {

inline void check_state(const ad::Var& c, std::size_t channels, const char* op) {
  if (c.value().rank() != 3 || c.shape()[1] != channels) {
    throw ShapeError(std::string(op) + ": expected [B, " + std::to_string(channels) + ", P], got " + shape_str(c.shape()));
  }
}

// Broadcasts a per-channel vector [C] over [B, C, P].
inline ad::Var per_channel(ad::Var v, const Shape& state) {
  return ad::tile(ad::reshape(v, {1, state[1], 1}), {state[0], 1, state[2]});
}

}  // namespace flow_detail

inline ad::Var actnorm_fwd(ad::Var c, ad::Var log_scale, ad::Var bias) {
  flow_detail::check_state(c, log_scale.size(), "actnorm");
  const Shape s = c.shape();
  return ad::add(ad::mul(c, flow_detail::per_channel(ad::exp(log_scale), s)), flow_detail::per_channel(bias, s));
}

inline ad::Var actnorm_inv(ad::Var c, ad::Var log_scale, ad::Var bias) {
  flow_detail::check_state(c, log_scale.size(), "actnorm_inv");
  const Shape s = c.shape();
  return ad::mul(ad::sub(c, flow_detail::per_channel(bias, s)), flow_detail::per_channel(ad::exp(-log_scale), s));
}

/// K = (I - A)(I + A)^-1 with A = raw - raw^T.
inline ad::Var cayley(ad::Var raw) {
  const std::size_t n = raw.shape()[0];
  ad::Var a = ad::sub(raw, ad::transpose(raw));
  ad::Var eye = raw.tape().constant(Tensor::eye(n));
  return ad::matmul(ad::sub(eye, a), ad::inverse(ad::add(eye, a)));
}

/// Position-wise channel mixing (K (x) I) c.
inline ad::Var inv1x1_apply(ad::Var c, ad::Var k) {
  flow_detail::check_state(c, k.shape()[0], "inv1x1");
  const Shape s = c.shape();
  ad::Var flat = ad::reshape(ad::permute(c, {1, 0, 2}), {s[1], s[0] * s[2]});
  ad::Var mixed = ad::reshape(ad::matmul(k, flat), {s[1], s[0], s[2]});
  return ad::permute(mixed, {1, 0, 2});
}

inline ad::Var coupling_fwd(ad::Var c, const BoundMlp& rho, const BoundMlp& eta, double alpha) {
  const Shape s = c.shape();
  if (s.size() != 3 || s[1] < 2) throw ShapeError("coupling: expected [B, C>=2, P], got " + shape_str(s));
  const std::size_t B = s[0], C = s[1], P = s[2];
  ad::Var low3 = ad::slice(c, 1, 0, 1);
  ad::Var low = ad::reshape(low3, {B, P});
  ad::Var high = ad::reshape(ad::slice(c, 1, 1, C - 1), {B, (C - 1) * P});
  ad::Var scale = ad::exp(ad::scale(ad::tanh(mlp_forward(rho, low)), alpha));
  ad::Var out = ad::add(ad::mul(high, scale), mlp_forward(eta, low));
  return ad::concat({low3, ad::reshape(out, {B, C - 1, P})}, 1);
}

inline ad::Var coupling_inv(ad::Var c, const BoundMlp& rho, const BoundMlp& eta, double alpha) {
  const Shape s = c.shape();
  if (s.size() != 3 || s[1] < 2) throw ShapeError("coupling_inv: expected [B, C>=2, P], got " + shape_str(s));
  const std::size_t B = s[0], C = s[1], P = s[2];
  ad::Var low3 = ad::slice(c, 1, 0, 1);
  ad::Var low = ad::reshape(low3, {B, P});
  ad::Var high = ad::reshape(ad::slice(c, 1, 1, C - 1), {B, (C - 1) * P});
  ad::Var inv_scale = ad::exp(ad::scale(ad::tanh(mlp_forward(rho, low)), -alpha));
  ad::Var out = ad::mul(ad::sub(high, mlp_forward(eta, low)), inv_scale);
  return ad::concat({low3, ad::reshape(out, {B, C - 1, P})}, 1);
}

inline ad::Var ires_fwd(ad::Var c, const BoundMlp& phi) {
  const Shape s = c.shape();
  ad::Var flat = ad::reshape(c, {s[0], s[1] * s[2]});
  return ad::reshape(ad::add(flat, mlp_forward(phi, flat)), s);
}

struct FixedPointOptions {
  double tol = 1e-10;
  std::size_t max_iter = 200;
};

struct InverseCertificate {
  std::size_t iterations = 0;
  double residual = 0.0;  // ||x + phi(x) - y||_inf
};

/// Solves x + phi(x) = y by x_{k+1} = y - phi(x_k), x_0 = y; stops when
/// ||x_{k+1} - x_k||_inf < tol. Throws ConvergenceError after max_iter.
template <class Phi>
std::pair<Tensor, InverseCertificate> fixed_point_inverse(Phi&& phi, const Tensor& y, const FixedPointOptions& opt = {}) {
  Tensor x = y;
  InverseCertificate cert;
  for (std::size_t it = 1; it <= opt.max_iter; ++it) {
    const Tensor p = phi(x);
    double step = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double nx = y[i] - p[i];
      step = std::max(step, std::abs(nx - x[i]));
      x[i] = nx;
    }
    if (step < opt.tol) {
      cert.iterations = it;
      const Tensor px = phi(x);
      for (std::size_t i = 0; i < x.size(); ++i) cert.residual = std::max(cert.residual, std::abs(x[i] + px[i] - y[i]));
      return {std::move(x), cert};
    }
  }
  const Tensor px = phi(x);
  double residual = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) residual = std::max(residual, std::abs(x[i] + px[i] - y[i]));
  throw ConvergenceError("iresblock inverse did not converge in " + std::to_string(opt.max_iter) +
                             " iterations (residual " + std::to_string(residual) + ")",
                         residual, opt.max_iter);
}

/// Differentiable iResBlock inverse. The backward pass uses implicit
/// differentiation: v solves v + J^T v = g by fixed-point iteration, then
/// ybar = v and thetabar = -(dphi/dtheta)^T v.
inline ad::Var ires_inv(ad::Var c, const BoundMlp& phi, const FixedPointOptions& opt = {},
                        InverseCertificate* cert = nullptr) {
  const Shape s = c.shape();
  const Tensor y = c.value().reshaped({s[0], s[1] * s[2]});
  const Mlp values = phi.values();
  auto [x, certificate] = fixed_point_inverse([&values](const Tensor& v) { return mlp_eval(values, v); }, y, opt);
  if (cert) *cert = certificate;
  std::vector<ad::Var> inputs{c};
  for (const ad::Var& v : phi.flat()) inputs.push_back(v);
  auto backward = [values, x, opt, s](const Tensor& adj) -> std::vector<Tensor> {
    ad::Tape sub;
    ad::Var xv = sub.leaf(x);
    const BoundMlp sp = bind_mlp(sub, values, true, nullptr);
    ad::Var out = mlp_forward(sp, xv);
    const Tensor g = adj.reshaped(x.shape());
    Tensor v = g;
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
      sub.backward(out, v);
      const Tensor jtv = sub.grad(xv);
      double step = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double nv = g[i] - jtv[i];
        step = std::max(step, std::abs(nv - v[i]));
        v[i] = nv;
      }
      if (step < opt.tol) break;
    }
    sub.backward(out, v);
    std::vector<Tensor> grads{v.reshaped(s)};
    for (const ad::Var& p : sp.flat()) {
      Tensor gp = sub.grad(p);
      for (double& e : gp.data()) e = -e;
      grads.push_back(std::move(gp));
    }
    return grads;
  };
  return ad::custom(inputs, x.reshaped(s), backward);
}

inline ad::Var block_fwd(ad::Var c, const BoundBlock& b, const FlowConfig& cfg) {
  c = actnorm_fwd(c, b.log_scale, b.bias);
  c = inv1x1_apply(c, cayley(b.raw));
  return cfg.kind == BlockKind::Coupling ? coupling_fwd(c, b.rho, b.eta, cfg.alpha) : ires_fwd(c, b.phi);
}

inline ad::Var block_inv(ad::Var c, const BoundBlock& b, const FlowConfig& cfg, const FixedPointOptions& opt = {},
                         InverseCertificate* cert = nullptr) {
  c = cfg.kind == BlockKind::Coupling ? coupling_inv(c, b.rho, b.eta, cfg.alpha) : ires_inv(c, b.phi, opt, cert);
  c = inv1x1_apply(c, ad::transpose(cayley(b.raw)));
  return actnorm_inv(c, b.log_scale, b.bias);
}

// ---------------------------------------------------------------------------
// Hierarchical forward / inverse

struct FlowOutputVar {
  ad::Var y;               // [B, spatial / 2^T]
  std::vector<ad::Var> z;  // level l: [B, C-1, P_l]
};

inline void check_input(const FlowModel& m, const Shape& s) {
  Shape expect{0};
  expect.insert(expect.end(), m.config.spatial.begin(), m.config.spatial.end());
  if (s.size() != expect.size() || !std::equal(s.begin() + 1, s.end(), expect.begin() + 1)) {
    throw ShapeError("flow: input shape " + shape_str(s) + " does not match model spatial " + shape_str(m.config.spatial));
  }
}

inline FlowOutputVar flow_forward(const BoundModel& bm, ad::Var x) {
  const FlowModel& m = *bm.model;
  check_input(m, x.shape());
  const std::size_t B = x.shape()[0];
  const std::size_t C = m.channels();
  FlowOutputVar out;
  ad::Var cur = x;
  for (std::size_t l = 1; l <= m.config.levels; ++l) {
    ad::Var c = analyze_stacked(cur, m.bank, m.config.dims);
    for (const BoundBlock& b : bm.levels[l - 1]) c = block_fwd(c, b, m.config);
    out.z.push_back(ad::slice(c, 1, 1, C - 1));
    Shape next{B};
    const Shape sp = m.level_spatial(l + 1);
    next.insert(next.end(), sp.begin(), sp.end());
    cur = ad::reshape(ad::slice(c, 1, 0, 1), next);
  }
  out.y = cur;
  return out;
}

inline ad::Var flow_inverse(const BoundModel& bm, ad::Var y, std::span<const ad::Var> z, const FixedPointOptions& opt = {}) {
  const FlowModel& m = *bm.model;
  if (z.size() != m.config.levels) {
    throw ShapeError("flow_inverse: expected " + std::to_string(m.config.levels) + " latents, got " + std::to_string(z.size()));
  }
  const std::size_t B = y.shape()[0];
  const std::size_t C = m.channels();
  ad::Var cur = y;
  for (std::size_t l = m.config.levels; l >= 1; --l) {
    const std::size_t P = m.level_positions(l);
    if (cur.size() != B * P || z[l - 1].shape() != Shape{B, C - 1, P}) {
      throw ShapeError("flow_inverse: level " + std::to_string(l) + " shapes " + shape_str(cur.shape()) + " / " +
                       shape_str(z[l - 1].shape()) + " do not match the model");
    }
    ad::Var c = ad::concat({ad::reshape(cur, {B, 1, P}), z[l - 1]}, 1);
    const auto& blocks = bm.levels[l - 1];
    for (std::size_t k = blocks.size(); k-- > 0;) c = block_inv(c, blocks[k], m.config, opt);
    cur = synthesize_stacked(c, m.bank, m.config.dims, m.level_spatial(l));
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Tensor-level convenience API (evaluated on a scratch tape of constants)

struct LatentSplit {
  Tensor y;
  std::vector<Tensor> z;
};

namespace flow_detail {

// Accepts [spatial...] or [B, spatial...]; returns batched tensor and whether a batch axis was added.
inline std::pair<Tensor, bool> batched(const Tensor& x, std::size_t dims) {
  if (x.rank() == dims) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return {x.reshaped(s), true};
  }
  return {x, false};
}

inline Tensor unbatched(const Tensor& x) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  return x.reshaped(s);
}

}  // namespace flow_detail

inline LatentSplit flow_forward(const FlowModel& m, const Tensor& x) {
  auto [xb, added] = flow_detail::batched(x, m.config.dims);
  ad::Tape t;
  const BoundModel bm = bind(t, m, false);
  const FlowOutputVar o = flow_forward(bm, t.constant(xb));
  LatentSplit out;
  out.y = added ? flow_detail::unbatched(o.y.value()) : o.y.value();
  for (const ad::Var& z : o.z) out.z.push_back(added ? flow_detail::unbatched(z.value()) : z.value());
  return out;
}

inline Tensor flow_inverse(const FlowModel& m, const Tensor& y, const std::vector<Tensor>& z,
                           const FixedPointOptions& opt = {}) {
  const bool added = y.rank() == m.config.dims;
  ad::Tape t;
  const BoundModel bm = bind(t, m, false);
  auto with_batch = [&](const Tensor& v) {
    if (!added) return v;
    Shape s{1};
    s.insert(s.end(), v.shape().begin(), v.shape().end());
    return v.reshaped(s);
  };
  std::vector<ad::Var> zv;
  for (const Tensor& zi : z) zv.push_back(t.constant(with_batch(zi)));
  const Tensor x = flow_inverse(bm, t.constant(with_batch(y)), zv, opt).value();
  return added ? flow_detail::unbatched(x) : x;
}

/// Data-dependent ActNorm initialization on a batch: each block's ActNorm is
/// set so its output has zero mean and unit variance per channel.
inline void initialize_actnorm(FlowModel& m, const Tensor& batch) {
  auto [xb, added] = flow_detail::batched(batch, m.config.dims);
  (void)added;
  check_input(m, xb.shape());
  ad::Tape t;
  const std::size_t B = xb.shape()[0];
  ad::Var cur = t.constant(xb);
  for (std::size_t l = 1; l <= m.config.levels; ++l) {
    ad::Var c = analyze_stacked(cur, m.bank, m.config.dims);
    for (Block& blk : m.levels[l - 1]) {
      const Tensor& v = c.value();
      const std::size_t C = v.dim(1), P = v.dim(2);
      for (std::size_t ch = 0; ch < C; ++ch) {
        double mean = 0.0, sq = 0.0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t p = 0; p < P; ++p) mean += v[(b * C + ch) * P + p];
        mean /= static_cast<double>(B * P);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t p = 0; p < P; ++p) {
            const double d = v[(b * C + ch) * P + p] - mean;
            sq += d * d;
          }
        const double sd = std::sqrt(sq / static_cast<double>(B * P));
        const double s = sd > 1e-6 ? 1.0 / sd : 1.0;
        blk.actnorm.log_scale[ch] = std::log(s);
        blk.actnorm.bias[ch] = -mean * s;
      }
      blk.actnorm.initialized = true;
      c = block_fwd(c, bind_block(t, blk, m.config.kind, false), m.config);
    }
    Shape next{B};
    const Shape sp = m.level_spatial(l + 1);
    next.insert(next.end(), sp.begin(), sp.end());
    cur = ad::reshape(ad::slice(c, 1, 0, 1), next);
  }
}

/// Derived orthogonal K of a block.
inline Tensor derived_k(const Inv1x1Params& p) {
  ad::Tape t;
  return cayley(t.constant(p.raw)).value();
}

// Single-block Tensor wrappers on [B, C, P] or [C, P] states.

namespace flow_detail {

template <class F>
Tensor on_state(const Tensor& c, F&& f) {
  const bool added = c.rank() == 2;
  const Tensor cb = added ? c.reshaped({1, c.dim(0), c.dim(1)}) : c;
  ad::Tape t;
  const Tensor out = f(t, t.constant(cb)).value();
  return added ? out.reshaped(c.shape()) : out;
}

}  // namespace flow_detail

inline Tensor actnorm_fwd(const Tensor& c, const ActNormParams& p) {
  return flow_detail::on_state(c, [&](ad::Tape& t, ad::Var v) {
    return actnorm_fwd(v, t.constant(p.log_scale), t.constant(p.bias));
  });
}

inline Tensor actnorm_inv(const Tensor& c, const ActNormParams& p) {
  return flow_detail::on_state(c, [&](ad::Tape& t, ad::Var v) {
    return actnorm_inv(v, t.constant(p.log_scale), t.constant(p.bias));
  });
}

inline Tensor inv1x1_fwd(const Tensor& c, const Tensor& k) {
  return flow_detail::on_state(c, [&](ad::Tape& t, ad::Var v) { return inv1x1_apply(v, t.constant(k)); });
}

inline Tensor inv1x1_inv(const Tensor& c, const Tensor& k) { return inv1x1_fwd(c, kernels::transpose(k)); }

inline Tensor coupling_fwd(const Tensor& c, const CouplingParams& p, double alpha) {
  return flow_detail::on_state(c, [&](ad::Tape& t, ad::Var v) {
    return coupling_fwd(v, bind_mlp(t, p.rho, false, nullptr), bind_mlp(t, p.eta, false, nullptr), alpha);
  });
}

inline Tensor coupling_inv(const Tensor& c, const CouplingParams& p, double alpha) {
  return flow_detail::on_state(c, [&](ad::Tape& t, ad::Var v) {
    return coupling_inv(v, bind_mlp(t, p.rho, false, nullptr), bind_mlp(t, p.eta, false, nullptr), alpha);
  });
}

inline Tensor iresblock_fwd(const Tensor& c, const IResParams& p) {
  return flow_detail::on_state(c, [&](ad::Tape& t, ad::Var v) { return ires_fwd(v, bind_mlp(t, p.phi, false, nullptr)); });
}

inline std::pair<Tensor, InverseCertificate> iresblock_inv(const Tensor& y, const IResParams& p,
                                                           const FixedPointOptions& opt = {}) {
  InverseCertificate cert;
  Tensor x = flow_detail::on_state(y, [&](ad::Tape& t, ad::Var v) {
    return ires_inv(v, bind_mlp(t, p.phi, false, nullptr), opt, &cert);
  });
  return {std::move(x), cert};
}

/// max over layers of ||K^T K - I||_max for every derived K.
inline double orthogonality_defect(const FlowModel& m) {
  double worst = 0.0;
  for (const auto& level : m.levels)
    for (const Block& b : level) {
      const Tensor k = derived_k(b.inv);
      worst = std::max(worst, max_abs_diff(kernels::matmul(k, k, true, false), Tensor::eye(k.dim(0))));
    }
  return worst;
}

/// Product of per-layer spectral-norm estimates of every iResBlock (max over blocks).
inline double lipschitz_estimate(const FlowModel& m, std::size_t iterations = 100) {
  double worst = 0.0;
  for (const auto& level : m.levels)
    for (const Block& b : level) {
      double prod = 1.0;
      for (const Tensor& w : b.ires.phi.w) {
        Tensor u;
        prod *= power_iteration(w, u, iterations);
      }
      if (!b.ires.phi.w.empty()) worst = std::max(worst, prod);
    }
  return worst;
}

}  // namespace lr2flow
