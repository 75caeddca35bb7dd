#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "lr2flow/tensor.hpp"

namespace lr2flow {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

struct OptimState {
  AdamWConfig config;
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

inline OptimState make_optim_state(std::span<const Tensor> params, AdamWConfig config = {}) {
  if (!(config.beta1 > 0.0 && config.beta1 < 1.0) || !(config.beta2 > 0.0 && config.beta2 < 1.0)) {
    throw std::invalid_argument("adamw: betas must lie in (0, 1)");
  }
  OptimState s;
  s.config = config;
  for (const Tensor& p : params) {
    s.m.push_back(Tensor::zeros(p.shape()));
    s.v.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

/// One AdamW update in place: bias-corrected moments, decoupled weight decay.
inline void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adamw: parameter, gradient and state counts differ");
  }
  const AdamWConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    const Tensor& g = grads[k];
    if (p.shape() != g.shape() || p.shape() != state.m[k].shape()) {
      throw ShapeError("adamw: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(g.shape()));
    }
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.lr * c.weight_decay * p[i];
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

}  // namespace lr2flow
