#pragma once

// The user-facing downscale phi(x) = [F(Wx)]_{1:d} and upscale
// psi(y) = E_{p(z)}[W^T F^-1(y, z)].

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lr2flow/flow.hpp"
#include "lr2flow/metrics.hpp"
#include "lr2flow/rng.hpp"

namespace lr2flow {

struct LatentPrior {
  double sigma = 0.0;
};

inline Tensor downscale(const FlowModel& model, const Tensor& x) { return flow_forward(model, x).y; }

/// Latent shapes matching a y produced by this model (batched iff y is).
inline std::vector<Shape> latent_shapes(const FlowModel& model, const Tensor& y) {
  const bool batched = y.rank() == model.config.dims + 1;
  std::vector<Shape> out;
  for (std::size_t l = 1; l <= model.config.levels; ++l) {
    Shape s{model.channels() - 1, model.level_positions(l)};
    if (batched) s.insert(s.begin(), y.dim(0));
    out.push_back(s);
  }
  return out;
}

/// Mean of flow_inverse(y, z_k) over `samples` draws z_k ~ N(0, sigma^2 I);
/// sample k draws from stream k of the seed, and the sum runs in sample order.
inline Tensor upscale(const FlowModel& model, const Tensor& y, const LatentPrior& prior, std::size_t samples,
                      std::uint64_t seed) {
  if (samples == 0) throw std::invalid_argument("upscale: samples must be positive");
  if (prior.sigma < 0.0) throw std::invalid_argument("upscale: sigma must be nonnegative");
  const std::vector<Shape> shapes = latent_shapes(model, y);
  if (prior.sigma == 0.0) {
    std::vector<Tensor> z;
    for (const Shape& s : shapes) z.push_back(Tensor::zeros(s));
    return flow_inverse(model, y, z);
  }
  Tensor acc;
  for (std::size_t k = 0; k < samples; ++k) {
    Rng g(seed, k);
    std::vector<Tensor> z;
    for (const Shape& s : shapes) z.push_back(randn(s, g, prior.sigma));
    const Tensor x = flow_inverse(model, y, z);
    if (k == 0) {
      acc = x;
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) acc[i] += x[i];
    }
  }
  for (double& v : acc.data()) v /= static_cast<double>(samples);
  return acc;
}

struct RoundtripReport {
  double mse = 0.0;
  double psnr = 0.0;
  std::vector<double> z_energy;  // ||z^(l)||^2 / h_l per level
};

inline RoundtripReport roundtrip_report(const FlowModel& model, const Tensor& x, const LatentPrior& prior,
                                        std::size_t samples, std::uint64_t seed) {
  const LatentSplit s = flow_forward(model, x);
  const Tensor rec = upscale(model, s.y, prior, samples, seed);
  RoundtripReport r;
  r.mse = lr2flow::mse(x, rec);
  r.psnr = lr2flow::psnr(x, rec, 1.0);
  for (const Tensor& z : s.z) r.z_energy.push_back(sum_squares(z) / static_cast<double>(z.size()));
  return r;
}

}  // namespace lr2flow
