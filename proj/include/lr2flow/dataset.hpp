#pragma once

// Toy training data: synthetic band-limited patches with a step edge, or
// patches cut from a grayscale image.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "lr2flow/rng.hpp"
#include "lr2flow/tensor.hpp"

namespace lr2flow {

enum class DatasetKind { SyntheticBandlimited, ImagePatches };

struct ToyDataset {
  DatasetKind kind = DatasetKind::SyntheticBandlimited;
  std::uint64_t seed = 0;
  std::vector<Tensor> patches;

  std::size_t size() const { return patches.size(); }
};

inline DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "synthetic" || s == "synthetic-bandlimited") return DatasetKind::SyntheticBandlimited;
  if (s == "image" || s == "image-patches") return DatasetKind::ImagePatches;
  throw std::invalid_argument("unknown dataset kind '" + std::string(s) + "'");
}

/// One patch: 0.5 + up to 4 cosines with at most 3 cycles per patch side, plus
/// a step edge of random orientation, offset and contrast; clamped to [0, 1].
inline Tensor synthetic_patch(std::size_t h, std::size_t w, Rng& g) {
  Tensor x(Shape{h, w}, 0.5);
  const std::size_t waves = 1 + g.below(4);
  for (std::size_t k = 0; k < waves; ++k) {
    double fx = 0.0, fy = 0.0;
    while (fx == 0.0 && fy == 0.0) {
      fx = static_cast<double>(g.below(4));
      fy = static_cast<double>(g.below(7)) - 3.0;
    }
    const double amp = g.uniform(0.03, 0.15);
    const double phase = g.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        x.at(i, j) += amp * std::cos(2.0 * std::numbers::pi * (fy * static_cast<double>(i) / static_cast<double>(h) +
                                                               fx * static_cast<double>(j) / static_cast<double>(w)) +
                                     phase);
  }
  const double theta = g.uniform(0.0, 2.0 * std::numbers::pi);
  const double nx = std::cos(theta), ny = std::sin(theta);
  const double ci = g.uniform(0.25, 0.75) * static_cast<double>(h), cj = g.uniform(0.25, 0.75) * static_cast<double>(w);
  const double contrast = g.uniform(-0.35, 0.35);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double s = (static_cast<double>(i) + 0.5 - ci) * ny + (static_cast<double>(j) + 0.5 - cj) * nx;
      if (s > 0.0) x.at(i, j) += contrast;
    }
  for (double& v : x.data()) v = std::clamp(v, 0.0, 1.0);
  return x;
}

inline ToyDataset make_synthetic_dataset(std::size_t count, const Shape& spatial, std::uint64_t seed) {
  if (spatial.size() != 2) throw ShapeError("synthetic dataset needs a 2-D patch shape, got " + shape_str(spatial));
  ToyDataset d;
  d.kind = DatasetKind::SyntheticBandlimited;
  d.seed = seed;
  Rng g(seed, 0);
  for (std::size_t i = 0; i < count; ++i) d.patches.push_back(synthetic_patch(spatial[0], spatial[1], g));
  return d;
}

/// `count` patches at random positions of a 2-D image in [0, 1].
inline ToyDataset make_image_dataset(const Tensor& image, std::size_t count, const Shape& spatial, std::uint64_t seed) {
  if (image.rank() != 2 || spatial.size() != 2) throw ShapeError("image dataset needs 2-D image and patch shapes");
  const std::size_t H = image.dim(0), W = image.dim(1), h = spatial[0], w = spatial[1];
  if (h > H || w > W) throw ShapeError("patch " + shape_str(spatial) + " larger than image " + shape_str(image.shape()));
  ToyDataset d;
  d.kind = DatasetKind::ImagePatches;
  d.seed = seed;
  Rng g(seed, 0);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t r = g.below(H - h + 1), c = g.below(W - w + 1);
    Tensor p(Shape{h, w});
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) p.at(i, j) = image[(r + i) * W + c + j];
    d.patches.push_back(std::move(p));
  }
  return d;
}

/// Stacks selected patches into [B, H, W].
inline Tensor stack_patches(const ToyDataset& d, std::span<const std::size_t> idx) {
  if (idx.empty()) throw std::invalid_argument("stack_patches: empty selection");
  const Tensor& first = d.patches.at(idx[0]);
  Shape s{idx.size()};
  s.insert(s.end(), first.shape().begin(), first.shape().end());
  Tensor out(s);
  const std::size_t n = first.size();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& p = d.patches.at(idx[b]);
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return out;
}

inline Tensor stack_all(const ToyDataset& d) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_patches(d, idx);
}

}  // namespace lr2flow
