#pragma once

// Differentiable single-channel JPEG simulator: 8x8 blocks, level shift,
// orthonormal 2-D DCT-II, quantization by the scaled standard luminance table,
// differentiable rounding, dequantization, inverse DCT, clamp to [0, 1].

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "lr2flow/autodiff.hpp"
#include "lr2flow/rng.hpp"
#include "lr2flow/tensor.hpp"

namespace lr2flow {

enum class RoundingMode { AdditiveNoise, StraightThrough };

struct JpegSimConfig {
  int quality = 50;
  RoundingMode rounding = RoundingMode::StraightThrough;
  bool train = false;  // additive-noise mode adds U(-0.5, 0.5) only when training
};

inline constexpr std::array<int, 64> kLuminanceTable = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55, 64,
    81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

/// Standard quality scaling: 5000/QF below 50, 200 - 2 QF otherwise; entries clamped to [1, 255].
inline std::array<double, 64> quantization_table(int quality) {
  if (quality < 1 || quality > 100) throw std::invalid_argument("jpeg: quality factor must lie in [1, 100], got " +
                                                                std::to_string(quality));
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<double, 64> q{};
  for (std::size_t i = 0; i < 64; ++i) {
    const int v = (kLuminanceTable[i] * scale + 50) / 100;
    q[i] = static_cast<double>(std::clamp(v, 1, 255));
  }
  return q;
}

/// 64 x 64 matrix D (x) D of the orthonormal 8x8 2-D DCT-II acting on row-major blocks.
inline Tensor dct_matrix_64() {
  double d[8][8];
  for (int k = 0; k < 8; ++k)
    for (int n = 0; n < 8; ++n)
      d[k][n] = (k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0)) * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0);
  Tensor m(Shape{64, 64});
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v)
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) m.at(u * 8 + v, i * 8 + j) = d[u][i] * d[v][j];
  return m;
}

namespace jpeg_detail {

inline std::size_t reflect(long long i, std::size_t n) {
  // symmetric about the edge samples: -1 -> 1, n -> n - 2
  const long long period = 2 * static_cast<long long>(n) - 2;
  if (period <= 0) return 0;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<long long>(n) ? i : period - i);
}

}  // namespace jpeg_detail

/// img: [H, W] or [B, H, W] in [0, 1]. `noise` supplies U(-0.5, 0.5) draws for
/// additive-noise training mode and is required there.
inline ad::Var jpeg_simulate(ad::Var img, const JpegSimConfig& cfg, Rng* noise = nullptr) {
  const auto qt = quantization_table(cfg.quality);
  ad::Tape& t = img.tape();
  const Shape in = img.shape();
  if (in.size() != 2 && in.size() != 3) throw ShapeError("jpeg_simulate expects [H, W] or [B, H, W], got " + shape_str(in));
  const std::size_t B = in.size() == 3 ? in[0] : 1;
  const std::size_t H = in[in.size() - 2], W = in[in.size() - 1];
  const std::size_t Hp = (H + 7) / 8 * 8, Wp = (W + 7) / 8 * 8;
  ad::Var x = ad::reshape(img, {B, H, W});
  if (Hp != H || Wp != W) {
    std::vector<std::size_t> idx;
    idx.reserve(B * Hp * Wp);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < Hp; ++i)
        for (std::size_t j = 0; j < Wp; ++j)
          idx.push_back((b * H + jpeg_detail::reflect(static_cast<long long>(i), H)) * W +
                        jpeg_detail::reflect(static_cast<long long>(j), W));
    x = ad::gather(x, std::move(idx), {B, Hp, Wp});
  }
  const std::size_t nb = B * (Hp / 8) * (Wp / 8);
  ad::Var shifted = ad::add_scalar(ad::scale(x, 255.0), -128.0);
  ad::Var blocks = ad::reshape(ad::permute(ad::reshape(shifted, {B, Hp / 8, 8, Wp / 8, 8}), {0, 1, 3, 2, 4}), {nb, 64});
  ad::Var dct = t.constant(dct_matrix_64());
  ad::Var coeffs = ad::matmul(blocks, ad::transpose(dct));
  Tensor inv_q(Shape{nb, 64}), qv(Shape{nb, 64});
  for (std::size_t i = 0; i < nb * 64; ++i) {
    inv_q[i] = 1.0 / qt[i % 64];
    qv[i] = qt[i % 64];
  }
  ad::Var q = ad::mul(coeffs, t.constant(inv_q));
  ad::Var r;
  if (cfg.rounding == RoundingMode::AdditiveNoise && cfg.train) {
    if (!noise) throw std::invalid_argument("jpeg_simulate: additive-noise training mode needs a noise generator");
    r = ad::add(q, t.constant(rand_uniform({nb, 64}, *noise, -0.5, 0.5)));
  } else {
    r = ad::round_ste(q);
  }
  ad::Var deq = ad::mul(r, t.constant(qv));
  ad::Var pix = ad::matmul(deq, dct);
  ad::Var img_p = ad::reshape(ad::permute(ad::reshape(pix, {B, Hp / 8, Wp / 8, 8, 8}), {0, 1, 3, 2, 4}), {B, Hp, Wp});
  ad::Var out = ad::clamp(ad::scale(ad::add_scalar(img_p, 128.0), 1.0 / 255.0), 0.0, 1.0);
  if (Hp != H || Wp != W) {
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) idx.push_back((b * Hp + i) * Wp + j);
    out = ad::gather(out, std::move(idx), {B, H, W});
  }
  return ad::reshape(out, in);
}

inline Tensor jpeg_simulate(const Tensor& img, const JpegSimConfig& cfg, Rng* noise = nullptr) {
  ad::Tape t;
  return jpeg_simulate(t.constant(img), cfg, noise).value();
}

}  // namespace lr2flow
