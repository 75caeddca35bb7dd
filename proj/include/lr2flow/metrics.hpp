#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "lr2flow/tensor.hpp"

namespace lr2flow {

inline double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// 10 log10(peak^2 / mse); +infinity when the images are identical.
inline double psnr(const Tensor& a, const Tensor& b, double peak = 1.0) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

/// Mean SSIM over all valid 11x11 windows (Gaussian weights, sigma 1.5) of 2-D images.
inline double ssim(const Tensor& a, const Tensor& b, double peak = 1.0) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() != 2) throw ShapeError("ssim expects a 2-D image, got " + shape_str(a.shape()));
  constexpr std::size_t win = 11;
  const std::size_t H = a.dim(0), W = a.dim(1);
  if (H < win || W < win) throw ShapeError("ssim: image " + shape_str(a.shape()) + " is smaller than the 11x11 window");
  std::vector<double> g(win);
  double gs = 0.0;
  for (std::size_t i = 0; i < win; ++i) {
    const double d = static_cast<double>(i) - 5.0;
    g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    gs += g[i];
  }
  for (double& v : g) v /= gs;
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + win <= H; ++r) {
    for (std::size_t c = 0; c + win <= W; ++c) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 0; i < win; ++i)
        for (std::size_t j = 0; j < win; ++j) {
          const double w = g[i] * g[j];
          const double x = a[(r + i) * W + c + j], y = b[(r + i) * W + c + j];
          mx += w * x;
          my += w * y;
          sxx += w * x * x;
          syy += w * y * y;
          sxy += w * x * y;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace lr2flow
