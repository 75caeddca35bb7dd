#pragma once

// Bicubic resampling (Keys kernel, a = -0.5) with circular boundary. Pixel
// centers are aligned: a 1/2 downscale samples input coordinate 2j + 0.5, a x2
// upscale samples input coordinate i/2 - 0.25. No antialiasing prefilter.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lr2flow/kernels.hpp"
#include "lr2flow/tensor.hpp"

namespace lr2flow {

inline double cubic_kernel(double t, double a = -0.5) {
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

/// Dense m x n resampling matrix along one axis for output length m.
inline Tensor bicubic_matrix(std::size_t n, std::size_t m) {
  Tensor r(Shape{m, n});
  const double ratio = static_cast<double>(n) / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double u = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    const double base = std::floor(u);
    for (int k = -1; k <= 2; ++k) {
      const double pos = base + k;
      const double w = cubic_kernel(u - pos);
      const long long idx = static_cast<long long>(pos);
      const std::size_t src = static_cast<std::size_t>(((idx % static_cast<long long>(n)) + static_cast<long long>(n)) %
                                                       static_cast<long long>(n));
      r.at(i, src) += w;
    }
  }
  return r;
}

inline Tensor resample_axis(const Tensor& x, std::size_t axis, const Tensor& r) {
  const auto v = kernels::axis_view(x.shape(), axis);
  const std::size_t m = r.dim(0);
  Shape s = x.shape();
  s[axis] = m;
  Tensor y(s);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < v.n; ++k) {
        const double w = r.at(i, k);
        if (w == 0.0) continue;
        for (std::size_t q = 0; q < v.inner; ++q) y[(o * m + i) * v.inner + q] += w * x[(o * v.n + k) * v.inner + q];
      }
  return y;
}

/// Resizes the trailing `axes` axes of x (default 2) by `factor` (0.5 or 2).
inline Tensor bicubic_resize(const Tensor& x, double factor, std::size_t axes = 2) {
  if (axes == 0 || x.rank() < axes) throw ShapeError("bicubic_resize: cannot resize " + std::to_string(axes) + " axes of " + shape_str(x.shape()));
  if (factor != 0.5 && factor != 2.0) throw std::invalid_argument("bicubic_resize: factor must be 0.5 or 2");
  Tensor y = x;
  for (std::size_t axis = x.rank() - axes; axis < x.rank(); ++axis) {
    const std::size_t n = y.dim(axis);
    if (factor == 0.5 && n % 2 != 0) throw ShapeError("bicubic_resize: odd length " + std::to_string(n) + " on axis " +
                                                      std::to_string(axis));
    const std::size_t m = factor == 0.5 ? n / 2 : n * 2;
    y = resample_axis(y, axis, bicubic_matrix(n, m));
  }
  return y;
}

/// Bicubic down by 2 then up by 2.
inline Tensor bicubic_roundtrip(const Tensor& x, std::size_t axes = 2) {
  return bicubic_resize(bicubic_resize(x, 0.5, axes), 2.0, axes);
}

}  // namespace lr2flow
