#pragma once

// Raw numeric kernels shared by the autodiff primitives and the plain
// (tape-free) code paths. All convolutions are circular.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lr2flow/tensor.hpp"

namespace lr2flow::kernels {

struct AxisView {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

// y[o, j, i] = sum_k h[k] * x[o, (stride*j + k) mod n, i]
inline Tensor conv_stride(const Tensor& x, std::span<const double> h, std::size_t axis, std::size_t stride) {
  const AxisView v = axis_view(x.shape(), axis);
  if (stride == 0 || v.n % stride != 0) {
    throw ShapeError("conv: axis " + std::to_string(axis) + " of length " + std::to_string(v.n) +
                     " is not divisible by stride " + std::to_string(stride));
  }
  const std::size_t m = v.n / stride;
  Shape out_shape = x.shape();
  out_shape[axis] = m;
  Tensor y(out_shape);
  const auto xs = x.data();
  auto ys = y.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    const double* xo = xs.data() + o * v.n * v.inner;
    double* yo = ys.data() + o * m * v.inner;
    for (std::size_t j = 0; j < m; ++j) {
      double* yj = yo + j * v.inner;
      for (std::size_t k = 0; k < h.size(); ++k) {
        const double hk = h[k];
        if (hk == 0.0) continue;
        const double* xr = xo + ((stride * j + k) % v.n) * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) yj[i] += hk * xr[i];
      }
    }
  }
  return y;
}

// Exact adjoint of conv_stride: x[o, (stride*j + k) mod n, i] += h[k] * y[o, j, i]
inline Tensor conv_stride_transpose(const Tensor& y, std::span<const double> h, std::size_t axis, std::size_t stride,
                                    std::size_t n) {
  const AxisView v = axis_view(y.shape(), axis);
  if (v.n * stride != n) {
    throw ShapeError("conv_transpose: axis " + std::to_string(axis) + " length " + std::to_string(v.n) +
                     " times stride " + std::to_string(stride) + " != " + std::to_string(n));
  }
  Shape out_shape = y.shape();
  out_shape[axis] = n;
  Tensor x(out_shape);
  const auto ys = y.data();
  auto xs = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    const double* yo = ys.data() + o * v.n * v.inner;
    double* xo = xs.data() + o * n * v.inner;
    for (std::size_t j = 0; j < v.n; ++j) {
      const double* yj = yo + j * v.inner;
      for (std::size_t k = 0; k < h.size(); ++k) {
        const double hk = h[k];
        if (hk == 0.0) continue;
        double* xr = xo + ((stride * j + k) % n) * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) xr[i] += hk * yj[i];
      }
    }
  }
  return x;
}

// g[k] = sum_{o,j,i} a[o, j, i] * b[o, (stride*j + k) mod n, i], a has the decimated length.
inline std::vector<double> conv_tap_correlation(const Tensor& a, const Tensor& b, std::size_t taps, std::size_t axis,
                                                std::size_t stride) {
  const AxisView va = axis_view(a.shape(), axis);
  const AxisView vb = axis_view(b.shape(), axis);
  std::vector<double> g(taps, 0.0);
  const auto as = a.data();
  const auto bs = b.data();
  for (std::size_t o = 0; o < va.outer; ++o) {
    for (std::size_t j = 0; j < va.n; ++j) {
      const double* aj = as.data() + (o * va.n + j) * va.inner;
      for (std::size_t k = 0; k < taps; ++k) {
        const double* br = bs.data() + (o * vb.n + (stride * j + k) % vb.n) * vb.inner;
        double s = 0.0;
        for (std::size_t i = 0; i < va.inner; ++i) s += aj[i] * br[i];
        g[k] += s;
      }
    }
  }
  return g;
}

// C = op(A) * op(B) for 2-D tensors, op = transpose when the flag is set.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a 2-D tensor, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor t(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (trans_a || trans_b) return matmul(trans_a ? transpose(a) : a, trans_b ? transpose(b) : b);
  Tensor c(Shape{m, n});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}


inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// out.shape[i] = in.shape[axes[i]]
inline Tensor permute(const Tensor& x, std::span<const std::size_t> axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) throw ShapeError("permute: axes length does not match rank of " + shape_str(in));
  std::vector<bool> seen(in.size(), false);
  Shape out(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]]) throw ShapeError("permute: invalid axis list for " + shape_str(in));
    seen[axes[i]] = true;
    out[i] = in[axes[i]];
  }
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> src_stride(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) src_stride[i] = in_strides[axes[i]];
  Tensor y(out);
  std::vector<std::size_t> idx(out.size(), 0);
  const auto xs = x.data();
  auto ys = y.data();
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < y.size(); ++flat) {
    ys[flat] = xs[src];
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out[d]) break;
      src -= src_stride[d] * out[d];
      idx[d] = 0;
    }
  }
  return y;
}

// Gauss-Jordan with partial pivoting.
inline Tensor invert(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeError("inverse expects a square matrix, got " + shape_str(a.shape()));
  const std::size_t n = a.dim(0);
  Tensor m = a;
  Tensor inv = Tensor::eye(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m.at(r, col)) > std::abs(m.at(piv, col))) piv = r;
    if (std::abs(m.at(piv, col)) < 1e-300) throw std::domain_error("inverse: matrix is singular");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) {
        std::swap(m.at(piv, j), m.at(col, j));
        std::swap(inv.at(piv, j), inv.at(col, j));
      }
    }
    const double d = 1.0 / m.at(col, col);
    for (std::size_t j = 0; j < n; ++j) {
      m.at(col, j) *= d;
      inv.at(col, j) *= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m.at(r, col);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        m.at(r, j) -= f * m.at(col, j);
        inv.at(r, j) -= f * inv.at(col, j);
      }
    }
  }
  return inv;
}

}  // namespace lr2flow::kernels
