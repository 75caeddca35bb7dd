#pragma once

// Framelet (wavelet tight-frame) filter banks and the analysis/synthesis pair
// W, W^T. Every filter is applied as a circular correlation followed by
// stride-2 decimation:  (W_i x)[j] = sum_k h_i[k] x[(2j + k) mod n].
// 2-D transforms are separable; subband (i, j) uses filter i along rows and
// filter j along columns, ordered low (0,0) first then lexicographically.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lr2flow/autodiff.hpp"
#include "lr2flow/kernels.hpp"
#include "lr2flow/lrtf.hpp"
#include "lr2flow/tensor.hpp"

namespace lr2flow {

enum class BankKind { LinearBspline, Haar, PixelUnshuffle };

struct FilterBank {
  std::string name;
  BankKind kind = BankKind::Haar;
  std::vector<std::vector<double>> filters;  // filters[0] is the low-pass
  std::size_t downsample = 2;

  std::size_t r() const { return filters.size() - 1; }
  std::size_t channels() const { return filters.size(); }
  std::size_t taps() const { return filters.empty() ? 0 : filters[0].size(); }
};

inline FilterBank make_bank(BankKind kind) {
  const double s2 = std::numbers::sqrt2;
  FilterBank b;
  b.kind = kind;
  switch (kind) {
    case BankKind::LinearBspline:
      b.name = "linear-bspline";
      b.filters = {{s2 / 4, s2 / 2, s2 / 4}, {0.5, 0.0, -0.5}, {-s2 / 4, s2 / 2, -s2 / 4}};
      break;
    case BankKind::Haar:
      b.name = "haar";
      b.filters = {{1 / s2, 1 / s2}, {1 / s2, -1 / s2}};
      break;
    case BankKind::PixelUnshuffle:
      b.name = "pixel-unshuffle";
      b.filters = {{1.0, 0.0}, {0.0, 1.0}};
      break;
  }
  return b;
}

inline BankKind parse_bank_kind(std::string_view name) {
  if (name == "linear-bspline" || name == "bspline") return BankKind::LinearBspline;
  if (name == "haar") return BankKind::Haar;
  if (name == "pixel-unshuffle") return BankKind::PixelUnshuffle;
  throw std::invalid_argument("unknown filter bank '" + std::string(name) + "'");
}

inline FilterBank make_bank(std::string_view name) { return make_bank(parse_bank_kind(name)); }

/// Explicit (n/2) x n matrix of "circular-correlate with h, keep every 2nd sample".
inline Tensor filter_matrix(const std::vector<double>& h, std::size_t n) {
  if (n % 2 != 0) throw std::invalid_argument("filter_matrix: n must be even, got " + std::to_string(n));
  Tensor m(Shape{n / 2, n});
  for (std::size_t j = 0; j < n / 2; ++j)
    for (std::size_t k = 0; k < h.size(); ++k) m.at(j, (2 * j + k) % n) += h[k];
  return m;
}

/// Stacked rows of filters [first, last).
inline Tensor stacked_matrix(const FilterBank& bank, std::size_t n, std::size_t first, std::size_t last) {
  Tensor m(Shape{(last - first) * n / 2, n});
  for (std::size_t i = first; i < last; ++i) {
    const Tensor fi = filter_matrix(bank.filters[i], n);
    std::copy(fi.data().begin(), fi.data().end(), m.data().begin() + static_cast<std::ptrdiff_t>((i - first) * fi.size()));
  }
  return m;
}

inline Tensor analysis_matrix(const FilterBank& bank, std::size_t n) { return stacked_matrix(bank, n, 0, bank.channels()); }
inline Tensor low_matrix(const FilterBank& bank, std::size_t n) { return stacked_matrix(bank, n, 0, 1); }
inline Tensor high_matrix(const FilterBank& bank, std::size_t n) { return stacked_matrix(bank, n, 1, bank.channels()); }

struct Coefficients {
  Tensor low;
  std::vector<Tensor> high;
  std::size_t level = 1;
  std::size_t dims = 1;

  std::size_t subbands() const { return 1 + high.size(); }
  const Tensor& band(std::size_t k) const { return k == 0 ? low : high.at(k - 1); }
};

namespace framelet_detail {

inline void check_axes(const Tensor& x, std::size_t dims, std::size_t taps) {
  if (dims != 1 && dims != 2) throw std::invalid_argument("dims must be 1 or 2, got " + std::to_string(dims));
  if (x.rank() < dims) throw ShapeError("analyze: tensor of shape " + shape_str(x.shape()) + " has fewer than dims axes");
  for (std::size_t a = x.rank() - dims; a < x.rank(); ++a) {
    if (x.dim(a) % 2 != 0) {
      throw ShapeError("analyze: axis " + std::to_string(a) + " has odd length " + std::to_string(x.dim(a)));
    }
    if (x.dim(a) < taps) {
      throw ShapeError("analyze: axis " + std::to_string(a) + " length " + std::to_string(x.dim(a)) +
                       " is shorter than the filter");
    }
  }
}

}  // namespace framelet_detail

/// Analysis W applied to the trailing `dims` axes of x (leading axes are batch).
inline Coefficients analyze(const Tensor& x, const FilterBank& bank, std::size_t dims = 1) {
  framelet_detail::check_axes(x, dims, bank.taps());
  Coefficients c;
  c.dims = dims;
  const std::size_t rk = x.rank();
  std::vector<Tensor> bands;
  if (dims == 1) {
    for (const auto& h : bank.filters) bands.push_back(kernels::conv_stride(x, h, rk - 1, 2));
  } else {
    for (const auto& hi : bank.filters) {
      const Tensor rows = kernels::conv_stride(x, hi, rk - 2, 2);
      for (const auto& hj : bank.filters) bands.push_back(kernels::conv_stride(rows, hj, rk - 1, 2));
    }
  }
  c.low = std::move(bands[0]);
  c.high.assign(std::make_move_iterator(bands.begin() + 1), std::make_move_iterator(bands.end()));
  return c;
}

/// Synthesis W^T: the exact adjoint of analyze, applied to arbitrary coefficients.
inline Tensor synthesize(const Coefficients& c, const FilterBank& bank, std::size_t dims = 1) {
  const std::size_t k = bank.channels();
  const std::size_t expected = dims == 1 ? k : k * k;
  if (c.subbands() != expected) {
    throw ShapeError("synthesize: expected " + std::to_string(expected) + " subbands, got " +
                     std::to_string(c.subbands()));
  }
  for (std::size_t b = 1; b < c.subbands(); ++b) {
    if (c.band(b).shape() != c.low.shape()) {
      throw ShapeError("synthesize: subband " + std::to_string(b) + " shape " + shape_str(c.band(b).shape()) +
                       " differs from low " + shape_str(c.low.shape()));
    }
  }
  const std::size_t rk = c.low.rank();
  if (rk < dims) throw ShapeError("synthesize: coefficient rank too small for dims");
  Shape out_shape = c.low.shape();
  for (std::size_t a = rk - dims; a < rk; ++a) out_shape[a] *= 2;
  Tensor x(out_shape);
  auto add_into = [&x](const Tensor& t) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += t[i];
  };
  if (dims == 1) {
    for (std::size_t i = 0; i < k; ++i)
      add_into(kernels::conv_stride_transpose(c.band(i), bank.filters[i], rk - 1, 2, out_shape[rk - 1]));
  } else {
    for (std::size_t i = 0; i < k; ++i) {
      Shape mid = c.low.shape();
      mid[rk - 1] = out_shape[rk - 1];
      Tensor rows(mid);
      for (std::size_t j = 0; j < k; ++j) {
        const Tensor t = kernels::conv_stride_transpose(c.band(i * k + j), bank.filters[j], rk - 1, 2, out_shape[rk - 1]);
        for (std::size_t q = 0; q < rows.size(); ++q) rows[q] += t[q];
      }
      add_into(kernels::conv_stride_transpose(rows, bank.filters[i], rk - 2, 2, out_shape[rk - 2]));
    }
  }
  return x;
}

/// Re-analyzes the low subband T times; level 1 first.
inline std::vector<Coefficients> multi_level_analyze(const Tensor& x, const FilterBank& bank, std::size_t levels,
                                                     std::size_t dims = 1) {
  if (levels == 0) throw std::invalid_argument("multi_level_analyze: levels must be >= 1");
  const std::size_t div = std::size_t{1} << levels;
  for (std::size_t a = x.rank() - std::min(dims, x.rank()); a < x.rank(); ++a) {
    if (x.dim(a) % div != 0) {
      throw ShapeError("multi_level_analyze: axis " + std::to_string(a) + " length " + std::to_string(x.dim(a)) +
                       " not divisible by 2^" + std::to_string(levels));
    }
  }
  std::vector<Coefficients> out;
  Tensor cur = x;
  for (std::size_t l = 1; l <= levels; ++l) {
    Coefficients c = analyze(cur, bank, dims);
    c.level = l;
    cur = c.low;
    out.push_back(std::move(c));
  }
  return out;
}

/// Inverse of multi_level_analyze: synthesize from the coarsest level up.
inline Tensor multi_level_synthesize(const std::vector<Coefficients>& levels, const FilterBank& bank, std::size_t dims = 1) {
  if (levels.empty()) throw std::invalid_argument("multi_level_synthesize: no levels");
  Tensor cur = levels.back().low;
  for (std::size_t l = levels.size(); l-- > 0;) {
    Coefficients c = levels[l];
    c.low = cur;
    cur = synthesize(c, bank, dims);
  }
  return cur;
}

/// ||W^T W - I||_max from explicit matrices at size n (1-D).
inline double verify_uep(const FilterBank& bank, std::size_t n) {
  if (n % 2 != 0) throw std::invalid_argument("verify_uep: n must be even, got " + std::to_string(n));
  const Tensor w = analysis_matrix(bank, n);
  const Tensor wtw = kernels::matmul(w, w, true, false);
  return max_abs_diff(wtw, Tensor::eye(n));
}

/// ||W^T W - I||_max for the separable 2-D transform on n x n images, built
/// column by column by applying synthesize(analyze(e_k)).
inline double verify_uep_2d(const FilterBank& bank, std::size_t n) {
  if (n % 2 != 0) throw std::invalid_argument("verify_uep_2d: n must be even, got " + std::to_string(n));
  double worst = 0.0;
  Tensor e(Shape{n, n});
  for (std::size_t k = 0; k < n * n; ++k) {
    e[k] = 1.0;
    const Tensor col = synthesize(analyze(e, bank, 2), bank, 2);
    for (std::size_t i = 0; i < col.size(); ++i) worst = std::max(worst, std::abs(col[i] - (i == k ? 1.0 : 0.0)));
    e[k] = 0.0;
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Differentiable channel-stacked form used by the flow: an image batch
// [B, n] (1-D) or [B, H, W] (2-D) maps to [B, C, P] with C subbands of P
// samples each, in the frozen subband order.

inline std::size_t subband_count(const FilterBank& bank, std::size_t dims) {
  return dims == 1 ? bank.channels() : bank.channels() * bank.channels();
}

inline ad::Var analyze_stacked(ad::Var x, const FilterBank& bank, std::size_t dims) {
  framelet_detail::check_axes(x.value(), dims, bank.taps());
  if (x.value().rank() != dims + 1) throw ShapeError("analyze_stacked expects [B, spatial...], got " + shape_str(x.shape()));
  ad::Tape& tape = x.tape();
  const std::size_t batch = x.shape()[0];
  std::vector<ad::Var> hs;
  for (const auto& h : bank.filters) hs.push_back(tape.constant(Tensor::vector(h)));
  std::vector<ad::Var> parts;
  if (dims == 1) {
    const std::size_t p = x.shape()[1] / 2;
    for (const ad::Var& h : hs) parts.push_back(ad::reshape(ad::conv(x, h, 1, 2), {batch, 1, p}));
  } else {
    const std::size_t p = (x.shape()[1] / 2) * (x.shape()[2] / 2);
    for (const ad::Var& hi : hs) {
      const ad::Var rows = ad::conv(x, hi, 1, 2);
      for (const ad::Var& hj : hs) parts.push_back(ad::reshape(ad::conv(rows, hj, 2, 2), {batch, 1, p}));
    }
  }
  return ad::concat(std::span<const ad::Var>(parts), 1);
}

/// Adjoint of analyze_stacked; `spatial` is the output image shape without batch.
inline ad::Var synthesize_stacked(ad::Var c, const FilterBank& bank, std::size_t dims, const Shape& spatial) {
  ad::Tape& tape = c.tape();
  const Shape& cs = c.shape();
  const std::size_t channels = subband_count(bank, dims);
  if (cs.size() != 3 || cs[1] != channels || spatial.size() != dims) {
    throw ShapeError("synthesize_stacked: coefficient shape " + shape_str(cs) + " inconsistent with " +
                     std::to_string(channels) + " subbands over spatial " + shape_str(spatial));
  }
  const std::size_t batch = cs[0];
  std::vector<ad::Var> hs;
  for (const auto& h : bank.filters) hs.push_back(tape.constant(Tensor::vector(h)));
  if (dims == 1) {
    const std::size_t n = spatial[0];
    if (cs[2] * 2 != n) throw ShapeError("synthesize_stacked: subband length mismatch for " + shape_str(cs));
    ad::Var acc;
    for (std::size_t i = 0; i < hs.size(); ++i) {
      ad::Var band = ad::reshape(ad::slice(c, 1, i, 1), {batch, n / 2});
      ad::Var t = ad::conv_transpose(band, hs[i], 1, 2, n);
      acc = acc.valid() ? ad::add(acc, t) : t;
    }
    return acc;
  }
  const std::size_t H = spatial[0], W = spatial[1];
  if (cs[2] * 4 != H * W) throw ShapeError("synthesize_stacked: subband size mismatch for " + shape_str(cs));
  const std::size_t k = bank.channels();
  ad::Var acc;
  for (std::size_t i = 0; i < k; ++i) {
    ad::Var rows;
    for (std::size_t j = 0; j < k; ++j) {
      ad::Var band = ad::reshape(ad::slice(c, 1, i * k + j, 1), {batch, H / 2, W / 2});
      ad::Var t = ad::conv_transpose(band, hs[j], 2, 2, W);
      rows = rows.valid() ? ad::add(rows, t) : t;
    }
    ad::Var t = ad::conv_transpose(rows, hs[i], 1, 2, H);
    acc = acc.valid() ? ad::add(acc, t) : t;
  }
  return acc;
}

/// Writes one LRTF file per subband plus a plain-text manifest.
inline void save_coefficients(const std::filesystem::path& dir, const std::vector<Coefficients>& levels,
                              const FilterBank& bank) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "subbands.txt");
  manifest << "bank = " << bank.name << "\n";
  manifest << "levels = " << levels.size() << "\n";
  manifest << "dims = " << (levels.empty() ? 1 : levels[0].dims) << "\n";
  manifest << "order = low, then high subbands in filter-index lexicographic order\n";
  for (const Coefficients& c : levels) {
    for (std::size_t b = 0; b < c.subbands(); ++b) {
      const std::string file = "level" + std::to_string(c.level) + "_band" + std::to_string(b) + ".lrtf";
      save_lrtf((dir / file).string(), c.band(b));
      std::string label;
      if (c.dims == 1) {
        label = "h" + std::to_string(b);
      } else {
        label = "h" + std::to_string(b / bank.channels()) + "h" + std::to_string(b % bank.channels());
      }
      manifest << file << " = level " << c.level << " subband " << b << " (" << label << ") shape "
               << shape_str(c.band(b).shape()) << "\n";
    }
  }
}

}  // namespace lr2flow
