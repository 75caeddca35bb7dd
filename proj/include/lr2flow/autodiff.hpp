#pragma once

// Reverse-mode automatic differentiation over dense float-64 tensors.
//
// A Tape records every primitive evaluated eagerly through Var handles; the
// tape is rebuilt for each evaluation (no static graph). Node identifiers
// increase in creation order, so a reverse sweep over identifiers is a valid
// topological order for the backward pass.

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lr2flow/kernels.hpp"
#include "lr2flow/tensor.hpp"

namespace lr2flow::ad {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  AddScalar,
  Exp,
  Tanh,
  Reciprocal,
  Abs,
  Sum,
  Slice,
  Concat,
  Reshape,
  Permute,
  Tile,
  Gather,
  MatMul,
  Conv,
  ConvTranspose,
  Inverse,
  RoundSte,
  Clamp,
  Custom,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Exp: return "exp";
    case Op::Tanh: return "tanh";
    case Op::Reciprocal: return "reciprocal";
    case Op::Abs: return "abs";
    case Op::Sum: return "sum";
    case Op::Slice: return "slice";
    case Op::Concat: return "concat";
    case Op::Reshape: return "reshape";
    case Op::Permute: return "permute";
    case Op::Tile: return "tile";
    case Op::Gather: return "gather";
    case Op::MatMul: return "matmul";
    case Op::Conv: return "conv";
    case Op::ConvTranspose: return "conv_transpose";
    case Op::Inverse: return "inverse";
    case Op::RoundSte: return "round_ste";
    case Op::Clamp: return "clamp";
    case Op::Custom: return "custom";
  }
  return "unknown";
}

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Maps the adjoint of a custom node's output to one adjoint per input
/// (an empty Tensor means "no contribution").
using CustomBackward = std::function<std::vector<Tensor>(const Tensor& adjoint)>;

struct Node {
  Op op = Op::Constant;
  std::vector<std::size_t> inputs;
  Tensor value;
  Tensor adjoint;
  bool has_adjoint = false;
  bool requires_grad = false;
  std::vector<std::size_t> iargs;
  std::vector<double> dargs;
  CustomBackward custom;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(Op::Leaf, {}, std::move(value), {}, {}, {}, true); }
  Var constant(Tensor value) { return push(Op::Constant, {}, std::move(value), {}, {}, {}, false); }

  Var record(Op op, std::vector<std::size_t> inputs, Tensor value, std::vector<std::size_t> iargs = {},
             std::vector<double> dargs = {}, CustomBackward custom = {}) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    return push(op, std::move(inputs), std::move(value), std::move(iargs), std::move(dargs), std::move(custom), needs);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar root seeded with 1.
  void backward(Var root) {
    if (root.size() != 1) {
      throw ShapeError("backward requires a scalar root, got shape " + shape_str(root.shape()));
    }
    backward(root, Tensor(root.shape(), 1.0));
  }

  /// Vector-Jacobian product: reverse sweep seeded with `seed` at `root`.
  void backward(Var root, const Tensor& seed) {
    if (seed.shape() != root.shape()) {
      throw ShapeError("backward seed shape " + shape_str(seed.shape()) + " does not match root " +
                       shape_str(root.shape()));
    }
    clear_adjoints();
    adjoint_ref(root.id()) = seed;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_adjoint || !n.requires_grad || n.inputs.empty()) continue;
      propagate(id);
    }
  }

  /// Adjoint of `v` after backward; zeros when nothing flowed into it.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    return n.has_adjoint ? n.adjoint : Tensor::zeros(n.value.shape());
  }

  void clear_adjoints() {
    for (Node& n : nodes_) {
      if (n.has_adjoint) {
        n.adjoint = Tensor();
        n.has_adjoint = false;
      }
    }
  }

 private:
  Var push(Op op, std::vector<std::size_t> inputs, Tensor value, std::vector<std::size_t> iargs,
           std::vector<double> dargs, CustomBackward custom, bool requires_grad) {
    const std::size_t id = nodes_.size();
    if (!value.all_finite()) {
      throw NonFiniteError("non-finite value produced by node " + std::to_string(id) + " (" + op_name(op) + ")");
    }
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.iargs = std::move(iargs);
    n.dargs = std::move(dargs);
    n.custom = std::move(custom);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, id);
  }

  Tensor& adjoint_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_adjoint) {
      n.adjoint = Tensor::zeros(n.value.shape());
      n.has_adjoint = true;
    }
    return n.adjoint;
  }

  bool wants(std::size_t id) const { return nodes_[id].requires_grad; }

  void accumulate(std::size_t id, const Tensor& g) {
    if (!wants(id)) return;
    Tensor& a = adjoint_ref(id);
    if (a.size() == g.size()) {
      auto as = a.data();
      const auto gs = g.data();
      for (std::size_t i = 0; i < as.size(); ++i) as[i] += gs[i];
    } else if (a.size() == 1) {
      double s = 0.0;
      for (double v : g.data()) s += v;
      a[0] += s;
    } else {
      throw ShapeError("adjoint shape mismatch at node " + std::to_string(id));
    }
  }

  template <class F>
  void accumulate_with(std::size_t id, F&& f) {
    if (!wants(id)) return;
    f(adjoint_ref(id));
  }

  inline void propagate(std::size_t id);

  std::deque<Node> nodes_;  // deque: references to node values survive push_back
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }

namespace detail {

inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
}

inline bool is_scalar(const Tensor& t) { return t.rank() == 0; }

inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_scalar(a)) return b.shape();
  if (is_scalar(b)) return a.shape();
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
Tensor elementwise(const Tensor& a, const Tensor& b, const char* op, F&& f) {
  Tensor out(broadcast_shape(a, b, op));
  const bool sa = a.size() == 1 && out.size() != 1;
  const bool sb = b.size() == 1 && out.size() != 1;
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(a[sa ? 0 : i], b[sb ? 0 : i]);
  return out;
}

template <class F>
Tensor map(const Tensor& a, F&& f) {
  Tensor out(a.shape());
  auto o = out.data();
  const auto in = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(in[i]);
  return out;
}

// Iterates the flat index of `x` (shape `in`) that feeds flat index `flat` of a tiling.
inline std::vector<std::size_t> tile_sources(const Shape& in, const Shape& out) {
  const auto in_strides = kernels::strides_of(in);
  std::vector<std::size_t> src(numel(out));
  std::vector<std::size_t> idx(out.size(), 0), iin(out.size(), 0);
  std::size_t s = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    src[flat] = s;
    for (std::size_t d = out.size(); d-- > 0;) {
      s += in_strides[d];
      if (++iin[d] == in[d]) {
        iin[d] = 0;
        s -= in[d] * in_strides[d];
      }
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return src;
}

}  // namespace detail

inline void Tape::propagate(std::size_t id) {
  // Copy what we need: accumulate() may touch other nodes but never reallocates.
  const Node& n = nodes_[id];
  const Tensor& g = n.adjoint;
  const auto& in = n.inputs;
  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      break;
    case Op::Add:
      accumulate(in[0], g);
      accumulate(in[1], g);
      break;
    case Op::Sub:
      accumulate(in[0], g);
      accumulate(in[1], detail::map(g, [](double v) { return -v; }));
      break;
    case Op::Mul: {
      const Tensor& a = nodes_[in[0]].value;
      const Tensor& b = nodes_[in[1]].value;
      if (wants(in[0])) accumulate(in[0], detail::elementwise(g, b, "mul", [](double x, double y) { return x * y; }));
      if (wants(in[1])) accumulate(in[1], detail::elementwise(g, a, "mul", [](double x, double y) { return x * y; }));
      break;
    }
    case Op::Neg:
      accumulate(in[0], detail::map(g, [](double v) { return -v; }));
      break;
    case Op::Scale: {
      const double s = n.dargs[0];
      accumulate(in[0], detail::map(g, [s](double v) { return s * v; }));
      break;
    }
    case Op::AddScalar:
      accumulate(in[0], g);
      break;
    case Op::Exp:
      accumulate(in[0], detail::elementwise(g, n.value, "exp", [](double x, double y) { return x * y; }));
      break;
    case Op::Tanh:
      accumulate(in[0], detail::elementwise(g, n.value, "tanh", [](double x, double y) { return x * (1.0 - y * y); }));
      break;
    case Op::Reciprocal:
      accumulate(in[0], detail::elementwise(g, n.value, "reciprocal", [](double x, double y) { return -x * y * y; }));
      break;
    case Op::Abs: {
      const Tensor& a = nodes_[in[0]].value;
      accumulate(in[0], detail::elementwise(g, a, "abs", [](double x, double v) {
                   return v > 0.0 ? x : (v < 0.0 ? -x : 0.0);
                 }));
      break;
    }
    case Op::Sum: {
      const double s = g[0];
      accumulate_with(in[0], [s](Tensor& a) {
        for (double& v : a.data()) v += s;
      });
      break;
    }
    case Op::Slice: {
      const std::size_t axis = n.iargs[0], start = n.iargs[1], len = n.iargs[2];
      accumulate_with(in[0], [&](Tensor& a) {
        const auto v = kernels::axis_view(a.shape(), axis);
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t j = 0; j < len; ++j)
            for (std::size_t i = 0; i < v.inner; ++i)
              a[(o * v.n + start + j) * v.inner + i] += g[(o * len + j) * v.inner + i];
      });
      break;
    }
    case Op::Concat: {
      const std::size_t axis = n.iargs[0];
      const auto vo = kernels::axis_view(n.value.shape(), axis);
      std::size_t offset = 0;
      for (std::size_t inp : in) {
        const std::size_t len = nodes_[inp].value.dim(axis);
        accumulate_with(inp, [&](Tensor& a) {
          for (std::size_t o = 0; o < vo.outer; ++o)
            for (std::size_t j = 0; j < len; ++j)
              for (std::size_t i = 0; i < vo.inner; ++i)
                a[(o * len + j) * vo.inner + i] += g[(o * vo.n + offset + j) * vo.inner + i];
        });
        offset += len;
      }
      break;
    }
    case Op::Reshape:
      accumulate_with(in[0], [&](Tensor& a) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += g[i];
      });
      break;
    case Op::Permute: {
      std::vector<std::size_t> inverse(n.iargs.size());
      for (std::size_t i = 0; i < n.iargs.size(); ++i) inverse[n.iargs[i]] = i;
      accumulate(in[0], kernels::permute(g, inverse));
      break;
    }
    case Op::Tile: {
      const Shape& src_shape = nodes_[in[0]].value.shape();
      const auto src = detail::tile_sources(src_shape, n.value.shape());
      accumulate_with(in[0], [&](Tensor& a) {
        for (std::size_t i = 0; i < src.size(); ++i) a[src[i]] += g[i];
      });
      break;
    }
    case Op::Gather:
      accumulate_with(in[0], [&](Tensor& a) {
        for (std::size_t i = 0; i < n.iargs.size(); ++i) a[n.iargs[i]] += g[i];
      });
      break;
    case Op::MatMul: {
      const Tensor& a = nodes_[in[0]].value;
      const Tensor& b = nodes_[in[1]].value;
      if (wants(in[0])) accumulate(in[0], kernels::matmul(g, b, false, true));
      if (wants(in[1])) accumulate(in[1], kernels::matmul(a, g, true, false));
      break;
    }
    case Op::Conv: {
      const Tensor& x = nodes_[in[0]].value;
      const Tensor& h = nodes_[in[1]].value;
      const std::size_t axis = n.iargs[0], stride = n.iargs[1];
      if (wants(in[0])) accumulate(in[0], kernels::conv_stride_transpose(g, h.data(), axis, stride, x.dim(axis)));
      if (wants(in[1])) accumulate(in[1], Tensor::vector(kernels::conv_tap_correlation(g, x, h.size(), axis, stride)));
      break;
    }
    case Op::ConvTranspose: {
      const Tensor& y = nodes_[in[0]].value;
      const Tensor& h = nodes_[in[1]].value;
      const std::size_t axis = n.iargs[0], stride = n.iargs[1];
      if (wants(in[0])) accumulate(in[0], kernels::conv_stride(g, h.data(), axis, stride));
      if (wants(in[1])) accumulate(in[1], Tensor::vector(kernels::conv_tap_correlation(y, g, h.size(), axis, stride)));
      break;
    }
    case Op::Inverse: {
      // d(A^-1) = -A^-1 dA A^-1  =>  Abar = -Y^T G Y^T
      const Tensor& y = n.value;
      Tensor t = kernels::matmul(kernels::matmul(y, g, true, false), y, false, true);
      for (double& v : t.data()) v = -v;
      accumulate(in[0], t);
      break;
    }
    case Op::RoundSte:
      accumulate(in[0], g);
      break;
    case Op::Clamp: {
      const Tensor& a = nodes_[in[0]].value;
      const double lo = n.dargs[0], hi = n.dargs[1];
      accumulate(in[0], detail::elementwise(g, a, "clamp", [lo, hi](double x, double v) {
                   return (v >= lo && v <= hi) ? x : 0.0;
                 }));
      break;
    }
    case Op::Custom: {
      const std::vector<Tensor> parts = n.custom(g);
      for (std::size_t i = 0; i < in.size() && i < parts.size(); ++i) {
        if (!parts[i].empty()) accumulate(in[i], parts[i]);
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Primitive builders

inline Var add(Var a, Var b) {
  detail::same_tape(a, b, "add");
  Tensor v = detail::elementwise(a.value(), b.value(), "add", [](double x, double y) { return x + y; });
  return a.tape().record(Op::Add, {a.id(), b.id()}, std::move(v));
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b, "sub");
  Tensor v = detail::elementwise(a.value(), b.value(), "sub", [](double x, double y) { return x - y; });
  return a.tape().record(Op::Sub, {a.id(), b.id()}, std::move(v));
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b, "mul");
  Tensor v = detail::elementwise(a.value(), b.value(), "mul", [](double x, double y) { return x * y; });
  return a.tape().record(Op::Mul, {a.id(), b.id()}, std::move(v));
}

inline Var neg(Var a) { return a.tape().record(Op::Neg, {a.id()}, detail::map(a.value(), [](double x) { return -x; })); }

inline Var scale(Var a, double s) {
  return a.tape().record(Op::Scale, {a.id()}, detail::map(a.value(), [s](double x) { return s * x; }), {}, {s});
}

inline Var add_scalar(Var a, double s) {
  return a.tape().record(Op::AddScalar, {a.id()}, detail::map(a.value(), [s](double x) { return x + s; }), {}, {s});
}

inline Var exp(Var a) { return a.tape().record(Op::Exp, {a.id()}, detail::map(a.value(), [](double x) { return std::exp(x); })); }
inline Var tanh(Var a) { return a.tape().record(Op::Tanh, {a.id()}, detail::map(a.value(), [](double x) { return std::tanh(x); })); }
inline Var reciprocal(Var a) {
  return a.tape().record(Op::Reciprocal, {a.id()}, detail::map(a.value(), [](double x) { return 1.0 / x; }));
}
inline Var abs(Var a) { return a.tape().record(Op::Abs, {a.id()}, detail::map(a.value(), [](double x) { return std::abs(x); })); }

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Op::Sum, {a.id()}, Tensor::scalar(s));
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }
inline Var square(Var a) { return mul(a, a); }

inline Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  const auto v = kernels::axis_view(x.shape(), axis);
  if (start + len > v.n || len == 0) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) + ") invalid on axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape s = x.shape();
  s[axis] = len;
  Tensor out(s);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t i = 0; i < v.inner; ++i) out[(o * len + j) * v.inner + i] = x[(o * v.n + start + j) * v.inner + i];
  return a.tape().record(Op::Slice, {a.id()}, std::move(out), {axis, start, len});
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape s = parts[0].shape();
  if (axis >= s.size()) throw ShapeError("concat: axis out of range for " + shape_str(s));
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p, "concat");
    Shape q = p.shape();
    if (q.size() != s.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(q));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && q[d] != s[d]) throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(q));
    total += q[axis];
    ids.push_back(p.id());
  }
  s[axis] = total;
  Tensor out(s);
  const auto vo = kernels::axis_view(s, axis);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    const std::size_t len = x.dim(axis);
    for (std::size_t o = 0; o < vo.outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t i = 0; i < vo.inner; ++i) out[(o * vo.n + offset + j) * vo.inner + i] = x[(o * len + j) * vo.inner + i];
    offset += len;
  }
  return parts[0].tape().record(Op::Concat, std::move(ids), std::move(out), {axis});
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  std::vector<Var> v(parts);
  return concat(std::span<const Var>(v), axis);
}

inline Var reshape(Var a, Shape shape) {
  return a.tape().record(Op::Reshape, {a.id()}, a.value().reshaped(std::move(shape)));
}

inline Var permute(Var a, std::vector<std::size_t> axes) {
  Tensor v = kernels::permute(a.value(), axes);
  return a.tape().record(Op::Permute, {a.id()}, std::move(v), std::move(axes));
}

inline Var transpose(Var a) {
  if (a.value().rank() != 2) throw ShapeError("transpose expects 2-D, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

/// Repeats `a` reps[d] times along each axis d (explicit replacement for broadcasting).
inline Var tile(Var a, const Shape& reps) {
  const Shape& in = a.shape();
  if (reps.size() != in.size()) throw ShapeError("tile: reps rank does not match " + shape_str(in));
  Shape out(in.size());
  for (std::size_t d = 0; d < in.size(); ++d) out[d] = in[d] * reps[d];
  const auto src = detail::tile_sources(in, out);
  Tensor v(out);
  for (std::size_t i = 0; i < src.size(); ++i) v[i] = a.value()[src[i]];
  return a.tape().record(Op::Tile, {a.id()}, std::move(v), reps);
}

/// out[i] = a.flat[indices[i]], reshaped to `shape`.
inline Var gather(Var a, std::vector<std::size_t> indices, Shape shape) {
  if (numel(shape) != indices.size()) throw ShapeError("gather: index count does not match shape " + shape_str(shape));
  Tensor v(std::move(shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.size()) throw ShapeError("gather: index out of range for " + shape_str(a.shape()));
    v[i] = a.value()[indices[i]];
  }
  return a.tape().record(Op::Gather, {a.id()}, std::move(v), std::move(indices));
}

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  return a.tape().record(Op::MatMul, {a.id(), b.id()}, kernels::matmul(a.value(), b.value()));
}

/// Circular strided correlation along `axis` with filter taps `h` (1-D).
inline Var conv(Var x, Var h, std::size_t axis, std::size_t stride) {
  detail::same_tape(x, h, "conv");
  if (h.value().rank() != 1) throw ShapeError("conv: filter must be 1-D, got " + shape_str(h.shape()));
  return x.tape().record(Op::Conv, {x.id(), h.id()}, kernels::conv_stride(x.value(), h.value().data(), axis, stride),
                         {axis, stride});
}

/// Adjoint of conv: zero-insertion upsampling by `stride` then filtering, output axis length n.
inline Var conv_transpose(Var y, Var h, std::size_t axis, std::size_t stride, std::size_t n) {
  detail::same_tape(y, h, "conv_transpose");
  if (h.value().rank() != 1) throw ShapeError("conv_transpose: filter must be 1-D, got " + shape_str(h.shape()));
  return y.tape().record(Op::ConvTranspose, {y.id(), h.id()},
                         kernels::conv_stride_transpose(y.value(), h.value().data(), axis, stride, n), {axis, stride, n});
}

inline Var inverse(Var a) { return a.tape().record(Op::Inverse, {a.id()}, kernels::invert(a.value())); }

/// Rounds in the forward pass; identity gradient (straight-through).
inline Var round_ste(Var a) {
  return a.tape().record(Op::RoundSte, {a.id()}, detail::map(a.value(), [](double x) { return std::nearbyint(x); }));
}

inline Var clamp(Var a, double lo, double hi) {
  return a.tape().record(Op::Clamp, {a.id()}, detail::map(a.value(), [lo, hi](double x) { return std::clamp(x, lo, hi); }),
                         {}, {lo, hi});
}

inline Var custom(std::span<const Var> inputs, Tensor value, CustomBackward backward) {
  if (inputs.empty()) throw std::invalid_argument("custom: no inputs");
  std::vector<std::size_t> ids;
  for (const Var& v : inputs) ids.push_back(v.id());
  return inputs[0].tape().record(Op::Custom, std::move(ids), std::move(value), {}, {}, std::move(backward));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }

// ---------------------------------------------------------------------------
// Whole-graph evaluation helpers

/// A graph is a function that builds the computation on a fresh tape from
/// its bound parameter leaves and returns the root.
using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

struct Evaluation {
  std::unique_ptr<Tape> tape;
  std::vector<Var> params;
  Var root;

  const Tensor& value() const { return root.value(); }
};

inline Evaluation forward_eval(const GraphFn& graph, std::span<const Tensor> bindings) {
  Evaluation ev;
  ev.tape = std::make_unique<Tape>();
  ev.params.reserve(bindings.size());
  for (const Tensor& t : bindings) ev.params.push_back(ev.tape->leaf(t));
  ev.root = graph(*ev.tape, ev.params);
  return ev;
}

/// Gradients of the scalar root with respect to every bound parameter.
inline std::vector<Tensor> backward(Evaluation& ev) {
  ev.tape->backward(ev.root);
  std::vector<Tensor> grads;
  grads.reserve(ev.params.size());
  for (const Var& p : ev.params) grads.push_back(ev.tape->grad(p));
  return grads;
}

/// Max component-wise relative error between backward() and a fourth-order
/// central finite difference in parameter `param`. Relative error uses
/// max(|analytic|, |numeric|, 1e-12) as denominator.
inline double fd_check(const GraphFn& graph, std::vector<Tensor> bindings, std::size_t param, double epsilon = 1e-6) {
  if (param >= bindings.size()) throw std::out_of_range("fd_check: parameter index out of range");
  Evaluation ev = forward_eval(graph, bindings);
  const Tensor analytic = backward(ev).at(param);
  auto f = [&](const std::vector<Tensor>& b) { return forward_eval(graph, b).value().item(); };
  double worst = 0.0;
  for (std::size_t i = 0; i < bindings[param].size(); ++i) {
    const double base = bindings[param][i];
    auto at = [&](double delta) {
      bindings[param][i] = base + delta;
      return f(bindings);
    };
    const double fp1 = at(epsilon), fm1 = at(-epsilon), fp2 = at(2 * epsilon), fm2 = at(-2 * epsilon);
    bindings[param][i] = base;
    const double numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * epsilon);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace lr2flow::ad
