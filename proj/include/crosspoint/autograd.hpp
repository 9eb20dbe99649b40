#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph is an append-only tape. Every operation appends one node whose
// inputs already exist, so insertion order is a topological order and
// backward() simply walks the tape from the loss down to node 0.
//
// Broadcasting (add/sub/mul/div): shapes are aligned on their trailing
// axes; each aligned pair of extents must be equal or one of them must be 1.
// The shorter shape is padded with leading 1s. Anything else is a
// ShapeError.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crosspoint/errors.hpp"
#include "crosspoint/kernels.hpp"
#include "crosspoint/tensor.hpp"

namespace crosspoint {

using NodeId = std::size_t;

enum class OpKind : std::uint8_t {
  leaf,
  relu,
  leaky_relu,
  exp,
  log,
  neg,
  sqrt,
  add,
  sub,
  mul,
  div,
  scale,
  matmul,
  linear,
  transpose,
  reshape,
  reduce_sum,
  reduce_mean,
  reduce_max,
  concat,
  conv2d,
  gather_rows,
  log_sum_exp,
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph* graph() const { return graph_; }
  NodeId id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

class Graph {
 public:
  // Accumulates the node's output gradient into its inputs' gradients.
  using BackwardFn = std::function<void(Graph&, NodeId self)>;

  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var leaf(Tensor value, bool requires_grad = false) {
    Node node;
    node.kind = OpKind::leaf;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    grads_.emplace_back();
    return {this, nodes_.size() - 1};
  }

  Var parameter(Tensor value) { return leaf(std::move(value), true); }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an operation node. The backward closure is dropped when no input
  // requires a gradient, so inference-only graphs keep no closures alive.
  Var record(OpKind kind, std::vector<NodeId> inputs, Tensor value,
             BackwardFn backward) {
    bool needs_grad = false;
    for (NodeId in : inputs) {
      assert(in < nodes_.size());
      needs_grad = needs_grad || nodes_[in].requires_grad;
    }
#ifndef NDEBUG
    if (!all_finite(value.data())) {
      bool inputs_finite = true;
      for (NodeId in : inputs) {
        inputs_finite = inputs_finite && all_finite(nodes_[in].value.data());
      }
      assert(!inputs_finite && "non-finite output from finite inputs");
    }
#endif
    Node node;
    node.kind = kind;
    node.inputs = std::move(inputs);
    node.value = std::move(value);
    node.requires_grad = needs_grad;
    if (needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    grads_.emplace_back();
    return {this, nodes_.size() - 1};
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  /// Output gradient of a node during backward (empty when never reached).
  std::span<const double> output_grad(NodeId id) const { return grads_[id]; }

  /// Gradient buffer of an input, allocated as zeros on first use. Returns an
  /// empty span when the node does not require a gradient.
  std::span<double> grad_target(NodeId id) {
    if (!nodes_[id].requires_grad) return {};
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
    return g;
  }

  void backward(Var loss) {
    if (loss.graph() != this || loss.id() >= nodes_.size()) {
      throw GraphError("loss is not a node of this graph");
    }
    const Node& root = nodes_[loss.id()];
    if (root.value.size() != 1) {
      throw GraphError("backward needs a scalar loss, got shape " +
                       to_string(root.value.shape()));
    }
    for (auto& g : grads_) g.clear();
    if (!root.requires_grad) return;
    grads_[loss.id()].assign(1, 1.0);
    for (NodeId id = loss.id() + 1; id-- > 0;) {
      if (grads_[id].empty() || !nodes_[id].backward) continue;
      nodes_[id].backward(*this, id);
    }
  }

  /// Gradient of the last backward() with respect to v; zeros when v was not
  /// reachable from the loss.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    if (grads_[v.id()].empty()) return Tensor(n.value.shape());
    return Tensor(n.value.shape(), grads_[v.id()]);
  }

  static bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(),
                       [](double x) { return std::isfinite(x); });
  }

 private:
  std::deque<Node> nodes_;  // stable references while the tape grows
  std::vector<std::vector<double>> grads_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

namespace detail {

inline Graph& same_graph(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.graph() != b.graph()) {
    throw GraphError("operands belong to different graphs");
  }
  return *a.graph();
}

inline Graph& graph_of(Var a) {
  if (!a.valid()) throw GraphError("operation on an unbound Var");
  return *a.graph();
}

// Splits a shape around `axis` into (outer, extent, inner) counts.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.extent = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

// Per-output-element offsets into two broadcast operands.
struct Broadcast {
  Shape out_shape;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
  bool same = false;
};

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " +
                       to_string(b));
    }
    out[rank - 1 - i] = std::max(ea, eb);
  }
  return out;
}

inline std::vector<std::size_t> broadcast_index(const Shape& in,
                                                const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t pad = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t d = rank; d-- > pad;) {
    const std::size_t e = in[d - pad];
    stride[d] = e == 1 ? 0 : s;
    s *= e;
  }
  const std::size_t total = shape_size(out);
  std::vector<std::size_t> index(total);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    index[flat] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      offset += stride[d];
      if (counter[d] < out[d]) break;
      offset -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return index;
}

inline Broadcast make_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out_shape = a;
    bc.same = true;
    return bc;
  }
  bc.out_shape = broadcast_shape(a, b);
  bc.a_index = broadcast_index(a, bc.out_shape);
  bc.b_index = broadcast_index(b, bc.out_shape);
  return bc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

enum class UnaryKind : std::uint8_t { relu, leaky_relu, exp, log, neg, sqrt };

inline Var unary(Var a, UnaryKind kind, double slope = 0.01) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  auto xs = x.data();
  auto ys = y.data();
  OpKind op = OpKind::relu;
  switch (kind) {
    case UnaryKind::relu:
      op = OpKind::relu;
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > 0 ? xs[i] : 0.0;
      break;
    case UnaryKind::leaky_relu:
      op = OpKind::leaky_relu;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        ys[i] = xs[i] > 0 ? xs[i] : slope * xs[i];
      }
      break;
    case UnaryKind::exp:
      op = OpKind::exp;
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = std::exp(xs[i]);
      break;
    case UnaryKind::log:
      op = OpKind::log;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!(xs[i] > 0)) {
          throw DomainError("log of non-positive value " + std::to_string(xs[i]));
        }
        ys[i] = std::log(xs[i]);
      }
      break;
    case UnaryKind::neg:
      op = OpKind::neg;
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = -xs[i];
      break;
    case UnaryKind::sqrt:
      op = OpKind::sqrt;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i] < 0) {
          throw DomainError("sqrt of negative value " + std::to_string(xs[i]));
        }
        ys[i] = std::sqrt(xs[i]);
      }
      break;
  }
  const NodeId in = a.id();
  return g.record(op, {in}, std::move(y), [kind, slope, in](Graph& gr, NodeId self) {
    auto dx = gr.grad_target(in);
    if (dx.empty()) return;
    auto gy = gr.output_grad(self);
    auto xv = gr.value(in).data();
    auto yv = gr.value(self).data();
    switch (kind) {
      case UnaryKind::relu:
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv[i] > 0 ? gy[i] : 0.0;
        break;
      case UnaryKind::leaky_relu:
        for (std::size_t i = 0; i < dx.size(); ++i) {
          dx[i] += xv[i] > 0 ? gy[i] : slope * gy[i];
        }
        break;
      case UnaryKind::exp:
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] * yv[i];
        break;
      case UnaryKind::log:
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] / xv[i];
        break;
      case UnaryKind::neg:
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] -= gy[i];
        break;
      case UnaryKind::sqrt:
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i] * 0.5 / yv[i];
        break;
    }
  });
}

inline Var relu(Var a) { return unary(a, UnaryKind::relu); }
inline Var leaky_relu(Var a, double slope = 0.01) {
  return unary(a, UnaryKind::leaky_relu, slope);
}
inline Var exp(Var a) { return unary(a, UnaryKind::exp); }
inline Var log(Var a) { return unary(a, UnaryKind::log); }
inline Var neg(Var a) { return unary(a, UnaryKind::neg); }
inline Var sqrt(Var a) { return unary(a, UnaryKind::sqrt); }

/// Multiplies by a constant factor.
inline Var scale(Var a, double factor) {
  Graph& g = detail::graph_of(a);
  Tensor y = a.value();
  for (double& v : y.data()) v *= factor;
  const NodeId in = a.id();
  return g.record(OpKind::scale, {in}, std::move(y), [factor, in](Graph& gr, NodeId self) {
    auto dx = gr.grad_target(in);
    if (dx.empty()) return;
    auto gy = gr.output_grad(self);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * gy[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary with broadcasting
// ---------------------------------------------------------------------------

enum class BinaryKind : std::uint8_t { add, sub, mul, div };

inline Var binary(Var a, Var b, BinaryKind kind) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  auto bc = std::make_shared<detail::Broadcast>(
      detail::make_broadcast(x.shape(), z.shape()));
  if (kind == BinaryKind::div) {
    for (double v : z.data()) {
      if (v == 0.0) throw DomainError("division by zero");
    }
  }
  Tensor y(bc->out_shape);
  auto xs = x.data();
  auto zs = z.data();
  auto ys = y.data();
  auto ia = [&](std::size_t i) { return bc->same ? i : bc->a_index[i]; };
  auto ib = [&](std::size_t i) { return bc->same ? i : bc->b_index[i]; };
  OpKind op = OpKind::add;
  switch (kind) {
    case BinaryKind::add:
      op = OpKind::add;
      for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[ia(i)] + zs[ib(i)];
      break;
    case BinaryKind::sub:
      op = OpKind::sub;
      for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[ia(i)] - zs[ib(i)];
      break;
    case BinaryKind::mul:
      op = OpKind::mul;
      for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[ia(i)] * zs[ib(i)];
      break;
    case BinaryKind::div:
      op = OpKind::div;
      for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[ia(i)] / zs[ib(i)];
      break;
  }
  const NodeId na = a.id();
  const NodeId nb = b.id();
  return g.record(op, {na, nb}, std::move(y), [kind, bc, na, nb](Graph& gr, NodeId self) {
    auto gy = gr.output_grad(self);
    auto da = gr.grad_target(na);
    auto db = gr.grad_target(nb);
    auto xv = gr.value(na).data();
    auto zv = gr.value(nb).data();
    auto ia = [&](std::size_t i) { return bc->same ? i : bc->a_index[i]; };
    auto ib = [&](std::size_t i) { return bc->same ? i : bc->b_index[i]; };
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const std::size_t pa = ia(i);
      const std::size_t pb = ib(i);
      switch (kind) {
        case BinaryKind::add:
          if (!da.empty()) da[pa] += gy[i];
          if (!db.empty()) db[pb] += gy[i];
          break;
        case BinaryKind::sub:
          if (!da.empty()) da[pa] += gy[i];
          if (!db.empty()) db[pb] -= gy[i];
          break;
        case BinaryKind::mul:
          if (!da.empty()) da[pa] += gy[i] * zv[pb];
          if (!db.empty()) db[pb] += gy[i] * xv[pa];
          break;
        case BinaryKind::div:
          if (!da.empty()) da[pa] += gy[i] / zv[pb];
          if (!db.empty()) db[pb] -= gy[i] * xv[pa] / (zv[pb] * zv[pb]);
          break;
      }
    }
  });
}

inline Var add(Var a, Var b) { return binary(a, b, BinaryKind::add); }
inline Var sub(Var a, Var b) { return binary(a, b, BinaryKind::sub); }
inline Var mul(Var a, Var b) { return binary(a, b, BinaryKind::mul); }
inline Var div(Var a, Var b) { return binary(a, b, BinaryKind::div); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Linear algebra and shape manipulation
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (x.rank() != 2 || z.rank() != 2 || x.extent(1) != z.extent(0)) {
    throw ShapeError("matmul of " + to_string(x.shape()) + " and " +
                     to_string(z.shape()));
  }
  const std::size_t m = x.extent(0), k = x.extent(1), n = z.extent(1);
  Tensor y({m, n});
  kernels::gemm_nn(m, n, k, x.data().data(), z.data().data(), y.data().data());
  const NodeId na = a.id();
  const NodeId nb = b.id();
  return g.record(OpKind::matmul, {na, nb}, std::move(y),
                  [na, nb, m, n, k](Graph& gr, NodeId self) {
                    auto gy = gr.output_grad(self);
                    auto da = gr.grad_target(na);
                    auto db = gr.grad_target(nb);
                    // dA = dY * B^T, dB = A^T * dY
                    if (!da.empty()) {
                      kernels::gemm_nt(m, k, n, gy.data(), gr.value(nb).data().data(),
                                       da.data(), true);
                    }
                    if (!db.empty()) {
                      kernels::gemm_tn(k, n, m, gr.value(na).data().data(), gy.data(),
                                       db.data(), true);
                    }
                  });
}

/// x * w + b for x (m x k), w (k x n) and b of length n, broadcast over rows.
inline Var linear(Var x, Var w, Var b) {
  Graph& g = detail::same_graph(x, w);
  detail::same_graph(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.extent(1) != wv.extent(0) ||
      bv.size() != wv.extent(1)) {
    throw ShapeError("linear of " + to_string(xv.shape()) + ", " + to_string(wv.shape()) +
                     " and bias " + to_string(bv.shape()));
  }
  const std::size_t m = xv.extent(0), k = xv.extent(1), n = wv.extent(1);
  Tensor y({m, n});
  auto ys = y.data();
  auto bs = bv.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) ys[i * n + j] = bs[j];
  }
  kernels::gemm_nn(m, n, k, xv.data().data(), wv.data().data(), ys.data(), true);
  const NodeId nx = x.id(), nw = w.id(), nb = b.id();
  return g.record(OpKind::linear, {nx, nw, nb}, std::move(y),
                  [nx, nw, nb, m, n, k](Graph& gr, NodeId self) {
                    auto gy = gr.output_grad(self);
                    auto dx = gr.grad_target(nx);
                    auto dw = gr.grad_target(nw);
                    auto db = gr.grad_target(nb);
                    if (!dx.empty()) {
                      kernels::gemm_nt(m, k, n, gy.data(), gr.value(nw).data().data(),
                                       dx.data(), true);
                    }
                    if (!dw.empty()) {
                      kernels::gemm_tn(k, n, m, gr.value(nx).data().data(), gy.data(),
                                       dw.data(), true);
                    }
                    if (!db.empty()) {
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) db[j] += gy[i * n + j];
                      }
                    }
                  });
}

inline Var transpose(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ShapeError("transpose needs a matrix");
  const std::size_t r = x.extent(0), c = x.extent(1);
  Tensor y({c, r}, kernels::transpose(r, c, x.data().data()));
  const NodeId in = a.id();
  return g.record(OpKind::transpose, {in}, std::move(y), [in, r, c](Graph& gr, NodeId self) {
    auto dx = gr.grad_target(in);
    if (dx.empty()) return;
    auto gy = gr.output_grad(self);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += gy[j * r + i];
    }
  });
}

inline Var reshape(Var a, Shape shape) {
  Graph& g = detail::graph_of(a);
  if (shape_size(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " +
                     to_string(shape));
  }
  Tensor y = a.value().reshaped(std::move(shape));
  const NodeId in = a.id();
  return g.record(OpKind::reshape, {in}, std::move(y), [in](Graph& gr, NodeId self) {
    auto dx = gr.grad_target(in);
    if (dx.empty()) return;
    auto gy = gr.output_grad(self);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceKind : std::uint8_t { sum, mean, max };

struct MaxReduction {
  Var value;
  // Flat index, along the reduced axis, of the maximum of every output cell.
  std::vector<std::size_t> arg;
};

namespace detail {

inline Shape reduced_shape(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (d != axis) out.push_back(shape[d]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

/// Max over `axis`; gradient flows only to the first maximal entry.
inline MaxReduction max(Var a, std::size_t axis) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  if (axis >= x.rank()) throw ShapeError("reduce axis out of range");
  const auto s = detail::split_at(x.shape(), axis);
  Tensor y(detail::reduced_shape(x.shape(), axis));
  std::vector<std::size_t> arg(s.outer * s.inner, 0);
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* base = xs.data() + o * s.extent * s.inner;
    double* out = ys.data() + o * s.inner;
    std::size_t* am = arg.data() + o * s.inner;
    std::copy(base, base + s.inner, out);
    for (std::size_t e = 1; e < s.extent; ++e) {
      const double* row = base + e * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        if (row[i] > out[i]) {
          out[i] = row[i];
          am[i] = e;
        }
      }
    }
  }
  const NodeId in = a.id();
  auto shared_arg = std::make_shared<std::vector<std::size_t>>(arg);
  Var v = g.record(OpKind::reduce_max, {in}, std::move(y),
                   [in, s, shared_arg](Graph& gr, NodeId self) {
                     auto dx = gr.grad_target(in);
                     if (dx.empty()) return;
                     auto gy = gr.output_grad(self);
                     const auto& am = *shared_arg;
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t i = 0; i < s.inner; ++i) {
                         const std::size_t cell = o * s.inner + i;
                         dx[(o * s.extent + am[cell]) * s.inner + i] += gy[cell];
                       }
                     }
                   });
  return {v, std::move(arg)};
}

inline Var reduce(Var a, std::size_t axis, ReduceKind kind) {
  if (kind == ReduceKind::max) return max(a, axis).value;
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  if (axis >= x.rank()) throw ShapeError("reduce axis out of range");
  const auto s = detail::split_at(x.shape(), axis);
  Tensor y(detail::reduced_shape(x.shape(), axis));
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      const double* row = xs.data() + (o * s.extent + e) * s.inner;
      double* out = ys.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) out[i] += row[i];
    }
  }
  const double factor =
      kind == ReduceKind::mean ? 1.0 / static_cast<double>(s.extent) : 1.0;
  if (kind == ReduceKind::mean) {
    for (double& v : ys) v *= factor;
  }
  const NodeId in = a.id();
  return g.record(kind == ReduceKind::mean ? OpKind::reduce_mean : OpKind::reduce_sum,
                  {in}, std::move(y), [in, s, factor](Graph& gr, NodeId self) {
                    auto dx = gr.grad_target(in);
                    if (dx.empty()) return;
                    auto gy = gr.output_grad(self);
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t e = 0; e < s.extent; ++e) {
                        double* row = dx.data() + (o * s.extent + e) * s.inner;
                        const double* go = gy.data() + o * s.inner;
                        for (std::size_t i = 0; i < s.inner; ++i) row[i] += factor * go[i];
                      }
                    }
                  });
}

inline Var sum(Var a, std::size_t axis) { return reduce(a, axis, ReduceKind::sum); }
inline Var mean(Var a, std::size_t axis) { return reduce(a, axis, ReduceKind::mean); }

/// Sum of every element, as a scalar.
inline Var sum_all(Var a) { return sum(reshape(a, {a.size()}), 0); }

// ---------------------------------------------------------------------------
// Concatenation, gathering, log-sum-exp
// ---------------------------------------------------------------------------

inline Var concat(Var a, Var b, std::size_t axis) {
  Graph& g = detail::same_graph(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sa.size() == sb.size() && axis < sa.size();
  for (std::size_t d = 0; ok && d < sa.size(); ++d) {
    ok = d == axis || sa[d] == sb[d];
  }
  if (!ok) {
    throw ShapeError("cannot concat " + to_string(sa) + " and " + to_string(sb) +
                     " on axis " + std::to_string(axis));
  }
  const auto pa = detail::split_at(sa, axis);
  const auto pb = detail::split_at(sb, axis);
  Shape out_shape = sa;
  out_shape[axis] += sb[axis];
  Tensor y(out_shape);
  const std::size_t ca = pa.extent * pa.inner;
  const std::size_t cb = pb.extent * pb.inner;
  auto xs = a.value().data();
  auto zs = b.value().data();
  auto ys = y.data();
  for (std::size_t o = 0; o < pa.outer; ++o) {
    std::copy_n(xs.data() + o * ca, ca, ys.data() + o * (ca + cb));
    std::copy_n(zs.data() + o * cb, cb, ys.data() + o * (ca + cb) + ca);
  }
  const NodeId na = a.id();
  const NodeId nb = b.id();
  const std::size_t outer = pa.outer;
  return g.record(OpKind::concat, {na, nb}, std::move(y),
                  [na, nb, outer, ca, cb](Graph& gr, NodeId self) {
                    auto gy = gr.output_grad(self);
                    auto da = gr.grad_target(na);
                    auto db = gr.grad_target(nb);
                    for (std::size_t o = 0; o < outer; ++o) {
                      const double* src = gy.data() + o * (ca + cb);
                      if (!da.empty()) {
                        for (std::size_t i = 0; i < ca; ++i) da[o * ca + i] += src[i];
                      }
                      if (!db.empty()) {
                        for (std::size_t i = 0; i < cb; ++i) db[o * cb + i] += src[ca + i];
                      }
                    }
                  });
}

/// Row gather from a matrix: out[r] = a[indices[r]].
inline Var gather_rows(Var a, std::vector<std::size_t> indices) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ShapeError("gather_rows needs a matrix");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if (indices.empty()) throw ShapeError("gather_rows with no indices");
  for (std::size_t idx : indices) {
    if (idx >= rows) throw ShapeError("gather_rows index out of range");
  }
  Tensor y({indices.size(), cols});
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(xs.data() + indices[r] * cols, cols, ys.data() + r * cols);
  }
  const NodeId in = a.id();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return g.record(OpKind::gather_rows, {in}, std::move(y), [in, idx, cols](Graph& gr, NodeId self) {
    auto dx = gr.grad_target(in);
    if (dx.empty()) return;
    auto gy = gr.output_grad(self);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = dx.data() + (*idx)[r] * cols;
      const double* src = gy.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

/// Row-wise log(sum(exp(.))) of a matrix over the entries where `mask` is
/// non-zero (all entries when the mask is empty). Evaluated as
/// m + log1p(sum over the other entries of exp(x - m)) with m the row maximum.
inline Var log_sum_exp(Var a, std::vector<std::uint8_t> mask = {}) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ShapeError("log_sum_exp needs a matrix");
  if (!mask.empty() && mask.size() != x.size()) {
    throw ShapeError("log_sum_exp mask size mismatch");
  }
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  auto keep = [&mask](std::size_t i) { return mask.empty() || mask[i] != 0; };
  Tensor y({rows});
  auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    std::size_t kept = 0, at = cols;
    bool nan = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!keep(r * cols + c)) continue;
      ++kept;
      nan = nan || std::isnan(xs[r * cols + c]);
      if (at == cols || xs[r * cols + c] > m) {
        m = xs[r * cols + c];
        at = c;
      }
    }
    if (kept == 0) throw DomainError("log_sum_exp over an empty row");
    if (nan || m == -std::numeric_limits<double>::infinity()) {
      y[r] = nan ? std::numeric_limits<double>::quiet_NaN() : m;
      continue;
    }
    // the max term contributes exactly 1; log1p keeps small results accurate
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (c != at && keep(r * cols + c)) s += std::exp(xs[r * cols + c] - m);
    }
    y[r] = m + std::log1p(s);
  }
  const NodeId in = a.id();
  auto shared_mask = std::make_shared<std::vector<std::uint8_t>>(std::move(mask));
  return g.record(OpKind::log_sum_exp, {in}, std::move(y),
                  [in, rows, cols, shared_mask](Graph& gr, NodeId self) {
                    auto dx = gr.grad_target(in);
                    if (dx.empty()) return;
                    auto gy = gr.output_grad(self);
                    auto xv = gr.value(in).data();
                    auto yv = gr.value(self).data();
                    const auto& mk = *shared_mask;
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        if (!mk.empty() && mk[i] == 0) continue;
                        dx[i] += gy[r] * std::exp(xv[i] - yv[r]);
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// 2D cross-correlation via im2col
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_c, h, w, out_c, kh, kw, stride, oh, ow;
  std::size_t patch() const { return in_c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// cols is patch() x positions(), row index = (c, ki, kj).
inline void im2col(const ConvGeometry& geo, const double* image, double* cols) {
  const std::size_t positions = geo.positions();
  for (std::size_t c = 0; c < geo.in_c; ++c) {
    for (std::size_t ki = 0; ki < geo.kh; ++ki) {
      for (std::size_t kj = 0; kj < geo.kw; ++kj) {
        double* row = cols + ((c * geo.kh + ki) * geo.kw + kj) * positions;
        for (std::size_t oy = 0; oy < geo.oh; ++oy) {
          const double* src = image + (c * geo.h + oy * geo.stride + ki) * geo.w + kj;
          for (std::size_t ox = 0; ox < geo.ow; ++ox) {
            row[oy * geo.ow + ox] = src[ox * geo.stride];
          }
        }
      }
    }
  }
}

inline void col2im_add(const ConvGeometry& geo, const double* cols, double* image) {
  const std::size_t positions = geo.positions();
  for (std::size_t c = 0; c < geo.in_c; ++c) {
    for (std::size_t ki = 0; ki < geo.kh; ++ki) {
      for (std::size_t kj = 0; kj < geo.kw; ++kj) {
        const double* row = cols + ((c * geo.kh + ki) * geo.kw + kj) * positions;
        for (std::size_t oy = 0; oy < geo.oh; ++oy) {
          double* dst = image + (c * geo.h + oy * geo.stride + ki) * geo.w + kj;
          for (std::size_t ox = 0; ox < geo.ow; ++ox) {
            dst[ox * geo.stride] += row[oy * geo.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation (no kernel flip). `input` is C x H x W or B x C x H x W,
/// `kernels` is C_out x C x kh x kw. Output extents are floor((H-kh)/stride)+1
/// and likewise for W.
inline Var conv2d(Var input, Var kernels, std::size_t stride = 1) {
  Graph& g = detail::same_graph(input, kernels);
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const bool batched = x.rank() == 4;
  if ((x.rank() != 3 && x.rank() != 4) || k.rank() != 4 || stride == 0) {
    throw ShapeError("conv2d needs [B x] C x H x W input and 4-d kernels");
  }
  detail::ConvGeometry geo{};
  geo.batch = batched ? x.extent(0) : 1;
  geo.in_c = x.extent(batched ? 1 : 0);
  geo.h = x.extent(batched ? 2 : 1);
  geo.w = x.extent(batched ? 3 : 2);
  geo.out_c = k.extent(0);
  geo.kh = k.extent(2);
  geo.kw = k.extent(3);
  geo.stride = stride;
  if (k.extent(1) != geo.in_c || geo.kh > geo.h || geo.kw > geo.w) {
    throw ShapeError("conv2d kernel " + to_string(k.shape()) +
                     " incompatible with input " + to_string(x.shape()));
  }
  geo.oh = (geo.h - geo.kh) / stride + 1;
  geo.ow = (geo.w - geo.kw) / stride + 1;

  Shape out_shape = batched ? Shape{geo.batch, geo.out_c, geo.oh, geo.ow}
                            : Shape{geo.out_c, geo.oh, geo.ow};
  Tensor y(out_shape);
  const std::size_t in_size = geo.in_c * geo.h * geo.w;
  const std::size_t out_size = geo.out_c * geo.positions();
  std::vector<double> cols(geo.patch() * geo.positions());
  for (std::size_t b = 0; b < geo.batch; ++b) {
    detail::im2col(geo, x.data().data() + b * in_size, cols.data());
    kernels::gemm_nn(geo.out_c, geo.positions(), geo.patch(), k.data().data(),
                     cols.data(), y.data().data() + b * out_size);
  }
  const NodeId ni = input.id();
  const NodeId nk = kernels.id();
  return g.record(OpKind::conv2d, {ni, nk}, std::move(y),
                  [ni, nk, geo, in_size, out_size](Graph& gr, NodeId self) {
                    auto gy = gr.output_grad(self);
                    auto dx = gr.grad_target(ni);
                    auto dk = gr.grad_target(nk);
                    const double* xv = gr.value(ni).data().data();
                    const double* kv = gr.value(nk).data().data();
                    std::vector<double> cols(geo.patch() * geo.positions());
                    for (std::size_t b = 0; b < geo.batch; ++b) {
                      const double* gb = gy.data() + b * out_size;
                      if (!dk.empty()) {
                        detail::im2col(geo, xv + b * in_size, cols.data());
                        // dK += dY * cols^T
                        kernels::gemm_nt(geo.out_c, geo.patch(), geo.positions(), gb,
                                         cols.data(), dk.data(), true);
                      }
                      if (!dx.empty()) {
                        // dcols = K^T * dY
                        kernels::gemm_tn(geo.patch(), geo.positions(), geo.out_c, kv, gb,
                                         cols.data(), false);
                        detail::col2im_add(geo, cols.data(), dx.data() + b * in_size);
                      }
                    }
                  });
}

}  // namespace crosspoint
