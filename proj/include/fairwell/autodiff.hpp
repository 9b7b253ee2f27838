// autodiff.hpp - recorded-graph reverse-mode automatic differentiation
//
// A Graph is built symbolically (shapes are inferred and checked at build
// time), evaluated with forward(bindings), and differentiated with
// backward(seed). The primitive set is deliberately small: matmul, add,
// subtract, multiply, mean, sum, relu, square, sqrt(x+eps), max(c, x) and
// broadcast. That is enough to express MLP encoders and every loss term
// in this library while keeping each adjoint rule easy to audit.
//
// Evaluation is plain double arithmetic in recording order, so identical
// inputs produce bit-identical outputs. Every node's output is scanned for
// NaN/Inf; detection fires on the first offending node.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fairwell/common.hpp"
#include "fairwell/tensor.hpp"

namespace fairwell::ad {

using NodeId = size_t;

enum class OpKind : uint8_t {
  Input,
  Constant,
  MatMul,
  Add,
  Subtract,
  Multiply,
  Mean,
  Sum,
  Relu,
  Square,
  SqrtEps,
  MaxConst,
  Broadcast,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Subtract: return "subtract";
    case OpKind::Multiply: return "multiply";
    case OpKind::Mean: return "mean";
    case OpKind::Sum: return "sum";
    case OpKind::Relu: return "relu";
    case OpKind::Square: return "square";
    case OpKind::SqrtEps: return "sqrt_eps";
    case OpKind::MaxConst: return "max_const";
    case OpKind::Broadcast: return "broadcast";
  }
  return "?";
}

// Reduction axis: All collapses to a scalar; Rows reduces over the row index
// of a matrix (result has one entry per column); Cols reduces over columns.
enum class Axis : int8_t { All = -1, Rows = 0, Cols = 1 };

struct Node {
  OpKind op;
  std::array<NodeId, 2> parents{0, 0};
  uint8_t n_parents = 0;
  std::vector<size_t> shape;

  // op attributes
  Axis axis = Axis::All;          // Mean, Sum
  double scalar_attr = 0.0;       // eps for SqrtEps, c for MaxConst
  bool trans_a = false, trans_b = false;  // MatMul
  std::string name;               // Input
  bool requires_grad = false;     // Input
  Tensor payload;                 // Constant

  // runtime
  Tensor value;
  bool evaluated = false;
  bool needs_grad = false;
};

struct FiniteDifferenceReport {
  struct Entry {
    std::string input;
    double max_rel_error = 0.0;
    size_t checked = 0;
    size_t skipped_kinks = 0;  // coordinates excluded because a hinge changed branch
  };
  std::vector<Entry> entries;
  double max_rel_error = 0.0;
  size_t total_checked = 0;
  size_t total_skipped = 0;
  double tolerance = 0.0;
  bool pass = false;
};

class Graph {
 public:
  // ---- construction -------------------------------------------------------

  NodeId input(std::string name, std::vector<size_t> shape, bool requires_grad = true) {
    if (inputs_.count(name))
      throw StateError("duplicate input name '" + name + "'");
    Node n;
    n.op = OpKind::Input;
    n.shape = std::move(shape);
    n.name = name;
    n.requires_grad = requires_grad;
    NodeId id = push(std::move(n));
    inputs_.emplace(std::move(name), id);
    return id;
  }

  NodeId constant(Tensor t) {
    Node n;
    n.op = OpKind::Constant;
    n.shape = t.shape();
    n.payload = std::move(t);
    return push(std::move(n));
  }

  NodeId scalar(double v) { return constant(Tensor::scalar(v)); }

  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false) {
    const auto& sa = node_shape(a);
    const auto& sb = node_shape(b);
    if (sa.size() != 2 || sb.size() != 2)
      throw ShapeError(std::string("matmul requires rank-2 operands, got ") +
                       shape_to_string(sa) + " x " + shape_to_string(sb));
    size_t m = trans_a ? sa[1] : sa[0];
    size_t k1 = trans_a ? sa[0] : sa[1];
    size_t k2 = trans_b ? sb[1] : sb[0];
    size_t p = trans_b ? sb[0] : sb[1];
    if (k1 != k2)
      throw ShapeError("matmul inner dimensions differ: " + shape_to_string(sa) +
                       (trans_a ? "^T" : "") + " x " + shape_to_string(sb) +
                       (trans_b ? "^T" : ""));
    Node n;
    n.op = OpKind::MatMul;
    n.parents = {a, b};
    n.n_parents = 2;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    n.shape = {m, p};
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) { return elementwise2(OpKind::Add, a, b); }
  NodeId subtract(NodeId a, NodeId b) { return elementwise2(OpKind::Subtract, a, b); }
  NodeId multiply(NodeId a, NodeId b) { return elementwise2(OpKind::Multiply, a, b); }

  NodeId mean(NodeId a, Axis axis = Axis::All) { return reduction(OpKind::Mean, a, axis); }
  NodeId sum(NodeId a, Axis axis = Axis::All) { return reduction(OpKind::Sum, a, axis); }

  NodeId relu(NodeId a) { return elementwise1(OpKind::Relu, a, 0.0); }
  NodeId square(NodeId a) { return elementwise1(OpKind::Square, a, 0.0); }

  // sqrt(x + eps); eps > 0 keeps the gradient finite at x == 0.
  NodeId sqrt_eps(NodeId a, double eps) {
    if (!(eps > 0.0)) throw ConfigError("sqrt_eps requires eps > 0");
    return elementwise1(OpKind::SqrtEps, a, eps);
  }

  // max(c, x) elementwise; subgradient 0 at the kink.
  NodeId max_const(NodeId a, double c) { return elementwise1(OpKind::MaxConst, a, c); }

  // scalar -> any shape, or vector {c} -> matrix {r, c} by row replication.
  NodeId broadcast(NodeId a, std::vector<size_t> target) {
    const auto& sa = node_shape(a);
    bool ok = sa.empty() ||
              (sa.size() == 1 && target.size() == 2 && target[1] == sa[0]);
    if (!ok)
      throw ShapeError("broadcast supports scalar->any or vector->matrix rows, got " +
                       shape_to_string(sa) + " -> " + shape_to_string(target));
    Node n;
    n.op = OpKind::Broadcast;
    n.parents = {a, 0};
    n.n_parents = 1;
    n.shape = std::move(target);
    return push(std::move(n));
  }

  void set_output(NodeId id) {
    check_id(id);
    output_ = id;
  }

  NodeId output() const {
    if (!output_) {
      if (nodes_.empty()) throw StateError("empty graph has no output");
      return nodes_.size() - 1;
    }
    return *output_;
  }

  size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[id]; }
  const std::unordered_map<std::string, NodeId>& inputs() const { return inputs_; }

  // ---- evaluation ----------------------------------------------------------

  // Binds every named input, evaluates all nodes in recording order and
  // returns the output value. Intermediates are retained for backward().
  Tensor forward(const std::map<std::string, Tensor>& bindings) {
    for (const auto& [name, id] : inputs_) {
      auto it = bindings.find(name);
      if (it == bindings.end())
        throw StateError("forward: input '" + name + "' not bound");
      if (it->second.shape() != nodes_[id].shape)
        throw ShapeError("forward: input '" + name + "' expects shape " +
                         shape_to_string(nodes_[id].shape) + ", got " +
                         shape_to_string(it->second.shape()));
    }
    for (size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      try {
        n.value = eval(n, bindings);
      } catch (const NumericError& e) {
        // the tensor constructor validates finiteness; attribute it here
        throw NumericError("non-finite value produced by node #" + std::to_string(id) +
                           " (" + op_name(n.op) + "): " + e.what());
      }
      n.evaluated = true;
      size_t bad = n.value.first_nonfinite();
      if (bad != static_cast<size_t>(-1))
        throw NumericError("non-finite value produced by node #" + std::to_string(id) +
                           " (" + op_name(n.op) + ") at flat index " + std::to_string(bad));
    }
    forwarded_ = true;
    return nodes_[output()].value;
  }

  const Tensor& value(NodeId id) const {
    check_id(id);
    if (!nodes_[id].evaluated)
      throw StateError("value requested before forward for node #" + std::to_string(id));
    return nodes_[id].value;
  }

  // Gradient of the (scalar-seeded) output w.r.t. every requires_grad input.
  // Accumulation runs in reverse recording order, which is a reverse
  // topological order by construction.
  std::map<std::string, Tensor> backward(const Tensor& seed) {
    if (!forwarded_) throw StateError("backward called before forward");
    NodeId out = output();
    if (seed.shape() != nodes_[out].shape)
      throw ShapeError("backward seed shape " + shape_to_string(seed.shape()) +
                       " does not match output shape " + shape_to_string(nodes_[out].shape));

    mark_needs_grad();

    std::vector<Tensor> adj(nodes_.size());
    std::vector<bool> has_adj(nodes_.size(), false);
    adj[out] = seed;
    has_adj[out] = true;

    for (size_t idx = out + 1; idx-- > 0;) {
      if (!has_adj[idx] || !nodes_[idx].needs_grad) continue;
      propagate(idx, adj[idx], adj, has_adj);
    }

    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : inputs_) {
      if (!nodes_[id].requires_grad) continue;
      grads.emplace(name, has_adj[id] ? adj[id] : Tensor::zeros(nodes_[id].shape));
    }
    return grads;
  }

  // Seed 1 for a scalar output.
  std::map<std::string, Tensor> backward() {
    NodeId out = output();
    if (Tensor::numel_of(nodes_[out].shape) != 1)
      throw ShapeError("seedless backward requires a scalar output, shape is " +
                       shape_to_string(nodes_[out].shape));
    return backward(Tensor(nodes_[out].shape, {1.0}));
  }

  // Activation pattern of every hinge (relu / max_const) element. Two
  // evaluations with different signatures straddle a kink.
  std::vector<uint8_t> hinge_signature() const {
    std::vector<uint8_t> sig;
    for (const auto& n : nodes_) {
      if (n.op != OpKind::Relu && n.op != OpKind::MaxConst) continue;
      if (!n.evaluated) throw StateError("hinge_signature before forward");
      double c = (n.op == OpKind::Relu) ? 0.0 : n.scalar_attr;
      const Tensor& x = nodes_[n.parents[0]].value;
      for (double v : x.data()) sig.push_back(v > c ? 1 : 0);
    }
    return sig;
  }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    return nodes_.size() - 1;
  }

  void check_id(NodeId id) const {
    if (id >= nodes_.size())
      throw StateError("node id " + std::to_string(id) + " out of range");
  }

  const std::vector<size_t>& node_shape(NodeId id) const {
    check_id(id);
    return nodes_[id].shape;
  }

  NodeId elementwise2(OpKind op, NodeId a, NodeId b) {
    const auto& sa = node_shape(a);
    const auto& sb = node_shape(b);
    if (sa != sb)
      throw ShapeError(std::string(op_name(op)) + " requires equal shapes, got " +
                       shape_to_string(sa) + " vs " + shape_to_string(sb));
    Node n;
    n.op = op;
    n.parents = {a, b};
    n.n_parents = 2;
    n.shape = sa;
    return push(std::move(n));
  }

  NodeId elementwise1(OpKind op, NodeId a, double attr) {
    Node n;
    n.op = op;
    n.parents = {a, 0};
    n.n_parents = 1;
    n.shape = node_shape(a);
    n.scalar_attr = attr;
    return push(std::move(n));
  }

  NodeId reduction(OpKind op, NodeId a, Axis axis) {
    const auto& sa = node_shape(a);
    std::vector<size_t> out;
    if (axis == Axis::All) {
      out = {};
    } else if (sa.size() == 2) {
      out = {axis == Axis::Rows ? sa[1] : sa[0]};
    } else {
      throw ShapeError(std::string(op_name(op)) + " over an axis requires a matrix, got " +
                       shape_to_string(sa));
    }
    Node n;
    n.op = op;
    n.parents = {a, 0};
    n.n_parents = 1;
    n.axis = axis;
    n.shape = std::move(out);
    return push(std::move(n));
  }

  // ---- forward kernels -----------------------------------------------------

  Tensor eval(const Node& n, const std::map<std::string, Tensor>& bindings) const {
    switch (n.op) {
      case OpKind::Input: {
        return bindings.at(n.name);
      }
      case OpKind::Constant:
        return n.payload;
      case OpKind::MatMul: {
        const Tensor& a = nodes_[n.parents[0]].value;
        const Tensor& b = nodes_[n.parents[1]].value;
        return matmul_eval(a, b, n.trans_a, n.trans_b);
      }
      case OpKind::Add:
      case OpKind::Subtract:
      case OpKind::Multiply: {
        const Tensor& a = nodes_[n.parents[0]].value;
        const Tensor& b = nodes_[n.parents[1]].value;
        std::vector<double> out(a.numel());
        const auto& da = a.data();
        const auto& db = b.data();
        for (size_t i = 0; i < out.size(); ++i) {
          out[i] = n.op == OpKind::Add        ? da[i] + db[i]
                   : n.op == OpKind::Subtract ? da[i] - db[i]
                                              : da[i] * db[i];
        }
        return Tensor(n.shape, std::move(out));
      }
      case OpKind::Mean:
      case OpKind::Sum:
        return reduce_eval(nodes_[n.parents[0]].value, n.axis, n.op == OpKind::Mean);
      case OpKind::Relu:
      case OpKind::MaxConst: {
        double c = (n.op == OpKind::Relu) ? 0.0 : n.scalar_attr;
        const Tensor& a = nodes_[n.parents[0]].value;
        std::vector<double> out(a.numel());
        for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] > c ? a[i] : c;
        return Tensor(n.shape, std::move(out));
      }
      case OpKind::Square: {
        const Tensor& a = nodes_[n.parents[0]].value;
        std::vector<double> out(a.numel());
        for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
        return Tensor(n.shape, std::move(out));
      }
      case OpKind::SqrtEps: {
        const Tensor& a = nodes_[n.parents[0]].value;
        std::vector<double> out(a.numel());
        for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a[i] + n.scalar_attr);
        return Tensor(n.shape, std::move(out));
      }
      case OpKind::Broadcast: {
        const Tensor& a = nodes_[n.parents[0]].value;
        std::vector<double> out(Tensor::numel_of(n.shape));
        if (a.rank() == 0) {
          for (auto& v : out) v = a[0];
        } else {
          size_t rows = n.shape[0], cols = n.shape[1];
          for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) out[r * cols + c] = a[c];
        }
        return Tensor(n.shape, std::move(out));
      }
    }
    throw StateError("unreachable op");
  }

  static Tensor matmul_eval(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    size_t m = ta ? a.shape()[1] : a.shape()[0];
    size_t k = ta ? a.shape()[0] : a.shape()[1];
    size_t p = tb ? b.shape()[0] : b.shape()[1];
    std::vector<double> out(m * p, 0.0);
    auto A = [&](size_t i, size_t j) { return ta ? a.at(j, i) : a.at(i, j); };
    auto B = [&](size_t i, size_t j) { return tb ? b.at(j, i) : b.at(i, j); };
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < p; ++j) {
        double acc = 0.0;
        for (size_t l = 0; l < k; ++l) acc += A(i, l) * B(l, j);
        out[i * p + j] = acc;
      }
    return Tensor({m, p}, std::move(out));
  }

  static Tensor reduce_eval(const Tensor& a, Axis axis, bool mean) {
    if (axis == Axis::All) {
      double acc = 0.0;
      for (double v : a.data()) acc += v;
      if (mean) acc /= static_cast<double>(a.numel());
      return Tensor({}, {acc});
    }
    size_t rows = a.shape()[0], cols = a.shape()[1];
    if (axis == Axis::Rows) {
      std::vector<double> out(cols, 0.0);
      for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c) out[c] += a.at(r, c);
      if (mean)
        for (auto& v : out) v /= static_cast<double>(rows);
      return Tensor({cols}, std::move(out));
    }
    std::vector<double> out(rows, 0.0);
    for (size_t r = 0; r < rows; ++r)
      for (size_t c = 0; c < cols; ++c) out[r] += a.at(r, c);
    if (mean)
      for (auto& v : out) v /= static_cast<double>(cols);
    return Tensor({rows}, std::move(out));
  }

  // ---- adjoint rules -------------------------------------------------------

  void mark_needs_grad() {
    for (auto& n : nodes_) {
      if (n.op == OpKind::Input) {
        n.needs_grad = n.requires_grad;
      } else {
        n.needs_grad = false;
        for (uint8_t i = 0; i < n.n_parents; ++i)
          n.needs_grad = n.needs_grad || nodes_[n.parents[i]].needs_grad;
      }
    }
  }

  void accumulate(NodeId id, Tensor g, std::vector<Tensor>& adj, std::vector<bool>& has) const {
    if (!nodes_[id].needs_grad) return;
    if (!has[id]) {
      adj[id] = std::move(g);
      has[id] = true;
      return;
    }
    auto& dst = adj[id].data();
    const auto& src = g.data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void propagate(NodeId id, const Tensor& gout, std::vector<Tensor>& adj,
                 std::vector<bool>& has) {
    const Node& n = nodes_[id];
    switch (n.op) {
      case OpKind::Input:
      case OpKind::Constant:
        return;
      case OpKind::MatMul: {
        const Tensor& a = nodes_[n.parents[0]].value;
        const Tensor& b = nodes_[n.parents[1]].value;
        // C = A' B' with A' = op(A); gA' = G B'^T, gB' = A'^T G.
        if (nodes_[n.parents[0]].needs_grad) {
          Tensor ga = n.trans_b ? matmul_eval(gout, b, false, false)
                                : matmul_eval(gout, b, false, true);
          if (n.trans_a) ga = transpose(ga);
          accumulate(n.parents[0], std::move(ga), adj, has);
        }
        if (nodes_[n.parents[1]].needs_grad) {
          Tensor gb = n.trans_a ? matmul_eval(a, gout, false, false)
                                : matmul_eval(a, gout, true, false);
          if (n.trans_b) gb = transpose(gb);
          accumulate(n.parents[1], std::move(gb), adj, has);
        }
        return;
      }
      case OpKind::Add:
        accumulate(n.parents[0], gout, adj, has);
        accumulate(n.parents[1], gout, adj, has);
        return;
      case OpKind::Subtract: {
        accumulate(n.parents[0], gout, adj, has);
        Tensor neg = gout;
        for (auto& v : neg.data()) v = -v;
        accumulate(n.parents[1], std::move(neg), adj, has);
        return;
      }
      case OpKind::Multiply: {
        const Tensor& a = nodes_[n.parents[0]].value;
        const Tensor& b = nodes_[n.parents[1]].value;
        if (nodes_[n.parents[0]].needs_grad) {
          Tensor g = gout;
          for (size_t i = 0; i < g.numel(); ++i) g[i] *= b[i];
          accumulate(n.parents[0], std::move(g), adj, has);
        }
        if (nodes_[n.parents[1]].needs_grad) {
          Tensor g = gout;
          for (size_t i = 0; i < g.numel(); ++i) g[i] *= a[i];
          accumulate(n.parents[1], std::move(g), adj, has);
        }
        return;
      }
      case OpKind::Mean:
      case OpKind::Sum: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor g = Tensor::zeros(a.shape());
        if (n.axis == Axis::All) {
          double s = gout[0];
          if (n.op == OpKind::Mean) s /= static_cast<double>(a.numel());
          for (auto& v : g.data()) v = s;
        } else {
          size_t rows = a.shape()[0], cols = a.shape()[1];
          if (n.axis == Axis::Rows) {
            double d = n.op == OpKind::Mean ? static_cast<double>(rows) : 1.0;
            for (size_t r = 0; r < rows; ++r)
              for (size_t c = 0; c < cols; ++c) g.at(r, c) = gout[c] / d;
          } else {
            double d = n.op == OpKind::Mean ? static_cast<double>(cols) : 1.0;
            for (size_t r = 0; r < rows; ++r)
              for (size_t c = 0; c < cols; ++c) g.at(r, c) = gout[r] / d;
          }
        }
        accumulate(n.parents[0], std::move(g), adj, has);
        return;
      }
      case OpKind::Relu:
      case OpKind::MaxConst: {
        double c = (n.op == OpKind::Relu) ? 0.0 : n.scalar_attr;
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor g = gout;
        for (size_t i = 0; i < g.numel(); ++i) g[i] = a[i] > c ? g[i] : 0.0;
        accumulate(n.parents[0], std::move(g), adj, has);
        return;
      }
      case OpKind::Square: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor g = gout;
        for (size_t i = 0; i < g.numel(); ++i) g[i] *= 2.0 * a[i];
        accumulate(n.parents[0], std::move(g), adj, has);
        return;
      }
      case OpKind::SqrtEps: {
        const Tensor& a = nodes_[n.parents[0]].value;
        Tensor g = gout;
        for (size_t i = 0; i < g.numel(); ++i)
          g[i] *= 0.5 / std::sqrt(a[i] + n.scalar_attr);
        accumulate(n.parents[0], std::move(g), adj, has);
        return;
      }
      case OpKind::Broadcast: {
        const Tensor& a = nodes_[n.parents[0]].value;
        if (a.rank() == 0) {
          double s = 0.0;
          for (double v : gout.data()) s += v;
          accumulate(n.parents[0], Tensor::scalar(s), adj, has);
        } else {
          size_t rows = n.shape[0], cols = n.shape[1];
          Tensor g = Tensor::zeros({cols});
          for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) g[c] += gout[r * cols + c];
          accumulate(n.parents[0], std::move(g), adj, has);
        }
        return;
      }
    }
  }

  static Tensor transpose(const Tensor& t) {
    size_t r = t.shape()[0], c = t.shape()[1];
    std::vector<double> out(r * c);
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < c; ++j) out[j * r + i] = t.at(i, j);
    return Tensor({c, r}, std::move(out));
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> inputs_;
  std::optional<NodeId> output_;
  bool forwarded_ = false;
};

// ---------------------------------------------------------------------------
// Central finite-difference gradient check
// ---------------------------------------------------------------------------
//
// Relative error uses |a - n| / max(|a|, |n|, 1e-8). Coordinates whose +-h
// probes land on different sides of a hinge kink are excluded from the
// comparison and counted in skipped_kinks.
inline FiniteDifferenceReport finite_difference_check(
    Graph& g, const std::map<std::string, Tensor>& inputs, double step, double tolerance) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_check requires step > 0");
  NodeId out = g.output();
  if (Tensor::numel_of(g.node(out).shape) != 1)
    throw ShapeError("finite_difference_check requires a scalar output, shape is " +
                     shape_to_string(g.node(out).shape));

  g.forward(inputs);
  auto analytic = g.backward();

  FiniteDifferenceReport report;
  report.tolerance = tolerance;

  for (const auto& [name, grad] : analytic) {
    FiniteDifferenceReport::Entry entry;
    entry.input = name;
    std::map<std::string, Tensor> probe = inputs;
    Tensor& t = probe.at(name);
    for (size_t i = 0; i < t.numel(); ++i) {
      double saved = t[i];
      t[i] = saved + step;
      double fp = g.forward(probe).item();
      auto sig_p = g.hinge_signature();
      t[i] = saved - step;
      double fm = g.forward(probe).item();
      auto sig_m = g.hinge_signature();
      t[i] = saved;
      if (sig_p != sig_m) {
        ++entry.skipped_kinks;
        continue;
      }
      double numeric = (fp - fm) / (2.0 * step);
      double a = grad[i];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      double rel = std::fabs(a - numeric) / denom;
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.total_checked += entry.checked;
    report.total_skipped += entry.skipped_kinks;
    report.entries.push_back(std::move(entry));
  }
  // restore cached values at the base point
  g.forward(inputs);
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace fairwell::ad
