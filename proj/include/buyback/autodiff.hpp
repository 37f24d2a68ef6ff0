#pragma once

// Reverse-mode automatic differentiation over dense 2-D arrays.
//
// A Tape records every primitive in evaluation order (operands always precede
// the node that uses them), computing forward values eagerly. Values are
// row-major arrays; binary elementwise primitives broadcast any dimension of
// extent 1, which is how a batch of trajectories (an I x 1 column) is combined
// with per-network parameters (1 x 1 scalars, 1 x H bias rows).
//
// Kinks (max/min/relu/clipped-logistic saturation) use the one-sided derivative
// of the interior branch; exactly at a kink the clipped branch contributes 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "buyback/errors.hpp"
#include "buyback/tensor.hpp"

namespace buyback {

inline constexpr double kLn3 = 1.0986122886681098;

/// S(x) = min(max(2/(1+e^-x) - 1/2, 0), 1); saturates exactly outside [-ln 3, ln 3].
inline double clipped_logistic(double x) {
  if (x >= kLn3) return 1.0;
  if (x <= -kLn3) return 0.0;
  const double y = 2.0 / (1.0 + std::exp(-x)) - 0.5;
  return std::min(std::max(y, 0.0), 1.0);
}

inline double clipped_logistic_derivative(double x) {
  if (x >= kLn3 || x <= -kLn3) return 0.0;
  const double e = std::exp(-x);
  return 2.0 * e / ((1.0 + e) * (1.0 + e));
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double square(double x) { return x * x; }
inline double abs_pow(double x, double p) { return std::pow(std::abs(x), p); }
// Ties resolve to the second operand, matching the Var overloads.
inline double max(double a, double b) { return a > b ? a : b; }
inline double min(double a, double b) { return a < b ? a : b; }
/// 1 if x < threshold else 0. Carries no derivative.
inline double indicator_below(double x, double threshold) { return x < threshold ? 1.0 : 0.0; }

namespace ad {

enum class Op : std::uint8_t {
  Input,
  Add,
  Sub,
  Mul,
  Div,
  Max,
  Min,
  AddC,
  MulC,
  SubFromC,
  DivIntoC,
  MaxC,
  MinC,
  Neg,
  Exp,
  Log,
  AbsPow,
  Square,
  Relu,
  ClippedLogistic,
  MatMulNT,
  HStack,
  Sum,
  Mean,
};

struct Node {
  Op op = Op::Input;
  int a = -1;
  int b = -1;
  double c = 0.0;
  std::vector<int> args;
  Shape shape;
  std::vector<double> value;
  bool needs_grad = false;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  Tape& tape() const { return *tape_; }
  Tape* tape_ptr() const { return tape_; }
  int id() const { return id_; }

  inline const Shape& shape() const;
  inline std::span<const double> value() const;
  inline double item() const;
  inline Tensor tensor() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Adjoints of every node with respect to one scalar root.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::vector<double>> adj) : adj_(std::move(adj)) {}

  /// Adjoint of `v`. Always populated for leaves; empty for intermediates the root does not reach.
  std::span<const double> of(Var v) const { return adj_.at(static_cast<std::size_t>(v.id())); }
  Tensor tensor(Var v) const {
    const auto g = of(v);
    if (g.empty()) return Tensor(v.shape().rows, v.shape().cols);
    return Tensor(v.shape(), std::vector<double>(g.begin(), g.end()));
  }

 private:
  std::vector<std::vector<double>> adj_;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf: backward() reports its gradient.
  Var variable(const Tensor& t) { return input(t, true); }
  Var constant(const Tensor& t) { return input(t, false); }
  Var constant(Shape s, double fill) { return constant(Tensor(s.rows, s.cols, fill)); }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }
  Var column(std::span<const double> values) {
    return constant(Tensor({values.size(), 1}, std::vector<double>(values.begin(), values.end())));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  /// Record kink proximity and branch choices; used by finite-difference checks.
  void track_kinks(bool on) { track_kinks_ = on; }
  double kink_margin() const { return kink_margin_; }
  std::uint64_t branch_signature() const { return branch_signature_; }

  void note_kink(double distance, bool branch) {
    if (!track_kinks_) return;
    kink_margin_ = std::min(kink_margin_, std::abs(distance));
    branch_signature_ = (branch_signature_ ^ (branch ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c159e3779b9ULL)) *
                        0x100000001b3ULL;
  }

  Var record(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  inline Gradients backward(Var root, double seed = 1.0) const;

 private:
  Var input(const Tensor& t, bool trainable) {
    Node n;
    n.op = Op::Input;
    n.shape = t.shape;
    n.value = t.data;
    n.needs_grad = trainable;
    return record(std::move(n));
  }

  std::vector<Node> nodes_;
  bool track_kinks_ = false;
  double kink_margin_ = std::numeric_limits<double>::infinity();
  std::uint64_t branch_signature_ = 0xcbf29ce484222325ULL;
};

inline const Shape& Var::shape() const { return tape_->node(id_).shape; }
inline std::span<const double> Var::value() const { return tape_->node(id_).value; }
inline double Var::item() const {
  if (shape().size() != 1) throw ShapeError("item() on a non-scalar node");
  return value()[0];
}
inline Tensor Var::tensor() const {
  const auto v = value();
  return Tensor(shape(), std::vector<double>(v.begin(), v.end()));
}

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape_ptr() != b.tape_ptr())
    throw ContractError("operands recorded on different tapes");
  return a.tape();
}

inline std::size_t broadcast_extent(std::size_t x, std::size_t y) {
  if (x == y || y == 1) return x;
  if (x == 1) return y;
  throw ShapeError("incompatible shapes for broadcast: " + std::to_string(x) + " vs " + std::to_string(y));
}

inline Shape broadcast_shape(Shape a, Shape b) {
  return {broadcast_extent(a.rows, b.rows), broadcast_extent(a.cols, b.cols)};
}

// Flat index into an operand of shape `s` for output element (r, c).
inline std::size_t bidx(Shape s, std::size_t r, std::size_t c) {
  return (s.rows == 1 ? 0 : r) * s.cols + (s.cols == 1 ? 0 : c);
}

template <class F>
Var binary(Op op, Var a, Var b, F f) {
  Tape& t = same_tape(a, b);
  const Node& na = t.node(a.id());
  const Node& nb = t.node(b.id());
  Node n;
  n.op = op;
  n.a = a.id();
  n.b = b.id();
  n.shape = broadcast_shape(na.shape, nb.shape);
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.value.resize(n.shape.size());
  if (na.shape == nb.shape) {
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = f(na.value[i], nb.value[i]);
  } else {
    for (std::size_t r = 0; r < n.shape.rows; ++r)
      for (std::size_t c = 0; c < n.shape.cols; ++c)
        n.value[r * n.shape.cols + c] = f(na.value[bidx(na.shape, r, c)], nb.value[bidx(nb.shape, r, c)]);
  }
  if (op == Op::Max || op == Op::Min) {
    for (std::size_t r = 0; r < n.shape.rows; ++r)
      for (std::size_t c = 0; c < n.shape.cols; ++c) {
        const double x = na.value[bidx(na.shape, r, c)];
        const double y = nb.value[bidx(nb.shape, r, c)];
        t.note_kink(x - y, x > y);
      }
  }
  return t.record(std::move(n));
}

template <class F>
Var unary(Op op, Var a, double c, F f) {
  if (!a.valid()) throw ContractError("operation on an empty Var");
  Tape& t = a.tape();
  const Node& na = t.node(a.id());
  Node n;
  n.op = op;
  n.a = a.id();
  n.c = c;
  n.shape = na.shape;
  n.needs_grad = na.needs_grad;
  n.value.resize(na.value.size());
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = f(na.value[i]);
  switch (op) {
    case Op::Relu:
      for (double x : na.value) t.note_kink(x, x > 0.0);
      break;
    case Op::ClippedLogistic:
      for (double x : na.value) {
        t.note_kink(x - kLn3, x >= kLn3);
        t.note_kink(x + kLn3, x <= -kLn3);
      }
      break;
    case Op::MaxC:
    case Op::MinC:
      for (double x : na.value) t.note_kink(x - c, x > c);
      break;
    default:
      break;
  }
  return t.record(std::move(n));
}

}  // namespace detail

inline Var operator+(Var a, Var b) { return detail::binary(Op::Add, a, b, [](double x, double y) { return x + y; }); }
inline Var operator-(Var a, Var b) { return detail::binary(Op::Sub, a, b, [](double x, double y) { return x - y; }); }
inline Var operator*(Var a, Var b) { return detail::binary(Op::Mul, a, b, [](double x, double y) { return x * y; }); }
inline Var operator/(Var a, Var b) { return detail::binary(Op::Div, a, b, [](double x, double y) { return x / y; }); }
inline Var max(Var a, Var b) { return detail::binary(Op::Max, a, b, [](double x, double y) { return x > y ? x : y; }); }
inline Var min(Var a, Var b) { return detail::binary(Op::Min, a, b, [](double x, double y) { return x < y ? x : y; }); }

inline Var operator+(Var a, double c) { return detail::unary(Op::AddC, a, c, [c](double x) { return x + c; }); }
inline Var operator+(double c, Var a) { return a + c; }
inline Var operator-(Var a, double c) { return a + (-c); }
inline Var operator-(double c, Var a) { return detail::unary(Op::SubFromC, a, c, [c](double x) { return c - x; }); }
inline Var operator*(Var a, double c) { return detail::unary(Op::MulC, a, c, [c](double x) { return x * c; }); }
inline Var operator*(double c, Var a) { return a * c; }
inline Var operator/(Var a, double c) { return a * (1.0 / c); }
inline Var operator/(double c, Var a) { return detail::unary(Op::DivIntoC, a, c, [c](double x) { return c / x; }); }
inline Var operator-(Var a) { return detail::unary(Op::Neg, a, 0.0, [](double x) { return -x; }); }
inline Var max(Var a, double c) { return detail::unary(Op::MaxC, a, c, [c](double x) { return x > c ? x : c; }); }
inline Var max(double c, Var a) { return max(a, c); }
inline Var min(Var a, double c) { return detail::unary(Op::MinC, a, c, [c](double x) { return x < c ? x : c; }); }
inline Var min(double c, Var a) { return min(a, c); }

inline Var exp(Var a) { return detail::unary(Op::Exp, a, 0.0, [](double x) { return std::exp(x); }); }
inline Var log(Var a) { return detail::unary(Op::Log, a, 0.0, [](double x) { return std::log(x); }); }
inline Var square(Var a) { return detail::unary(Op::Square, a, 0.0, [](double x) { return x * x; }); }
inline Var relu(Var a) { return detail::unary(Op::Relu, a, 0.0, [](double x) { return x > 0.0 ? x : 0.0; }); }
/// |x|^p, p > 1 (differentiable everywhere, derivative 0 at the origin).
inline Var abs_pow(Var a, double p) {
  if (!(p > 1.0)) throw ContractError("abs_pow requires an exponent above 1");
  return detail::unary(Op::AbsPow, a, p, [p](double x) { return std::pow(std::abs(x), p); });
}
inline Var clipped_logistic(Var a) {
  return detail::unary(Op::ClippedLogistic, a, 0.0, [](double x) { return buyback::clipped_logistic(x); });
}

/// Constant 0/1 mask of x < threshold; gradients do not flow through it.
inline Var indicator_below(Var x, double threshold) {
  Tape& t = x.tape();
  Tensor mask(x.shape().rows, x.shape().cols);
  const auto v = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask[i] = v[i] < threshold ? 1.0 : 0.0;
    t.note_kink(v[i] - threshold, v[i] < threshold);
  }
  return t.constant(mask);
}

/// Y = X * W^T with X [r x k], W [m x k]; Y is [r x m].
inline Var matmul_nt(Var x, Var w) {
  Tape& t = detail::same_tape(x, w);
  const Node& nx = t.node(x.id());
  const Node& nw = t.node(w.id());
  if (nx.shape.cols != nw.shape.cols)
    throw ShapeError("matmul_nt: inner dimensions " + std::to_string(nx.shape.cols) + " and " +
                     std::to_string(nw.shape.cols) + " differ");
  const std::size_t r = nx.shape.rows, k = nx.shape.cols, m = nw.shape.rows;
  Node n;
  n.op = Op::MatMulNT;
  n.a = x.id();
  n.b = w.id();
  n.shape = {r, m};
  n.needs_grad = nx.needs_grad || nw.needs_grad;
  n.value.assign(r * m, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = &nx.value[i * k];
    for (std::size_t j = 0; j < m; ++j) {
      const double* wj = &nw.value[j * k];
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += xi[l] * wj[l];
      n.value[i * m + j] = acc;
    }
  }
  return t.record(std::move(n));
}

/// Column-wise concatenation of equal-height operands.
inline Var hstack(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("hstack of nothing");
  Tape& t = parts.front().tape();
  const std::size_t rows = parts.front().shape().rows;
  std::size_t cols = 0;
  Node n;
  n.op = Op::HStack;
  for (const Var& p : parts) {
    if (p.tape_ptr() != &t) throw ContractError("operands recorded on different tapes");
    if (p.shape().rows != rows) throw ShapeError("hstack: row counts differ");
    cols += p.shape().cols;
    n.args.push_back(p.id());
    n.needs_grad = n.needs_grad || t.node(p.id()).needs_grad;
  }
  n.shape = {rows, cols};
  n.value.resize(rows * cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Node& np = t.node(p.id());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < np.shape.cols; ++c) n.value[r * cols + offset + c] = np.value[r * np.shape.cols + c];
    offset += np.shape.cols;
  }
  return t.record(std::move(n));
}

inline Var sum(Var a) {
  Tape& t = a.tape();
  const Node& na = t.node(a.id());
  Node n;
  n.op = Op::Sum;
  n.a = a.id();
  n.shape = {1, 1};
  n.needs_grad = na.needs_grad;
  double acc = 0.0;
  for (double x : na.value) acc += x;
  n.value = {acc};
  return t.record(std::move(n));
}

inline Var mean(Var a) {
  Tape& t = a.tape();
  const Node& na = t.node(a.id());
  if (na.value.empty()) throw ShapeError("mean of an empty array");
  Node n;
  n.op = Op::Mean;
  n.a = a.id();
  n.shape = {1, 1};
  n.needs_grad = na.needs_grad;
  double acc = 0.0;
  for (double x : na.value) acc += x;
  n.value = {acc / static_cast<double>(na.value.size())};
  return t.record(std::move(n));
}

inline Gradients Tape::backward(Var root, double seed) const {
  if (root.tape_ptr() != this) throw ContractError("backward root belongs to another tape");
  const Node& nr = node(root.id());
  if (nr.shape.size() != 1) throw ContractError("backward requires a scalar root");

  std::vector<std::vector<double>> adj(nodes_.size());
  auto grad_of = [&](int id) -> std::vector<double>& {
    auto& g = adj[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(id)].value.size(), 0.0);
    return g;
  };
  grad_of(root.id())[0] = seed;

  for (int i = root.id(); i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    auto& gi = adj[static_cast<std::size_t>(i)];
    if (gi.empty() || !n.needs_grad || n.op == Op::Input) continue;

    // Accumulate d(out)/d(operand) into operand adjoints, reducing broadcast dims.
    auto push_binary = [&](auto da, auto db) {
      const Node& na = nodes_[static_cast<std::size_t>(n.a)];
      const Node& nb = nodes_[static_cast<std::size_t>(n.b)];
      std::vector<double>* ga = na.needs_grad ? &grad_of(n.a) : nullptr;
      std::vector<double>* gb = nb.needs_grad ? &grad_of(n.b) : nullptr;
      for (std::size_t r = 0; r < n.shape.rows; ++r)
        for (std::size_t c = 0; c < n.shape.cols; ++c) {
          const std::size_t o = r * n.shape.cols + c;
          const std::size_t ia = detail::bidx(na.shape, r, c);
          const std::size_t ib = detail::bidx(nb.shape, r, c);
          const double x = na.value[ia], y = nb.value[ib], g = gi[o];
          if (ga) (*ga)[ia] += g * da(x, y);
          if (gb) (*gb)[ib] += g * db(x, y);
        }
    };
    auto push_unary = [&](auto d) {
      const Node& na = nodes_[static_cast<std::size_t>(n.a)];
      if (!na.needs_grad) return;
      auto& ga = grad_of(n.a);
      for (std::size_t k = 0; k < gi.size(); ++k) ga[k] += gi[k] * d(na.value[k], n.value[k]);
    };

    const double c = n.c;
    switch (n.op) {
      case Op::Input:
        break;
      case Op::Add:
        push_binary([](double, double) { return 1.0; }, [](double, double) { return 1.0; });
        break;
      case Op::Sub:
        push_binary([](double, double) { return 1.0; }, [](double, double) { return -1.0; });
        break;
      case Op::Mul:
        push_binary([](double, double y) { return y; }, [](double x, double) { return x; });
        break;
      case Op::Div:
        push_binary([](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
        break;
      case Op::Max:
        push_binary([](double x, double y) { return x > y ? 1.0 : 0.0; },
                    [](double x, double y) { return x > y ? 0.0 : 1.0; });
        break;
      case Op::Min:
        push_binary([](double x, double y) { return x < y ? 1.0 : 0.0; },
                    [](double x, double y) { return x < y ? 0.0 : 1.0; });
        break;
      case Op::AddC:
      case Op::MulC:
        push_unary([&](double, double) { return n.op == Op::AddC ? 1.0 : c; });
        break;
      case Op::SubFromC:
      case Op::Neg:
        push_unary([](double, double) { return -1.0; });
        break;
      case Op::DivIntoC:
        push_unary([c](double x, double) { return -c / (x * x); });
        break;
      case Op::MaxC:
        push_unary([c](double x, double) { return x > c ? 1.0 : 0.0; });
        break;
      case Op::MinC:
        push_unary([c](double x, double) { return x < c ? 1.0 : 0.0; });
        break;
      case Op::Exp:
        push_unary([](double, double y) { return y; });
        break;
      case Op::Log:
        push_unary([](double x, double) { return 1.0 / x; });
        break;
      case Op::AbsPow:
        push_unary([c](double x, double) {
          if (x == 0.0) return 0.0;
          return c * std::pow(std::abs(x), c - 1.0) * (x > 0.0 ? 1.0 : -1.0);
        });
        break;
      case Op::Square:
        push_unary([](double x, double) { return 2.0 * x; });
        break;
      case Op::Relu:
        push_unary([](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
        break;
      case Op::ClippedLogistic:
        push_unary([](double x, double) { return clipped_logistic_derivative(x); });
        break;
      case Op::MatMulNT: {
        const Node& nx = nodes_[static_cast<std::size_t>(n.a)];
        const Node& nw = nodes_[static_cast<std::size_t>(n.b)];
        const std::size_t r = nx.shape.rows, k = nx.shape.cols, m = nw.shape.rows;
        if (nx.needs_grad) {
          auto& gx = grad_of(n.a);
          for (std::size_t row = 0; row < r; ++row)
            for (std::size_t j = 0; j < m; ++j) {
              const double g = gi[row * m + j];
              if (g == 0.0) continue;
              for (std::size_t l = 0; l < k; ++l) gx[row * k + l] += g * nw.value[j * k + l];
            }
        }
        if (nw.needs_grad) {
          auto& gw = grad_of(n.b);
          for (std::size_t row = 0; row < r; ++row)
            for (std::size_t j = 0; j < m; ++j) {
              const double g = gi[row * m + j];
              if (g == 0.0) continue;
              for (std::size_t l = 0; l < k; ++l) gw[j * k + l] += g * nx.value[row * k + l];
            }
        }
        break;
      }
      case Op::HStack: {
        std::size_t offset = 0;
        for (int id : n.args) {
          const Node& np = nodes_[static_cast<std::size_t>(id)];
          if (np.needs_grad) {
            auto& gp = grad_of(id);
            for (std::size_t r = 0; r < n.shape.rows; ++r)
              for (std::size_t cc = 0; cc < np.shape.cols; ++cc)
                gp[r * np.shape.cols + cc] += gi[r * n.shape.cols + offset + cc];
          }
          offset += np.shape.cols;
        }
        break;
      }
      case Op::Sum: {
        const Node& na = nodes_[static_cast<std::size_t>(n.a)];
        if (na.needs_grad) {
          auto& ga = grad_of(n.a);
          for (double& g : ga) g += gi[0];
        }
        break;
      }
      case Op::Mean: {
        const double inv = 1.0 / static_cast<double>(nodes_[static_cast<std::size_t>(n.a)].value.size());
        const Node& na = nodes_[static_cast<std::size_t>(n.a)];
        if (na.needs_grad) {
          auto& ga = grad_of(n.a);
          for (double& g : ga) g += gi[0] * inv;
        }
        break;
      }
    }
  }
  for (std::size_t i = 0; i < adj.size(); ++i)
    if (adj[i].empty() && nodes_[i].op == Op::Input) adj[i].assign(nodes_[i].value.size(), 0.0);
  return Gradients(std::move(adj));
}

}  // namespace ad
}  // namespace buyback
