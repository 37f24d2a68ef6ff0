#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>

#include "buyback/autodiff.hpp"
#include "buyback/contracts.hpp"
#include "buyback/errors.hpp"
#include "buyback/random.hpp"
#include "buyback/tensor.hpp"

namespace buyback {

/// One-hidden-layer perceptron: A2 relu(A1 x + b1) + b2.
/// A1 is [hidden x inputs], b1 and A2 are [1 x hidden], b2 is [1 x 1].
struct NetWeights {
  Tensor A1, b1, A2, b2;

  NetWeights() = default;
  NetWeights(std::size_t hidden, std::size_t inputs)
      : A1(hidden, inputs), b1(1, hidden), A2(1, hidden), b2(1, 1) {}

  std::size_t inputs() const { return A1.cols(); }
  std::size_t hidden() const { return A1.rows(); }

  friend bool operator==(const NetWeights&, const NetWeights&) = default;
};

inline double mlp_forward(const NetWeights& w, std::span<const double> x) {
  if (x.size() != w.inputs())
    throw ShapeError("mlp input has " + std::to_string(x.size()) + " features, net expects " +
                     std::to_string(w.inputs()));
  const std::size_t H = w.hidden(), d = w.inputs();
  double out = 0.0;
  for (std::size_t j = 0; j < H; ++j) {
    double acc = 0.0;
    for (std::size_t l = 0; l < d; ++l) acc += x[l] * w.A1(j, l);
    out += relu(acc + w.b1[j]) * w.A2[j];
  }
  return out + w.b2[0];
}

/// Net weights recorded on a tape.
struct NetVars {
  ad::Var A1, b1, A2, b2;
};

inline NetVars record_net(ad::Tape& tape, const NetWeights& w, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? tape.variable(t) : tape.constant(t); };
  return {put(w.A1), put(w.b1), put(w.A2), put(w.b2)};
}

/// Batched forward pass: x is [rows x inputs], result is [rows x 1].
inline ad::Var mlp_forward(const NetVars& net, ad::Var x) {
  if (x.shape().cols != net.A1.shape().cols)
    throw ShapeError("mlp input has " + std::to_string(x.shape().cols) + " features, net expects " +
                     std::to_string(net.A1.shape().cols));
  const ad::Var hidden = relu(ad::matmul_nt(x, net.A1) + net.b1);
  return ad::matmul_nt(hidden, net.A2) + net.b2;
}

inline std::size_t trade_net_inputs(ContractKind k) { return k == ContractKind::ProfitSharing ? 5 : 4; }
inline std::size_t stop_net_inputs(ContractKind k) { return k == ContractKind::ProfitSharing ? 4 : 3; }

/// Every trainable scalar: trading net theta, stopping net phi, stopping scale nu.
struct ParamStore {
  ContractKind kind = ContractKind::FixedShares;
  NetWeights theta;
  NetWeights phi;
  Tensor nu = Tensor::scalar(10.0);
  std::int64_t step = 0;

  ParamStore() = default;
  ParamStore(ContractKind k, std::size_t hidden)
      : kind(k), theta(hidden, trade_net_inputs(k)), phi(hidden, stop_net_inputs(k)) {}

  std::size_t hidden() const { return theta.hidden(); }
  double nu_value() const { return nu[0]; }

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("theta.A1", self.theta.A1);
    f("theta.b1", self.theta.b1);
    f("theta.A2", self.theta.A2);
    f("theta.b2", self.theta.b2);
    f("phi.A1", self.phi.A1);
    f("phi.b1", self.phi.b1);
    f("phi.A2", self.phi.A2);
    f("phi.b2", self.phi.b2);
    f("nu", self.nu);
  }
  /// Calls f(name, tensor) for each named parameter array in a fixed order.
  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  void validate() const {
    if (theta.inputs() != trade_net_inputs(kind) || phi.inputs() != stop_net_inputs(kind))
      throw ShapeError("network input widths do not match the contract kind");
    if (!(nu_value() > 0.0)) throw ContractError("stopping scale nu must be positive");
  }

  friend bool operator==(const ParamStore&, const ParamStore&) = default;
};

struct InitOptions {
  std::size_t hidden = 50;
  double nu = 10.0;
  /// Half-width of the uniform draw for the output row A2.
  double output_scale = 0.01;
  /// Initial output bias of the stopping net (the exercise frontier).
  double stop_bias = 1.0;
};

/// He-uniform hidden weights, zero hidden biases, small uniform output row.
inline ParamStore init_params(ContractKind kind, std::uint64_t seed, const InitOptions& opt = {}) {
  ParamStore p(kind, opt.hidden);
  RandomStream rng(mix_seed(seed, 0x1417), 0);
  auto fill = [&](NetWeights& w) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.inputs()));
    for (double& a : w.A1.data) a = rng.uniform(-bound, bound);
    for (double& a : w.A2.data) a = rng.uniform(-opt.output_scale, opt.output_scale);
  };
  fill(p.theta);
  fill(p.phi);
  p.phi.b2[0] = opt.stop_bias;
  p.nu[0] = opt.nu;
  return p;
}

inline void write_checkpoint(std::ostream& out, const ParamStore& p) {
  out << "buyback-checkpoint 1\n";
  out << "contract " << to_string(p.kind) << '\n';
  out << "hidden " << p.hidden() << '\n';
  out << "trade_inputs " << p.theta.inputs() << '\n';
  out << "stop_inputs " << p.phi.inputs() << '\n';
  out << "step " << p.step << '\n';
  char buf[40];
  p.for_each([&](const std::string& name, const Tensor& t) {
    out << "param " << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t c = 0; c < t.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", t(r, c));
        out << (c ? " " : "") << buf;
      }
      out << '\n';
    }
  });
  out << "end\n";
}

inline ParamStore read_checkpoint(std::istream& in) {
  auto expect = [&](const std::string& key) {
    std::string k;
    if (!(in >> k) || k != key) throw ArtifactMismatch("checkpoint: expected '" + key + "'");
  };
  expect("buyback-checkpoint");
  int version = 0;
  in >> version;
  if (version != 1) throw ArtifactMismatch("checkpoint: unsupported version");
  std::string kind;
  std::size_t hidden = 0, trade_in = 0, stop_in = 0;
  std::int64_t step = 0;
  expect("contract");
  in >> kind;
  expect("hidden");
  in >> hidden;
  expect("trade_inputs");
  in >> trade_in;
  expect("stop_inputs");
  in >> stop_in;
  expect("step");
  in >> step;
  if (!in) throw ArtifactMismatch("checkpoint: malformed header");

  ContractKind k;
  try {
    k = parse_contract_kind(kind);
  } catch (const ConfigError&) {
    throw ArtifactMismatch("checkpoint: unknown contract '" + kind + "'");
  }
  ParamStore p(k, hidden);
  if (p.theta.inputs() != trade_in || p.phi.inputs() != stop_in)
    throw ArtifactMismatch("checkpoint: input widths do not match contract " + kind);
  p.step = step;
  p.for_each([&](const std::string& name, Tensor& t) {
    expect("param");
    std::string got;
    std::size_t rows = 0, cols = 0;
    in >> got >> rows >> cols;
    if (got != name || rows != t.rows() || cols != t.cols())
      throw ArtifactMismatch("checkpoint: expected parameter " + name);
    for (double& v : t.data) {
      std::string tok;
      if (!(in >> tok)) throw ArtifactMismatch("checkpoint: truncated parameter " + name);
      char* end = nullptr;
      v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size()) throw ArtifactMismatch("checkpoint: bad number in " + name);
    }
  });
  expect("end");
  return p;
}

}  // namespace buyback
