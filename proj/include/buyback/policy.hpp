#pragma once

// Trading-rate and stopping-probability parameterizations. Each contract's
// trading rule is a perturbation (1 + vtilde) of a naive schedule, and each
// stopping rule compares a contract-specific progress ratio against a learned
// frontier ptilde through the clipped logistic S.
//
// The formulas are written once, generically over the scalar type: `double`
// for single-path evaluation and `ad::Var` (I x 1 columns) for batched,
// differentiable rollouts.

#include <cmath>
#include <concepts>
#include <limits>
#include <string>
#include <vector>

#include "buyback/autodiff.hpp"
#include "buyback/contracts.hpp"
#include "buyback/market.hpp"
#include "buyback/params.hpp"

namespace buyback {

inline double constant_like(double, double c) { return c; }
inline ad::Var constant_like(const ad::Var& like, double c) {
  return like.tape().constant(Shape{like.shape().rows, 1}, c);
}

inline void require_positive(double x, const char* what) {
  if (!(x > 0.0)) throw DomainError(std::string(what) + " must be positive");
}
inline void require_positive(const ad::Var& x, const char* what) {
  for (double v : x.value()) require_positive(v, what);
}

/// Dimensionless, centred inputs of the trading net.
template <class T>
std::vector<T> trade_features(const State<T>& st, const ContractSpec& spec, const MarketParams& mp) {
  const double N = mp.N;
  const T time = constant_like(st.S, st.n / N - 0.5);
  const T price = st.S * (1.0 / mp.S0) - 1.0;
  const T spread = (st.A - st.S) * (1.0 / mp.S0);
  switch (spec.kind()) {
    case ContractKind::FixedShares: {
      const double Q = std::get<FixedShares>(spec.terms).Q;
      return {time, price, spread, st.q * (1.0 / Q) - 0.5};
    }
    case ContractKind::FixedNotional: {
      const double F = std::get<FixedNotional>(spec.terms).F;
      return {time, price, spread, st.q * st.A * (1.0 / F) - 0.5};
    }
    case ContractKind::ProfitSharing: {
      const double F = std::get<ProfitSharing>(spec.terms).F;
      return {time, price, spread, st.X * (1.0 / F) - 0.5, st.q * (mp.S0 / F) - 0.5};
    }
  }
  throw ContractError("unknown contract kind");
}

/// Inputs of the stopping net (no cash for the two ASRs).
template <class T>
std::vector<T> stop_features(const State<T>& st, const ContractSpec& spec, const MarketParams& mp) {
  const double N = mp.N;
  const T time = constant_like(st.S, st.n / N - 0.5);
  const T price = st.S * (1.0 / mp.S0) - 1.0;
  const T spread = (st.A - st.S) * (1.0 / mp.S0);
  if (spec.kind() == ContractKind::ProfitSharing) {
    const double F = std::get<ProfitSharing>(spec.terms).F;
    return {time, price, spread, st.q * (mp.S0 / F) - 0.5};
  }
  return {time, price, spread};
}

/// Progress ratio compared against the exercise frontier: q/Q, qA/F or X/F.
template <class T>
T stop_ratio(const State<T>& st, const ContractSpec& spec) {
  switch (spec.kind()) {
    case ContractKind::FixedShares: return st.q * (1.0 / std::get<FixedShares>(spec.terms).Q);
    case ContractKind::FixedNotional: return st.q * st.A * (1.0 / std::get<FixedNotional>(spec.terms).F);
    case ContractKind::ProfitSharing: return st.X * (1.0 / std::get<ProfitSharing>(spec.terms).F);
  }
  throw ContractError("unknown contract kind");
}

/// Raw trading-net output is clamped to [-0.99 N, 10] before use.
inline constexpr double kTradeNetUpper = 10.0;
inline double trade_net_lower(int N) { return -0.99 * N; }

/// Trading rate (shares/day) on day st.n given the trading-net output `vtilde`.
template <class T>
T trade_rate_from_net(const State<T>& st, T vtilde, const ContractSpec& spec, const MarketParams& mp) {
  const int n = st.n, N = mp.N;
  if (n < 0 || n >= N) throw ContractError("trade_rate: day " + std::to_string(n) + " outside [0, N)");
  vtilde = min(max(vtilde, trade_net_lower(N)), kTradeNetUpper);
  const double horizon = static_cast<double>(n + 1) / N;
  T v = st.q;
  switch (spec.kind()) {
    case ContractKind::FixedShares: {
      const double Q = std::get<FixedShares>(spec.terms).Q;
      v = Q * min((vtilde + 1.0) * horizon, 1.0) - st.q;
      break;
    }
    case ContractKind::FixedNotional: {
      require_positive(st.A, "running average");
      const double F = std::get<FixedNotional>(spec.terms).F;
      v = (F * horizon) * (vtilde + 1.0) / st.A - st.q;
      break;
    }
    case ContractKind::ProfitSharing: {
      require_positive(st.S, "price");
      const double F = std::get<ProfitSharing>(spec.terms).F;
      const T fraction = max(min((vtilde + 1.0) * (1.0 / (N - n)), 1.0), 0.0);
      v = indicator_below(st.X, F) * ((F - st.X) / st.S) * fraction;
      break;
    }
  }
  const double V = mp.V(n + 1);
  if (std::isfinite(spec.rho_min)) v = max(v, spec.rho_min * V);
  if (std::isfinite(spec.rho_max)) v = min(v, spec.rho_max * V);
  return v;
}

/// Stopping probability given the frontier output `ptilde` and scale `nu`:
/// 1 at expiry, 0 off the exercise set, S(nu (ratio - ptilde)) on it.
template <class T, class Scale>
T stop_probability_from_net(const State<T>& st, T ptilde, const Scale& nu, const ContractSpec& spec,
                            const MarketParams& mp) {
  const int n = st.n;
  if (n < 0 || n > mp.N) throw ContractError("stop_probability: day " + std::to_string(n) + " outside [0, N]");
  if (n == mp.N) return constant_like(st.S, 1.0);
  if (!spec.in_exercise_set(n)) return constant_like(st.S, 0.0);
  return clipped_logistic((stop_ratio(st, spec) - ptilde) * nu);
}

/// Anything that decides a trading rate and a stopping probability from a scalar state.
template <class P>
concept Policy = requires(const P& p, const State<double>& s) {
  { p.trade_rate(s) } -> std::convertible_to<double>;
  { p.stop_probability(s) } -> std::convertible_to<double>;
};

/// Neural policy evaluated on a single path in plain arithmetic.
class NeuralPolicy {
 public:
  NeuralPolicy(const ParamStore& params, const ContractSpec& spec, const MarketParams& mp)
      : params_(&params), spec_(&spec), mp_(&mp) {
    if (params.kind != spec.kind()) throw ArtifactMismatch("parameters were trained for another contract kind");
    params.validate();
  }

  double trade_rate(const State<double>& st) const {
    const auto f = trade_features(st, *spec_, *mp_);
    return trade_rate_from_net(st, mlp_forward(params_->theta, f), *spec_, *mp_);
  }

  double stop_probability(const State<double>& st) const {
    if (st.n == mp_->N || !spec_->in_exercise_set(st.n))
      return stop_probability_from_net(st, 0.0, params_->nu_value(), *spec_, *mp_);
    const auto f = stop_features(st, *spec_, *mp_);
    return stop_probability_from_net(st, mlp_forward(params_->phi, f), params_->nu_value(), *spec_, *mp_);
  }

  const ParamStore& params() const { return *params_; }

 private:
  const ParamStore* params_;
  const ContractSpec* spec_;
  const MarketParams* mp_;
};

/// Neural policy recorded on a tape over a batch of paths.
class TapePolicy {
 public:
  TapePolicy(ad::Tape& tape, const ParamStore& params, const ContractSpec& spec, const MarketParams& mp,
             bool trainable = true)
      : theta_(record_net(tape, params.theta, trainable)),
        phi_(record_net(tape, params.phi, trainable)),
        nu_(trainable ? tape.variable(params.nu) : tape.constant(params.nu)),
        spec_(&spec),
        mp_(&mp) {
    if (params.kind != spec.kind()) throw ArtifactMismatch("parameters were trained for another contract kind");
  }

  ad::Var trade_rate(const State<ad::Var>& st) const {
    const auto f = trade_features(st, *spec_, *mp_);
    return trade_rate_from_net(st, mlp_forward(theta_, ad::hstack(f)), *spec_, *mp_);
  }

  ad::Var stop_probability(const State<ad::Var>& st) const {
    if (st.n == mp_->N || !spec_->in_exercise_set(st.n))
      return stop_probability_from_net(st, constant_like(st.S, 0.0), nu_, *spec_, *mp_);
    const auto f = stop_features(st, *spec_, *mp_);
    return stop_probability_from_net(st, mlp_forward(phi_, ad::hstack(f)), nu_, *spec_, *mp_);
  }

  const NetVars& theta() const { return theta_; }
  const NetVars& phi() const { return phi_; }
  ad::Var nu() const { return nu_; }

 private:
  NetVars theta_;
  NetVars phi_;
  ad::Var nu_;
  const ContractSpec* spec_;
  const MarketParams* mp_;
};

/// Parameters of the naive policy: vtilde = 0 everywhere and a frontier so
/// high that early exercise never happens.
inline ParamStore naive_params(ContractKind kind, std::size_t hidden = 50) {
  ParamStore p(kind, hidden);
  p.phi.b2[0] = 1.0e6;
  p.nu[0] = 10.0;
  return p;
}

/// Scatters gradients from a TapePolicy's leaves into a ParamStore layout.
inline void accumulate_gradients(const TapePolicy& pol, const ad::Gradients& g, ParamStore& out) {
  auto add = [&](Tensor& dst, ad::Var v) {
    const auto src = g.of(v);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };
  add(out.theta.A1, pol.theta().A1);
  add(out.theta.b1, pol.theta().b1);
  add(out.theta.A2, pol.theta().A2);
  add(out.theta.b2, pol.theta().b2);
  add(out.phi.A1, pol.phi().A1);
  add(out.phi.b1, pol.phi().b1);
  add(out.phi.A2, pol.phi().A2);
  add(out.phi.b2, pol.phi().b2);
  add(out.nu, pol.nu());
}

}  // namespace buyback
