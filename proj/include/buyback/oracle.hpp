#pragma once

// Brute-force validators: exact relaxed objective on small binomial trees,
// the deterministic zero-volatility optimum, and Monte-Carlo checks of the
// Bernoulli stopping identity. None of these share code with the training
// rollout beyond the policy and the contract payoff.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "buyback/contracts.hpp"
#include "buyback/errors.hpp"
#include "buyback/market.hpp"
#include "buyback/policy.hpp"
#include "buyback/random.hpp"

namespace buyback::oracle {

inline constexpr int kMaxTreeDepth = 12;

/// Paths with i.i.d. +-sigma sqrt(dt) increments (fair coin), substream (seed, i).
inline PathBatch simulate_binomial_paths(const MarketParams& mp, std::size_t count, std::uint64_t seed) {
  PathBatch b;
  b.seed = seed;
  b.prices = Tensor(count, static_cast<std::size_t>(mp.N) + 1);
  const double step = mp.sigma * std::sqrt(mp.dt);
  for (std::size_t i = 0; i < count; ++i) {
    RandomStream rng(seed, i);
    double s = mp.S0;
    b.prices(i, 0) = s;
    std::uint64_t bits = 0;
    for (int n = 1; n <= mp.N; ++n) {
      if ((n - 1) % 64 == 0) bits = rng.next_u64();
      s += (bits & 1u) ? step : -step;
      bits >>= 1;
      b.prices(i, static_cast<std::size_t>(n)) = s;
    }
  }
  compute_running_averages(b);
  return b;
}

/// Hard-stopping reference policy: naive schedule scaled by `pace`; settles on
/// the first exercise day with S <= trigger.
struct TriggerPolicy {
  ContractSpec spec;
  MarketParams mp;
  double pace = 1.0;
  double trigger = 0.0;

  double trade_rate(const State<double>& st) const { return trade_rate_from_net(st, pace - 1.0, spec, mp); }
  double stop_probability(const State<double>& st) const {
    if (st.n == mp.N) return 1.0;
    if (!spec.in_exercise_set(st.n)) return 0.0;
    return st.S <= trigger ? 1.0 : 0.0;
  }
};

struct TreeResult {
  double mean = 0.0;
  double second = 0.0;
  double J = 0.0;
  std::size_t leaves = 0;
  double variance() const { return second - mean * mean; }
};

namespace detail {

struct Node {
  int n = 0;
  double S = 0.0, A = 0.0, X = 0.0, q = 0.0;
};

inline State<double> as_state(const Node& nd) { return State<double>{nd.n, nd.S, nd.A, nd.X, nd.q}; }

// Own copy of the day step so the oracle does not lean on the rollout code.
inline Node advance(const Node& nd, double v, double S_next, const MarketParams& mp) {
  Node out = nd;
  const double V = mp.V(nd.n + 1);
  const double rho = v / V;
  const double cost = mp.eta == 0.0 ? 0.0 : mp.eta * std::pow(std::abs(rho), 1.0 + mp.cost_exponent) * V * mp.dt;
  out.X = nd.X + v * S_next * mp.dt + cost;
  out.q = nd.q + v * mp.dt;
  out.S = S_next;
  out.A = nd.n == 0 ? S_next : nd.A + (S_next - nd.A) / (nd.n + 1);
  out.n = nd.n + 1;
  return out;
}

template <Policy P>
void enumerate(const P& pol, const Node& nd, double prob, double survival, const ContractSpec& spec,
               const MarketParams& mp, double step, TreeResult& acc) {
  const State<double> st = as_state(nd);
  if (nd.n >= 1 && (nd.n == mp.N || spec.in_exercise_set(nd.n))) {
    const double p = pol.stop_probability(st);
    const double pnl = settlement_pnl(st, spec, mp);
    const double w = survival * p;
    acc.mean += prob * w * pnl;
    acc.second += prob * w * pnl * pnl;
    survival *= 1.0 - p;
  }
  if (nd.n == mp.N) {
    ++acc.leaves;
    return;
  }
  const double v = pol.trade_rate(st);
  if (step == 0.0) {
    enumerate(pol, advance(nd, v, nd.S, mp), prob, survival, spec, mp, step, acc);
    return;
  }
  enumerate(pol, advance(nd, v, nd.S + step, mp), 0.5 * prob, survival, spec, mp, step, acc);
  enumerate(pol, advance(nd, v, nd.S - step, mp), 0.5 * prob, survival, spec, mp, step, acc);
}

template <Policy P>
double backward_value(const P& pol, const Node& nd, const ContractSpec& spec, const MarketParams& mp, double step) {
  const State<double> st = as_state(nd);
  const bool settle = nd.n >= 1 && (nd.n == mp.N || spec.in_exercise_set(nd.n));
  if (nd.n == mp.N) return settlement_pnl(st, spec, mp);
  const double v = pol.trade_rate(st);
  double cont;
  if (step == 0.0)
    cont = backward_value(pol, advance(nd, v, nd.S, mp), spec, mp, step);
  else
    cont = 0.5 * (backward_value(pol, advance(nd, v, nd.S + step, mp), spec, mp, step) +
                  backward_value(pol, advance(nd, v, nd.S - step, mp), spec, mp, step));
  if (!settle) return cont;
  const double p = pol.stop_probability(st);
  return p * settlement_pnl(st, spec, mp) + (1.0 - p) * cont;
}

inline void check_depth(const MarketParams& mp) {
  if (mp.N > kMaxTreeDepth)
    throw ContractError("tree depth " + std::to_string(mp.N) + " exceeds " + std::to_string(kMaxTreeDepth));
}

}  // namespace detail

/// Exact relaxed mean, second moment and J over all 2^N equiprobable binomial
/// paths (a single path when sigma = 0).
template <Policy P>
TreeResult enumerate_tree_objective(const P& policy, const ContractSpec& spec, const MarketParams& mp, double gamma) {
  detail::check_depth(mp);
  TreeResult r;
  const detail::Node root{0, mp.S0, mp.S0, 0.0, 0.0};
  detail::enumerate(policy, root, 1.0, 1.0, spec, mp, mp.sigma * std::sqrt(mp.dt), r);
  r.J = r.mean - 0.5 * gamma * r.variance();
  return r;
}

/// Expected PnL by backward induction on the same tree (gamma = 0 cross-check).
template <Policy P>
double backward_induction_value(const P& policy, const ContractSpec& spec, const MarketParams& mp) {
  detail::check_depth(mp);
  const detail::Node root{0, mp.S0, mp.S0, 0.0, 0.0};
  return detail::backward_value(policy, root, spec, mp, mp.sigma * std::sqrt(mp.dt));
}

struct ZeroVolSchedule {
  std::vector<double> rates;      // v_0..v_{N-1}, shares/day
  std::vector<double> inventory;  // q_0..q_N
  double execution_cost = 0.0;
  double penalty = 0.0;
  double objective = 0.0;  // PnL = -(cost + penalty), the optimal J
  double grad_norm = 0.0;
  int iterations = 0;
};

/// Minimizes sum_n L(v_n/V) V dt + C (Q - sum v_n dt)^2 for a fixed-shares
/// contract at sigma = 0 (payoff terms cancel since S = A = S0). Damped
/// Newton; the Hessian is diagonal plus rank one and is inverted with
/// Sherman-Morrison.
inline ZeroVolSchedule zero_vol_schedule(const ContractSpec& spec, const MarketParams& mp, double tol = 1e-10,
                                         int max_iter = 500) {
  const auto* fs = std::get_if<FixedShares>(&spec.terms);
  if (!fs) throw ContractError("zero_vol_schedule needs a fixed-shares contract");
  if (mp.sigma != 0.0) throw ContractError("zero_vol_schedule needs sigma = 0");
  const int N = mp.N;
  const double Q = fs->Q, C = spec.penalty_C, dt = mp.dt, phi = mp.cost_exponent, eta = mp.eta;

  // Unknowns are deviations u_n from the even rate Q/(N dt), so Q - sum v dt = -sum u dt
  // carries no cancellation.
  const double even = Q / (N * dt);
  auto shortfall = [&](const std::vector<double>& v) {
    double gap = 0.0;
    for (int n = 0; n < N; ++n) gap += -v[n] * dt;
    return gap;
  };
  auto cost_of = [&](const std::vector<double>& v, double& cost, double& pen) {
    cost = 0.0;
    for (int n = 0; n < N; ++n) {
      const double V = mp.V(n + 1);
      cost += eta * std::pow(std::abs((even + v[n]) / V), 1.0 + phi) * V * dt;
    }
    const double gap = shortfall(v);
    pen = C * gap * gap;
    return cost + pen;
  };

  std::vector<double> v(N, 0.0), g(N), d(N), Dinv(N), trial(N);
  ZeroVolSchedule out;
  double cost = 0.0, pen = 0.0;
  double f = cost_of(v, cost, pen);
  for (int it = 0;; ++it) {
    const double pull = -2.0 * C * shortfall(v) * dt;
    double gnorm = 0.0;
    for (int n = 0; n < N; ++n) {
      const double rho = (even + v[n]) / mp.V(n + 1);
      const double mag = std::pow(std::abs(rho), phi);
      g[n] = eta * (1.0 + phi) * mag * (rho < 0 ? -1.0 : 1.0) * dt + pull;
      double h = eta * (1.0 + phi) * phi * std::pow(std::abs(rho), phi - 1.0) / mp.V(n + 1) * dt;
      if (!std::isfinite(h) || h > 1e300) h = 1e300;
      // Keeps the system solvable when eta = 0 or rho = 0 with phi > 1.
      h = std::max(h, 1e-18);
      Dinv[n] = 1.0 / h;
      gnorm = std::max(gnorm, std::abs(g[n]));
    }
    out.grad_norm = gnorm;
    out.iterations = it;
    if (gnorm <= tol || it >= max_iter) break;

    const double c = 2.0 * C * dt * dt;
    double s_dg = 0.0, s_d = 0.0;
    for (int n = 0; n < N; ++n) {
      s_dg += Dinv[n] * g[n];
      s_d += Dinv[n];
    }
    const double k = c * s_dg / (1.0 + c * s_d);
    double slope = 0.0;
    for (int n = 0; n < N; ++n) {
      d[n] = -(Dinv[n] * g[n] - Dinv[n] * k);
      slope += d[n] * g[n];
    }
    if (!(slope < 0.0)) {
      slope = 0.0;
      for (int n = 0; n < N; ++n) {
        d[n] = -g[n];
        slope -= g[n] * g[n];
      }
    }
    double t = 1.0;
    double fnew = f;
    bool moved = false;
    for (int ls = 0; ls < 80; ++ls) {
      for (int n = 0; n < N; ++n) trial[n] = v[n] + t * d[n];
      double c1 = 0.0, p1 = 0.0;
      fnew = cost_of(trial, c1, p1);
      if (fnew <= f + 1e-4 * t * slope) {
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) {
      // At machine precision of f; accept the full Newton step if it lowers the gradient.
      for (int n = 0; n < N; ++n) trial[n] = v[n] + d[n];
      fnew = cost_of(trial, cost, pen);
    }
    v.swap(trial);
    f = fnew;
  }
  f = cost_of(v, cost, pen);
  out.rates.resize(N);
  for (int n = 0; n < N; ++n) out.rates[n] = even + v[n];
  out.inventory.assign(N + 1, 0.0);
  for (int n = 0; n < N; ++n) out.inventory[n + 1] = out.inventory[n] + out.rates[n] * dt;
  out.execution_cost = cost;
  out.penalty = pen;
  out.objective = -f;
  return out;
}

/// Closed-form execution cost of buying Q evenly over N days at constant volume V.
inline double naive_execution_cost(double Q, const MarketParams& mp) {
  double cost = 0.0;
  const double v = Q / (mp.N * mp.dt);
  for (int n = 1; n <= mp.N; ++n) cost += mp.eta * std::pow(v / mp.V(n), 1.0 + mp.cost_exponent) * mp.V(n) * mp.dt;
  return cost;
}

struct BernoulliCheck {
  std::vector<double> analytic;   // prod_{k<n}(1 - p_k) p_n
  std::vector<double> empirical;  // stopping frequencies
  std::vector<double> stderr_;    // binomial standard errors sqrt(w(1-w)/M)
  double max_deviation = 0.0;
  /// max_n |empirical - analytic| / stderr (0 where stderr vanishes and they agree).
  double max_z = 0.0;
};

/// Draws M i.i.d. uniform sequences, stops at the first n with e_n <= p_n, and
/// compares stopping frequencies to the product weights. p must end in 1.
inline BernoulliCheck bernoulli_identity_check(std::span<const double> p, std::size_t M, std::uint64_t seed) {
  if (p.empty() || p.back() != 1.0) throw ContractError("bernoulli_identity_check: last probability must be 1");
  for (double x : p)
    if (!(x >= 0.0 && x <= 1.0)) throw ContractError("bernoulli_identity_check: probabilities must lie in [0, 1]");
  if (M == 0) throw ContractError("bernoulli_identity_check: need at least one draw");
  const std::size_t K = p.size();
  BernoulliCheck out;
  out.analytic.resize(K);
  double survival = 1.0;
  for (std::size_t k = 0; k < K; ++k) {
    out.analytic[k] = survival * p[k];
    survival *= 1.0 - p[k];
  }
  std::vector<std::size_t> hits(K, 0);
  RandomStream rng(seed, 0);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t k = 0; k < K; ++k)
      if (rng.uniform_open() <= p[k]) {
        ++hits[k];
        break;
      }
  }
  out.empirical.resize(K);
  out.stderr_.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    out.empirical[k] = static_cast<double>(hits[k]) / static_cast<double>(M);
    const double w = out.analytic[k];
    out.stderr_[k] = std::sqrt(w * (1.0 - w) / static_cast<double>(M));
    const double dev = std::abs(out.empirical[k] - w);
    out.max_deviation = std::max(out.max_deviation, dev);
    if (out.stderr_[k] > 0.0)
      out.max_z = std::max(out.max_z, dev / out.stderr_[k]);
    else if (dev > 0.0)
      out.max_z = std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace buyback::oracle
