#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "buyback/errors.hpp"
#include "buyback/market.hpp"

namespace buyback {

enum class ContractKind { FixedShares, FixedNotional, ProfitSharing };

inline std::string to_string(ContractKind k) {
  switch (k) {
    case ContractKind::FixedShares: return "fixed-shares";
    case ContractKind::FixedNotional: return "fixed-notional";
    case ContractKind::ProfitSharing: return "profit-sharing";
  }
  return "?";
}

inline ContractKind parse_contract_kind(const std::string& s) {
  if (s == "fixed-shares") return ContractKind::FixedShares;
  if (s == "fixed-notional") return ContractKind::FixedNotional;
  if (s == "profit-sharing") return ContractKind::ProfitSharing;
  throw ConfigError("kind", "unknown contract kind '" + s + "'");
}

/// ASR with a fixed number of shares Q.
struct FixedShares {
  double Q = 2.0e7;
};

/// ASR with fixed notional F. zeta sizes the initial delivery and never enters the PnL.
struct FixedNotional {
  double F = 9.0e8;
  double zeta = 0.8;
};

/// VWAP-minus profit sharing on notional F with profit share alpha, loss share
/// beta (0 <= beta < alpha) and hurdle kappa against S0.
struct ProfitSharing {
  double F = 9.0e8;
  double alpha = 0.25;
  double kappa = 0.005;
  double beta = 0.05;
};

struct ContractSpec {
  std::variant<FixedShares, FixedNotional, ProfitSharing> terms = FixedShares{};
  /// Early-exercise days, sorted, subset of {1..N-1}. Expiry N is always allowed.
  std::vector<int> exercise_days;
  double rho_min = -std::numeric_limits<double>::infinity();
  double rho_max = std::numeric_limits<double>::infinity();
  /// Coefficient of the terminal penalty ell(x) = C x^2.
  double penalty_C = 2.0e-7;

  ContractKind kind() const { return static_cast<ContractKind>(terms.index()); }

  void set_exercise_range(int first, int last) {
    exercise_days.clear();
    for (int n = first; n <= last; ++n) exercise_days.push_back(n);
  }

  bool in_exercise_set(int n) const { return std::binary_search(exercise_days.begin(), exercise_days.end(), n); }

  /// Scale used for reported scores: Q S0 for fixed shares, F otherwise.
  double normalizer(double S0) const {
    if (const auto* fs = std::get_if<FixedShares>(&terms)) return fs->Q * S0;
    if (const auto* fn = std::get_if<FixedNotional>(&terms)) return fn->F;
    return std::get<ProfitSharing>(terms).F;
  }

  void validate(int N) const {
    if (!std::is_sorted(exercise_days.begin(), exercise_days.end()) ||
        std::adjacent_find(exercise_days.begin(), exercise_days.end()) != exercise_days.end())
      throw ConfigError("exercise_set", "days must be sorted and distinct");
    for (int n : exercise_days)
      if (n < 1 || n > N - 1) throw ConfigError("exercise_set", "days must lie in [1, N-1]");
    if (!(rho_min <= rho_max)) throw ConfigError("rho_min", "must not exceed rho_max");
    if (!(penalty_C >= 0.0)) throw ConfigError("penalty_C", "must be nonnegative");
    std::visit(
        [](const auto& t) {
          using Terms = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<Terms, FixedShares>) {
            if (!(t.Q > 0.0)) throw ConfigError("Q", "must be positive");
          } else if constexpr (std::is_same_v<Terms, FixedNotional>) {
            if (!(t.F > 0.0)) throw ConfigError("F", "must be positive");
            if (!(t.zeta >= 0.0 && t.zeta <= 1.0)) throw ConfigError("zeta", "must lie in [0, 1]");
          } else {
            if (!(t.F > 0.0)) throw ConfigError("F", "must be positive");
            if (!(t.alpha <= 1.0 && t.beta >= 0.0 && t.beta < t.alpha))
              throw ConfigError("beta", "need 0 <= beta < alpha <= 1");
          }
        },
        terms);
  }
};

/// Reference termsheets used throughout the numerical study.
inline ContractSpec reference_fixed_shares() {
  ContractSpec c;
  c.terms = FixedShares{2.0e7};
  c.set_exercise_range(22, 62);
  c.penalty_C = 2.0e-7;
  return c;
}

inline ContractSpec reference_fixed_notional() {
  ContractSpec c;
  c.terms = FixedNotional{9.0e8, 0.8};
  c.set_exercise_range(22, 62);
  c.penalty_C = 2.0e-7;
  return c;
}

inline ContractSpec reference_profit_sharing() {
  ContractSpec c;
  c.terms = ProfitSharing{9.0e8, 0.25, 0.005, 0.05};
  c.set_exercise_range(22, 62);
  c.rho_min = 0.0;
  c.penalty_C = 2.0e-9;
  return c;
}

/// True iff settlement may happen on day n: n in the exercise set, or n = N.
inline bool exercise_allowed(int n, const ContractSpec& spec, int N) {
  if (n < 0 || n > N) throw ContractError("exercise_allowed: day " + std::to_string(n) + " outside [0, N]");
  return n == N || spec.in_exercise_set(n);
}

namespace detail {
inline void require_positive_average(double A) {
  if (!(A > 0.0)) throw DomainError("fixed-notional PnL needs a positive running average");
}
inline void require_positive_average(const ad::Var& A) {
  for (double a : A.value()) require_positive_average(a);
}
}  // namespace detail

/// QA_n - X_n - (Q - q_n) S_n - ell(Q - q_n).
template <class T>
T pnl_fixed_shares(const State<T>& st, const FixedShares& c, double C) {
  const T remaining = c.Q - st.q;
  return c.Q * st.A - st.X - remaining * st.S - terminal_penalty(remaining, C);
}

/// F - X_n - (F/A_n - q_n) S_n - ell(F/A_n - q_n).
template <class T>
T pnl_fixed_notional(const State<T>& st, const FixedNotional& c, double C) {
  detail::require_positive_average(st.A);
  const T remaining = c.F / st.A - st.q;
  return c.F - st.X - remaining * st.S - terminal_penalty(remaining, C);
}

/// -ell(F - X_n) + alpha (u)_+ - beta (u)_-, with u = q_n (A_n - kappa S0) - F.
template <class T>
T pnl_profit_sharing(const State<T>& st, const ProfitSharing& c, double C, double S0) {
  const T u = st.q * (st.A - c.kappa * S0) - c.F;
  return c.alpha * max(u, 0.0) - c.beta * max(-u, 0.0) - terminal_penalty(c.F - st.X, C);
}

/// PnL realized if the contract settles in state `st`.
template <class T>
T settlement_pnl(const State<T>& st, const ContractSpec& spec, const MarketParams& mp) {
  switch (spec.kind()) {
    case ContractKind::FixedShares:
      return pnl_fixed_shares(st, std::get<FixedShares>(spec.terms), spec.penalty_C);
    case ContractKind::FixedNotional:
      return pnl_fixed_notional(st, std::get<FixedNotional>(spec.terms), spec.penalty_C);
    case ContractKind::ProfitSharing:
      return pnl_profit_sharing(st, std::get<ProfitSharing>(spec.terms), spec.penalty_C, mp.S0);
  }
  throw ContractError("unknown contract kind");
}

}  // namespace buyback
