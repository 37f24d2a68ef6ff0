#pragma once

// Full-rollout gradients against central finite differences on a 3-day toy
// market. A coordinate is skipped when either perturbed evaluation takes a
// different branch through any kink (clamp, relu, saturation, indicator)
// than the unperturbed one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "buyback/adam.hpp"
#include "buyback/contracts.hpp"
#include "buyback/market.hpp"
#include "buyback/params.hpp"
#include "buyback/policy.hpp"
#include "buyback/training.hpp"

namespace buyback {

struct GradCheckOptions {
  int N = 3;
  std::size_t paths = 16;
  std::size_t hidden = 5;
  double h = 1e-6;
};

struct GradCheckResult {
  std::uint64_t seed = 0;
  ContractKind kind = ContractKind::FixedShares;
  double max_rel_error = 0.0;  // ||fd - ad||_inf / ||ad||_inf over checked coordinates
  double max_abs_grad = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct ToyInstance {
  MarketParams market;
  ContractSpec contract;
  ParamStore params;
  PathBatch paths;
  double gamma = 0.0;
};

/// Seed k picks contract kind k mod 3; sizes are scaled so that three days of
/// trading at ~8% participation complete the contract.
inline ToyInstance toy_instance(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  ToyInstance t;
  t.market.N = opt.N;
  t.market.set_constant_volume(4.0e6);
  const double scale = 2.0e7 / (0.08 * 4.0e6 * opt.N);
  const double Q = 2.0e7 / scale, F = 9.0e8 / scale;
  switch (seed % 3) {
    case 0:
      t.contract = reference_fixed_shares();
      std::get<FixedShares>(t.contract.terms).Q = Q;
      t.contract.penalty_C *= scale;
      break;
    case 1:
      t.contract = reference_fixed_notional();
      std::get<FixedNotional>(t.contract.terms).F = F;
      t.contract.penalty_C *= scale;
      break;
    default:
      t.contract = reference_profit_sharing();
      std::get<ProfitSharing>(t.contract.terms).F = F;
      t.contract.penalty_C *= scale;
      break;
  }
  t.contract.set_exercise_range(1, opt.N - 1);
  t.gamma = 2.5e-7 * scale;
  InitOptions init;
  init.hidden = opt.hidden;
  init.nu = 4.0;
  init.output_scale = 0.5;
  RandomStream rng(mix_seed(seed, 0x6C), 0);
  init.stop_bias = rng.uniform(0.2, 0.8);
  t.params = init_params(t.contract.kind(), seed, init);
  t.paths = simulate_paths(t.market, opt.paths, mix_seed(seed, 0x9A7));
  return t;
}

namespace detail {
struct TapeEval {
  double J = 0.0;
  std::uint64_t signature = 0;
};

inline TapeEval tape_objective(const ToyInstance& t, const ParamStore& p) {
  ad::Tape tape;
  tape.track_kinks(true);
  const TapePolicy pol(tape, p, t.contract, t.market, false);
  const auto rr = rollout(pol, tape, t.paths, 0, t.paths.count(), t.contract, t.market);
  const double J = objective_meanvar(rr, t.gamma).item() / t.contract.normalizer(t.market.S0);
  return {J, tape.branch_signature()};
}
}  // namespace detail

inline GradCheckResult gradient_check(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  const ToyInstance t = toy_instance(seed, opt);
  GradCheckResult res;
  res.seed = seed;
  res.kind = t.contract.kind();
  const double norm = t.contract.normalizer(t.market.S0);
  const auto ag = objective_gradient(t.params, t.paths, t.contract, t.market, t.gamma, 5, 1, 1.0 / norm);
  const auto base = detail::tape_objective(t, t.params);

  std::vector<double> ad_vals, fd_vals;
  ParamStore probe = t.params;
  std::vector<Tensor*> probe_t;
  probe.for_each([&](const std::string&, Tensor& x) { probe_t.push_back(&x); });
  std::vector<const Tensor*> grad_t;
  ag.grad.for_each([&](const std::string&, const Tensor& x) { grad_t.push_back(&x); });

  for (std::size_t k = 0; k < probe_t.size(); ++k) {
    for (std::size_t i = 0; i < probe_t[k]->size(); ++i) {
      double& x = (*probe_t[k])[i];
      const double x0 = x;
      const double h = opt.h * std::max(1.0, std::abs(x0));
      x = x0 + h;
      const auto up = detail::tape_objective(t, probe);
      x = x0 - h;
      const auto dn = detail::tape_objective(t, probe);
      x = x0;
      if (up.signature != base.signature || dn.signature != base.signature) {
        ++res.skipped;
        continue;
      }
      ++res.checked;
      ad_vals.push_back((*grad_t[k])[i]);
      fd_vals.push_back((up.J - dn.J) / (2.0 * h));
    }
  }
  double diff = 0.0;
  for (std::size_t k = 0; k < ad_vals.size(); ++k) {
    diff = std::max(diff, std::abs(ad_vals[k] - fd_vals[k]));
    res.max_abs_grad = std::max(res.max_abs_grad, std::abs(ad_vals[k]));
  }
  res.max_rel_error = res.max_abs_grad > 0.0 ? diff / res.max_abs_grad : diff;
  return res;
}

}  // namespace buyback
