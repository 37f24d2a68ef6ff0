#pragma once

// Rollouts, the relaxed-stopping mean-variance objective, evaluation and the
// (pretraining + main) gradient-ascent loop.
//
// A rollout walks every path forward over days 0..N. On each settlement
// candidate day (exercise set or expiry) it records the stopping probability
// p_n and the settlement PnL_n; the path's stopping weights are
// w_n = prod_{k<n}(1 - p_k) p_n, which sum to one because p_N = 1. The
// objective is E[sum w PnL] - gamma/2 (E[sum w PnL^2] - E[sum w PnL]^2).

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "buyback/adam.hpp"
#include "buyback/autodiff.hpp"
#include "buyback/contracts.hpp"
#include "buyback/market.hpp"
#include "buyback/parallel.hpp"
#include "buyback/params.hpp"
#include "buyback/policy.hpp"
#include "buyback/random.hpp"

namespace buyback {

/// Drives a policy along one path (T = double) or a batch column (T = ad::Var).
/// `price_at(n)` yields (S_n, A_n). `on_settle(state, p, pnl)` runs on every
/// settlement candidate day and returns true to end the walk; `on_trade(state, v)`
/// runs before each day's trade.
template <class T, class Pol, class PriceFn, class OnSettle, class OnTrade>
void roll_policy(const Pol& policy, PriceFn&& price_at, const T& zero, const ContractSpec& spec,
                 const MarketParams& mp, OnSettle&& on_settle, OnTrade&& on_trade) {
  State<T> st;
  auto [s0, a0] = price_at(0);
  st.S = s0;
  st.A = a0;
  st.X = zero;
  st.q = zero;
  for (int n = 0;; ++n) {
    if (n >= 1 && exercise_allowed(n, spec, mp.N)) {
      const T p = policy.stop_probability(st);
      const T pnl = settlement_pnl(st, spec, mp);
      if (on_settle(st, p, pnl)) return;
    }
    if (n == mp.N) return;
    const T v = policy.trade_rate(st);
    on_trade(st, v);
    auto [s1, a1] = price_at(n + 1);
    step_state(st, v, s1, a1, mp);
  }
}

// ---------------------------------------------------------------------------
// Relaxed weights and moments on plain values.

/// w_n = prod_{k<n} (1 - p_k) p_n.
inline std::vector<double> stop_weights(std::span<const double> probs) {
  std::vector<double> w(probs.size());
  double survival = 1.0;
  for (std::size_t n = 0; n < probs.size(); ++n) {
    w[n] = survival * probs[n];
    survival *= 1.0 - probs[n];
  }
  return w;
}

/// Stopping probabilities and settlement PnLs of one path on its candidate days.
struct SettlementProfile {
  std::vector<int> days;
  std::vector<double> prob;
  std::vector<double> pnl;
};

struct Moments {
  double mean = 0.0;    // (1/I) sum_i sum_n w PnL
  double second = 0.0;  // (1/I) sum_i sum_n w PnL^2
  double variance() const { return second - mean * mean; }
};

inline Moments relaxed_moments(std::span<const SettlementProfile> paths) {
  Moments m;
  for (const auto& p : paths) {
    const auto w = stop_weights(p.prob);
    for (std::size_t k = 0; k < w.size(); ++k) {
      m.mean += w[k] * p.pnl[k];
      m.second += w[k] * p.pnl[k] * p.pnl[k];
    }
  }
  m.mean /= static_cast<double>(paths.size());
  m.second /= static_cast<double>(paths.size());
  return m;
}

/// Mean-variance score mean - gamma/2 (second - mean^2).
inline double objective_meanvar(const Moments& m, double gamma) { return m.mean - 0.5 * gamma * m.variance(); }

// ---------------------------------------------------------------------------
// Differentiable rollout.

struct RolloutResult {
  std::size_t paths = 0;
  std::vector<int> days;
  std::vector<ad::Var> weights;  // per candidate day, [I x 1]
  std::vector<ad::Var> pnl;      // per candidate day, [I x 1]
  ad::Var y;                     // sum_n w PnL per path
  ad::Var z;                     // sum_n w PnL^2 per path
  ad::Var sum_y, sum_z;
  double mean = 0.0, second = 0.0;
  double variance() const { return second - mean * mean; }
};

namespace detail {
inline void require_finite(const ad::Var& v, const char* what, int day) {
  const auto vals = v.value();
  for (std::size_t i = 0; i < vals.size(); ++i)
    if (!std::isfinite(vals[i]))
      throw NumericalError(std::string("non-finite ") + what + " on path " + std::to_string(i) + ", day " +
                           std::to_string(day));
}
}  // namespace detail

/// Records the rollout of paths [begin, end) of `batch` on the policy's tape.
inline RolloutResult rollout(const TapePolicy& policy, ad::Tape& tape, const PathBatch& batch, std::size_t begin,
                             std::size_t end, const ContractSpec& spec, const MarketParams& mp) {
  if (batch.days() != mp.N) throw ContractError("rollout: batch horizon differs from N");
  if (begin >= end || end > batch.count()) throw ContractError("rollout: empty or out-of-range path slice");
  const std::size_t rows = end - begin;
  std::vector<double> buf(rows);
  auto column_at = [&](const Tensor& t, int n) {
    for (std::size_t i = 0; i < rows; ++i) buf[i] = t(begin + i, static_cast<std::size_t>(n));
    return tape.column(buf);
  };
  auto price_at = [&](int n) { return std::pair{column_at(batch.prices, n), column_at(batch.averages, n)}; };

  RolloutResult rr;
  rr.paths = rows;
  const ad::Var zero = tape.constant(Shape{rows, 1}, 0.0);
  ad::Var survival = tape.constant(Shape{rows, 1}, 1.0);
  ad::Var y = zero, z = zero;
  roll_policy<ad::Var>(
      policy, price_at, zero, spec, mp,
      [&](const State<ad::Var>& st, const ad::Var& p, const ad::Var& pnl) {
        detail::require_finite(pnl, "settlement PnL", st.n);
        const ad::Var w = survival * p;
        rr.days.push_back(st.n);
        rr.weights.push_back(w);
        rr.pnl.push_back(pnl);
        const ad::Var wp = w * pnl;
        y = y + wp;
        z = z + wp * pnl;
        survival = survival * (1.0 - p);
        return false;
      },
      [&](const State<ad::Var>& st, const ad::Var& v) { detail::require_finite(v, "trading rate", st.n); });
  rr.y = y;
  rr.z = z;
  rr.sum_y = ad::sum(y);
  rr.sum_z = ad::sum(z);
  rr.mean = rr.sum_y.item() / static_cast<double>(rows);
  rr.second = rr.sum_z.item() / static_cast<double>(rows);
  return rr;
}

/// The mean-variance estimator recorded on the tape (full expression, no stop-gradients).
inline ad::Var objective_meanvar(const RolloutResult& rr, double gamma) {
  const ad::Var m1 = ad::mean(rr.y);
  const ad::Var m2 = ad::mean(rr.z);
  return m1 - (m2 - square(m1)) * (0.5 * gamma);
}

struct ObjectiveGradient {
  double J = 0.0;
  Moments moments;
  ParamStore grad;  // scale * dJ/dparams
};

/// J and its gradient over `batch`, split into chunks of `chunk` paths with one
/// tape each. With m1 = (1/I) sum y and m2 = (1/I) sum z, dJ/dy_i = (1 + gamma m1)/I
/// and dJ/dz_i = -gamma/(2I); each chunk's tape is seeded with those weights and
/// chunk gradients are summed in chunk order.
inline ObjectiveGradient objective_gradient(const ParamStore& params, const PathBatch& batch,
                                            const ContractSpec& spec, const MarketParams& mp, double gamma,
                                            std::size_t chunk = 512, unsigned threads = 1, double scale = 1.0) {
  const std::size_t I = batch.count();
  chunk = std::max<std::size_t>(1, std::min(chunk, I));
  const std::size_t chunks = (I + chunk - 1) / chunk;
  std::vector<std::unique_ptr<ad::Tape>> tapes(chunks);
  std::vector<std::unique_ptr<TapePolicy>> policies(chunks);
  std::vector<RolloutResult> results(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    tapes[c] = std::make_unique<ad::Tape>();
    policies[c] = std::make_unique<TapePolicy>(*tapes[c], params, spec, mp, true);
    results[c] = rollout(*policies[c], *tapes[c], batch, c * chunk, std::min(I, (c + 1) * chunk), spec, mp);
  });

  ObjectiveGradient out;
  double sy = 0.0, sz = 0.0;
  for (const auto& r : results) {
    sy += r.sum_y.item();
    sz += r.sum_z.item();
  }
  out.moments.mean = sy / static_cast<double>(I);
  out.moments.second = sz / static_cast<double>(I);
  out.J = objective_meanvar(out.moments, gamma);

  const double a = scale * (1.0 + gamma * out.moments.mean) / static_cast<double>(I);
  const double b = -scale * 0.5 * gamma / static_cast<double>(I);
  std::vector<ParamStore> grads(chunks, zero_gradients(params));
  parallel_for(chunks, threads, [&](std::size_t c) {
    const ad::Var root = results[c].sum_y * a + results[c].sum_z * b;
    accumulate_gradients(*policies[c], tapes[c]->backward(root), grads[c]);
    tapes[c].reset();
  });
  out.grad = zero_gradients(params);
  for (const auto& g : grads) {
    std::vector<Tensor*> dst;
    out.grad.for_each([&](const std::string&, Tensor& t) { dst.push_back(&t); });
    std::size_t k = 0;
    g.for_each([&](const std::string&, const Tensor& t) {
      for (std::size_t i = 0; i < t.size(); ++i) (*dst[k])[i] += t[i];
      ++k;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation on plain values.

template <Policy P>
SettlementProfile settlement_profile(const P& policy, const PathBatch& batch, std::size_t i, const ContractSpec& spec,
                                     const MarketParams& mp) {
  if (batch.days() != mp.N) throw ContractError("batch horizon differs from N");
  SettlementProfile prof;
  roll_policy<double>(
      policy, [&](int n) { return std::pair{batch.S(i, n), batch.A(i, n)}; }, 0.0, spec, mp,
      [&](const State<double>& st, double p, double pnl) {
        prof.days.push_back(st.n);
        prof.prob.push_back(p);
        prof.pnl.push_back(pnl);
        return false;
      },
      [](const State<double>&, double) {});
  return prof;
}

enum class EvalMode { Relaxed, Sampled };

inline std::string to_string(EvalMode m) { return m == EvalMode::Relaxed ? "relaxed" : "sampled"; }

struct EvalReport {
  EvalMode mode = EvalMode::Relaxed;
  std::size_t paths = 0;
  std::size_t draws = 1;
  double mean = 0.0;
  double variance = 0.0;
  double J = 0.0;
  double J_normalized = 0.0;  // J / (Q S0) or J / F
  double mean_stderr = 0.0;
};

/// Relaxed mode scores the stopping weights exactly; sampled mode draws
/// uniforms e_n and settles at the first candidate day with e_n <= p_n.
/// Path i's uniforms come from substream (seed, i).
template <Policy P>
EvalReport evaluate_policy(const P& policy, const ContractSpec& spec, const MarketParams& mp, const PathBatch& paths,
                           EvalMode mode, double gamma, std::uint64_t seed = 0, std::size_t draws = 1,
                           unsigned threads = 1) {
  const std::size_t I = paths.count();
  if (I == 0) throw ContractError("evaluate: empty batch");
  if (draws < 1) draws = 1;
  // Per path: sum of outcomes and of squared outcomes (relaxed: weighted; sampled: over draws).
  std::vector<double> s1(I), s2(I), per_path(I);
  parallel_for(I, threads, [&](std::size_t i) {
    const auto prof = settlement_profile(policy, paths, i, spec, mp);
    if (mode == EvalMode::Relaxed) {
      const auto w = stop_weights(prof.prob);
      for (std::size_t k = 0; k < w.size(); ++k) {
        s1[i] += w[k] * prof.pnl[k];
        s2[i] += w[k] * prof.pnl[k] * prof.pnl[k];
      }
      per_path[i] = s1[i];
    } else {
      RandomStream rng(seed, i);
      for (std::size_t r = 0; r < draws; ++r) {
        double realized = prof.pnl.back();
        for (std::size_t k = 0; k < prof.prob.size(); ++k)
          if (rng.uniform_open() <= prof.prob[k]) {
            realized = prof.pnl[k];
            break;
          }
        s1[i] += realized;
        s2[i] += realized * realized;
      }
      per_path[i] = s1[i] / static_cast<double>(draws);
    }
  });

  const double count = static_cast<double>(I) * static_cast<double>(mode == EvalMode::Relaxed ? 1 : draws);
  Moments m;
  for (std::size_t i = 0; i < I; ++i) {
    m.mean += s1[i];
    m.second += s2[i];
  }
  m.mean /= count;
  m.second /= count;

  EvalReport rep;
  rep.mode = mode;
  rep.paths = I;
  rep.draws = mode == EvalMode::Relaxed ? 1 : draws;
  rep.mean = m.mean;
  rep.variance = m.variance();
  rep.J = objective_meanvar(m, gamma);
  rep.J_normalized = rep.J / spec.normalizer(mp.S0);
  double spread = 0.0;
  for (double x : per_path) spread += (x - m.mean) * (x - m.mean);
  rep.mean_stderr = I > 1 ? std::sqrt(spread / static_cast<double>(I - 1) / static_cast<double>(I)) : 0.0;
  return rep;
}

inline EvalReport evaluate(const ParamStore& params, const ContractSpec& spec, const MarketParams& mp,
                           const PathBatch& paths, EvalMode mode, double gamma, std::uint64_t seed = 0,
                           std::size_t draws = 1, unsigned threads = 1) {
  return evaluate_policy(NeuralPolicy(params, spec, mp), spec, mp, paths, mode, gamma, seed, draws, threads);
}

// ---------------------------------------------------------------------------
// Strategy traces.

struct TraceRow {
  std::size_t path_id = 0;
  int day = 0;
  double price = 0.0, average = 0.0, inventory = 0.0, cash = 0.0;
  double trade = 0.0;
  double stop_prob = 0.0;
  bool stopped = false;
};

/// Day-by-day trace of one path under hard (sampled) stopping; ends on the settlement day.
template <Policy P>
std::vector<TraceRow> trace_path(const P& policy, const PathBatch& batch, std::size_t i, const ContractSpec& spec,
                                 const MarketParams& mp, std::uint64_t seed) {
  std::vector<TraceRow> rows;
  RandomStream rng(seed, i);
  auto row_for = [&](const State<double>& st) -> TraceRow& {
    if (rows.empty() || rows.back().day != st.n)
      rows.push_back({i, st.n, st.S, st.A, st.q, st.X, 0.0, 0.0, false});
    return rows.back();
  };
  roll_policy<double>(
      policy, [&](int n) { return std::pair{batch.S(i, n), batch.A(i, n)}; }, 0.0, spec, mp,
      [&](const State<double>& st, double p, double) {
        TraceRow& r = row_for(st);
        r.stop_prob = p;
        r.stopped = rng.uniform_open() <= p;
        return r.stopped;
      },
      [&](const State<double>& st, double v) { row_for(st).trade = v; });
  return rows;
}

// ---------------------------------------------------------------------------
// Training.

enum class Phase { Pretrain, Main };
inline std::string to_string(Phase p) { return p == Phase::Pretrain ? "pretrain" : "main"; }

struct TrainConfig {
  double gamma = 2.5e-7;
  std::size_t batch_I = 512;
  int epochs = 1000;
  int pretrain_epochs = 100;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  /// Terminal-penalty coefficient used while pretraining, if set.
  std::optional<double> pretrain_penalty_C;
  std::size_t heldout_paths = 16384;
  int heldout_every = 50;
  std::size_t chunk_paths = 512;
  InitOptions init;
  unsigned threads = 1;

  void validate() const {
    if (!(gamma >= 0.0)) throw ConfigError("gamma", "must be nonnegative");
    if (batch_I < 2) throw ConfigError("batch_I", "must be at least 2");
    if (epochs < 0) throw ConfigError("epochs", "must be nonnegative");
    if (pretrain_epochs < 0 || pretrain_epochs > epochs)
      throw ConfigError("pretrain_epochs", "must lie in [0, epochs]");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate", "must be positive");
    if (pretrain_penalty_C && !(*pretrain_penalty_C >= 0.0))
      throw ConfigError("pretrain_penalty_C", "must be nonnegative");
    if (heldout_paths < 2) throw ConfigError("heldout_paths", "must be at least 2");
    if (heldout_every < 1) throw ConfigError("heldout_every", "must be positive");
    if (chunk_paths < 1) throw ConfigError("chunk_paths", "must be positive");
    if (init.hidden < 1) throw ConfigError("hidden", "must be positive");
    if (!(init.nu > 0.0)) throw ConfigError("init_nu", "must be positive");
  }
};

/// Seeds derived from TrainConfig::seed.
inline std::uint64_t epoch_seed(std::uint64_t seed, int epoch) { return mix_seed(seed, 0x10000ULL + epoch); }
inline std::uint64_t heldout_seed(std::uint64_t seed) { return mix_seed(seed, 0xFEED); }

/// Learning-curve units: basis points of Q S0 for fixed shares, fraction of F otherwise.
inline double curve_scale(const ContractSpec& spec, const MarketParams& mp) {
  const double unit = spec.kind() == ContractKind::FixedShares ? 1.0e4 : 1.0;
  return unit / spec.normalizer(mp.S0);
}

struct CurveRow {
  int epoch = 0;
  Phase phase = Phase::Main;
  double J = 0.0;             // EUR, on the epoch's training batch
  double J_normalized = 0.0;  // curve units
  std::optional<double> J_heldout;  // EUR, full objective on the held-out batch
};

struct TrainResult {
  ParamStore params;
  std::vector<CurveRow> curve;
  EvalReport heldout;
  bool aborted = false;
  std::string message;
};

using CheckpointFn = std::function<void(const ParamStore&, int epoch)>;

/// Pretraining epochs use gamma = 0 (and pretrain_penalty_C when set); every
/// epoch draws a fresh batch from substream epoch_seed(seed, epoch). On a
/// non-finite objective or gradient the run stops and returns the last good
/// parameters with aborted = true.
inline TrainResult train(const ContractSpec& spec, const MarketParams& mp, const TrainConfig& tc,
                         const CheckpointFn& on_checkpoint = {}, int checkpoint_every = 0) {
  mp.validate();
  spec.validate(mp.N);
  tc.validate();

  TrainResult res;
  res.params = init_params(spec.kind(), tc.seed, tc.init);
  const PathBatch heldout = simulate_paths(mp, tc.heldout_paths, heldout_seed(tc.seed));
  const double norm = spec.normalizer(mp.S0);
  const double units = curve_scale(spec, mp);
  AdamConfig adam_cfg;
  adam_cfg.learning_rate = tc.learning_rate;
  AdamState adam = AdamState::zeros_like(res.params);

  ContractSpec pre_spec = spec;
  if (tc.pretrain_penalty_C) pre_spec.penalty_C = *tc.pretrain_penalty_C;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const Phase phase = epoch < tc.pretrain_epochs ? Phase::Pretrain : Phase::Main;
    const ContractSpec& s = phase == Phase::Pretrain ? pre_spec : spec;
    const double gamma = phase == Phase::Pretrain ? 0.0 : tc.gamma;
    const PathBatch batch = simulate_paths(mp, tc.batch_I, epoch_seed(tc.seed, epoch));

    ParamStore before = res.params;
    std::optional<std::string> failure;
    try {
      const auto og = objective_gradient(res.params, batch, s, mp, gamma, tc.chunk_paths, tc.threads, 1.0 / norm);
      if (!std::isfinite(og.J)) throw NumericalError("non-finite objective");
      adam_step(res.params, og.grad, adam, adam_cfg);
      CurveRow row{epoch, phase, og.J, og.J * units, std::nullopt};
      if ((epoch + 1) % tc.heldout_every == 0 || epoch + 1 == tc.epochs)
        row.J_heldout = evaluate(res.params, spec, mp, heldout, EvalMode::Relaxed, tc.gamma, 0, 1, tc.threads).J;
      res.curve.push_back(row);
    } catch (const NumericalError& e) {
      failure = e.what();
    } catch (const DomainError& e) {
      failure = e.what();
    }
    if (failure) {
      res.params = std::move(before);
      res.aborted = true;
      res.message = "epoch " + std::to_string(epoch) + ": " + *failure;
      break;
    }
    if (on_checkpoint && checkpoint_every > 0 && (epoch + 1) % checkpoint_every == 0)
      on_checkpoint(res.params, epoch + 1);
  }
  try {
    res.heldout = evaluate(res.params, spec, mp, heldout, EvalMode::Relaxed, tc.gamma, 0, 1, tc.threads);
  } catch (const DomainError& e) {
    if (!res.aborted) throw;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    res.heldout.paths = heldout.count();
    res.heldout.mean = res.heldout.variance = res.heldout.J = res.heldout.J_normalized = nan;
    res.heldout.mean_stderr = nan;
    res.message += "; held-out evaluation failed: " + std::string(e.what());
  }
  return res;
}

}  // namespace buyback
