#pragma once

// Subcommands behind the `buyback` executable. Each returns a process exit
// code: 0 ok, 2 config error, 3 artifact mismatch, 4 numerical failure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "buyback/config.hpp"
#include "buyback/gradcheck.hpp"
#include "buyback/io.hpp"
#include "buyback/oracle.hpp"
#include "buyback/training.hpp"

#ifndef BUYBACK_CODE_VERSION
#define BUYBACK_CODE_VERSION "unknown"
#endif

namespace buyback {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitMismatch = 3, kExitNumerical = 4 };

inline constexpr const char* code_version() { return BUYBACK_CODE_VERSION; }

/// Maps library exceptions onto exit codes.
inline int run_guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ArtifactMismatch& e) {
    err << "artifact mismatch: " << e.what() << '\n';
    return kExitMismatch;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DomainError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  }
}

struct CommonOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
};

inline RunConfig load_with_overrides(const std::string& path, const CommonOverrides& ov) {
  RunConfig rc = load_run_config(path);
  if (ov.seed) rc.training.seed = *ov.seed;
  if (ov.output_dir) rc.output_dir = *ov.output_dir;
  rc.training.threads = thread_count_from_env();
  return rc;
}

inline std::string manifest_text(const RunConfig& rc) {
  return to_ini(rc) + "\n[manifest]\ncode_version = " + code_version() + "\n";
}

struct TrainOutcome {
  TrainResult result;
  std::filesystem::path dir;
};

/// Trains and writes manifest.ini, learning_curve.csv, model.ckpt, report.json
/// (and model_epoch_K.ckpt every checkpoint_every epochs) under `dir`.
inline TrainOutcome train_to_dir(const RunConfig& rc, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto f = open_output(dir / "manifest.ini");
    f << manifest_text(rc);
  }
  CheckpointFn on_ckpt = [&](const ParamStore& p, int epoch) {
    save_checkpoint(dir / ("model_epoch_" + std::to_string(epoch) + ".ckpt"), p);
  };
  TrainOutcome out{train(rc.contract, rc.market, rc.training, on_ckpt, rc.checkpoint_every), dir};
  {
    auto f = open_output(dir / "learning_curve.csv");
    write_curve_csv(f, out.result.curve);
  }
  save_checkpoint(dir / "model.ckpt", out.result.params);
  nlohmann::ordered_json rep = report_json(out.result.heldout);
  rep["contract"] = to_string(rc.contract.kind());
  rep["tag"] = rc.tag;
  rep["seed"] = rc.training.seed;
  rep["epochs_completed"] = out.result.curve.size();
  rep["aborted"] = out.result.aborted;
  if (out.result.aborted) rep["abort_reason"] = out.result.message;
  {
    auto f = open_output(dir / "report.json");
    f << rep.dump(2) << '\n';
  }
  return out;
}

/// Reads back a run written by train_to_dir (curve, parameters, held-out report).
inline TrainOutcome load_run(const std::filesystem::path& dir) {
  TrainOutcome out;
  out.dir = dir;
  out.result.params = load_checkpoint(dir / "model.ckpt");
  std::ifstream rf(dir / "report.json");
  if (!rf) throw ArtifactMismatch("missing report.json in '" + dir.string() + "'");
  nlohmann::json rep;
  try {
    rep = nlohmann::json::parse(rf);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactMismatch("report.json: " + std::string(e.what()));
  }
  auto num = [&](const char* k) {
    const auto& v = rep.at(k);
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  EvalReport& h = out.result.heldout;
  h.mode = rep.at("mode") == "sampled" ? EvalMode::Sampled : EvalMode::Relaxed;
  h.paths = rep.at("paths").get<std::size_t>();
  h.draws = rep.at("draws").get<std::size_t>();
  h.mean = num("mean");
  h.variance = num("variance");
  h.J = num("J");
  h.J_normalized = num("J_normalized");
  h.mean_stderr = num("mean_stderr");
  out.result.aborted = rep.value("aborted", false);
  out.result.message = rep.value("abort_reason", std::string());

  std::ifstream cf(dir / "learning_curve.csv");
  std::string line;
  if (!std::getline(cf, line) || line != "epoch,phase,J,J_normalized,J_heldout")
    throw ArtifactMismatch("learning_curve.csv: bad header");
  while (std::getline(cf, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (cells.size() == 4) cells.emplace_back();
    if (cells.size() != 5) throw ArtifactMismatch("learning_curve.csv: bad row '" + line + "'");
    CurveRow row;
    row.epoch = std::stoi(cells[0]);
    row.phase = cells[1] == "pretrain" ? Phase::Pretrain : Phase::Main;
    row.J = std::stod(cells[2]);
    row.J_normalized = std::stod(cells[3]);
    if (!cells[4].empty()) row.J_heldout = std::stod(cells[4]);
    out.result.curve.push_back(row);
  }
  return out;
}

using Trainer = std::function<TrainOutcome(const RunConfig&, const std::filesystem::path&)>;

inline int cmd_train(const std::string& config_path, const CommonOverrides& ov, std::ostream& out,
                     std::ostream& err) {
  return run_guarded(err, [&] {
    const RunConfig rc = load_with_overrides(config_path, ov);
    const auto res = train_to_dir(rc, rc.output_dir);
    out << "trained " << res.result.curve.size() << " epochs; held-out J = " << fmt17(res.result.heldout.J)
        << " EUR, J_normalized = " << fmt17(res.result.heldout.J_normalized) << '\n';
    out << "outputs in " << res.dir.string() << '\n';
    if (res.result.aborted) {
      err << "numerical failure: " << res.result.message << " (last good parameters saved)\n";
      return static_cast<int>(kExitNumerical);
    }
    return static_cast<int>(kExitOk);
  });
}

struct EvaluateArgs {
  std::string config;
  std::string checkpoint;
  EvalMode mode = EvalMode::Relaxed;
  std::size_t draws = 1;
  std::optional<std::size_t> paths;
  std::optional<std::string> report;
};

/// Scores a checkpoint on the held-out batch of the config's seed.
inline int cmd_evaluate(const EvaluateArgs& a, const CommonOverrides& ov, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    const RunConfig rc = load_with_overrides(a.config, ov);
    const ParamStore params = load_checkpoint(a.checkpoint);
    const std::size_t count = a.paths.value_or(rc.training.heldout_paths);
    const PathBatch batch = simulate_paths(rc.market, count, heldout_seed(rc.training.seed));
    const EvalReport r = evaluate(params, rc.contract, rc.market, batch, a.mode, rc.training.gamma,
                                  mix_seed(rc.training.seed, 0xE7A1), a.draws, rc.training.threads);
    const auto j = report_json(r).dump(2);
    out << j << '\n';
    if (a.report) {
      auto f = open_output(*a.report);
      f << j << '\n';
    }
    return static_cast<int>(kExitOk);
  });
}

struct TrajectoryArgs {
  std::string config;
  std::string checkpoint;
  std::string kind = "up";  // up | down | v-shape | file
  std::optional<std::string> paths_file;
  double noise = 0.0;
  std::string output = "trace.csv";
};

inline int cmd_trajectory_report(const TrajectoryArgs& a, const CommonOverrides& ov, std::ostream& out,
                                 std::ostream& err) {
  return run_guarded(err, [&] {
    const RunConfig rc = load_with_overrides(a.config, ov);
    const ParamStore params = load_checkpoint(a.checkpoint);
    const NeuralPolicy pol(params, rc.contract, rc.market);
    PathBatch batch;
    StylizedNoise noise{a.noise, rc.training.seed};
    if (a.kind == "up") {
      batch = stylized_paths(rc.market, StylizedKind::Up, noise);
    } else if (a.kind == "down") {
      batch = stylized_paths(rc.market, StylizedKind::Down, noise);
    } else if (a.kind == "v-shape") {
      batch = stylized_paths(rc.market, StylizedKind::VShape, noise);
    } else if (a.kind == "file") {
      if (!a.paths_file) throw ConfigError("paths", "kind=file needs --paths");
      std::ifstream f(*a.paths_file);
      if (!f) throw ConfigError("paths", "cannot open '" + *a.paths_file + "'");
      batch = read_paths_csv(f);
      if (batch.days() != rc.market.N) throw ArtifactMismatch("path file horizon differs from N");
    } else {
      throw ConfigError("kind", "expected up, down, v-shape or file, got '" + a.kind + "'");
    }
    auto f = open_output(a.output);
    const std::uint64_t seed = mix_seed(rc.training.seed, 0x75ACE);
    for (std::size_t i = 0; i < batch.count(); ++i)
      write_trace_csv(f, trace_path(pol, batch, i, rc.contract, rc.market, seed), i == 0);
    out << "wrote " << batch.count() << " trace(s) to " << a.output << '\n';
    return static_cast<int>(kExitOk);
  });
}

struct SweepArgs {
  std::string config;
  std::string param;  // eta | gamma
  std::vector<double> values;
  int restarts = 3;
  std::string output = "sweep.csv";
};

struct SweepPoint {
  double value = 0.0;
  double J_normalized = 0.0;  // best held-out J / normalizer over restarts
  std::uint64_t best_seed = 0;
  std::vector<double> restart_scores;
};

/// Restart r of each point trains with seed (config seed + r); the point's
/// score is the best held-out J_normalized.
inline std::vector<SweepPoint> run_sweep(const RunConfig& base, const std::string& param,
                                         const std::vector<double>& values, int restarts,
                                         const std::filesystem::path& dir, std::ostream& log,
                                         const Trainer& trainer = train_to_dir) {
  if (param != "eta" && param != "gamma") throw ConfigError("param", "expected eta or gamma, got '" + param + "'");
  if (values.empty()) throw ConfigError("values", "need at least one value");
  if (restarts < 1) throw ConfigError("restarts", "must be positive");
  std::vector<SweepPoint> points;
  for (double v : values) {
    RunConfig rc = base;
    if (param == "eta")
      rc.market.eta = v;
    else
      rc.training.gamma = v;
    rc.validate();
    SweepPoint pt;
    pt.value = v;
    pt.J_normalized = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
      RunConfig rr = rc;
      rr.training.seed = base.training.seed + static_cast<std::uint64_t>(r);
      const auto sub = dir / (param + "_" + fmt17(v)) / ("restart_" + std::to_string(r));
      rr.output_dir = sub.string();
      const auto res = trainer(rr, sub);
      const double score = res.result.heldout.J_normalized;
      pt.restart_scores.push_back(score);
      log << param << '=' << fmt17(v) << " restart " << r << ": J_normalized = " << fmt17(score)
          << (res.result.aborted ? " (aborted)" : "") << '\n';
      if (score > pt.J_normalized) {
        pt.J_normalized = score;
        pt.best_seed = rr.training.seed;
      }
    }
    points.push_back(pt);
  }
  return points;
}

inline void write_sweep_csv(std::ostream& out, const std::string& param, const std::vector<SweepPoint>& pts) {
  out << "param,value,J_normalized\n";
  for (const auto& p : pts) out << param << ',' << fmt17(p.value) << ',' << fmt17(p.J_normalized) << '\n';
}

inline int cmd_sweep(const SweepArgs& a, const CommonOverrides& ov, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    const RunConfig rc = load_with_overrides(a.config, ov);
    const auto pts = run_sweep(rc, a.param, a.values, a.restarts, rc.output_dir, out);
    auto f = open_output(a.output);
    write_sweep_csv(f, a.param, pts);
    write_sweep_csv(out, a.param, pts);
    return static_cast<int>(kExitOk);
  });
}

struct SimulateArgs {
  std::string config;
  std::size_t count = 1000;
  std::string output = "paths.csv";
};

inline int cmd_simulate_paths(const SimulateArgs& a, const CommonOverrides& ov, std::ostream& out,
                              std::ostream& err) {
  return run_guarded(err, [&] {
    const RunConfig rc = load_with_overrides(a.config, ov);
    if (a.count < 1) throw ConfigError("count", "must be positive");
    const PathBatch b = simulate_paths(rc.market, a.count, rc.training.seed);
    auto f = open_output(a.output);
    write_paths_csv(f, b);
    out << "wrote " << a.count << " paths to " << a.output << '\n';
    return static_cast<int>(kExitOk);
  });
}

struct GradCheckArgs {
  std::uint64_t first_seed = 1;
  int seeds = 100;
  double tolerance = 1e-5;
};

inline int cmd_grad_check(const GradCheckArgs& a, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (int k = 0; k < a.seeds; ++k) {
      const auto r = gradient_check(a.first_seed + static_cast<std::uint64_t>(k));
      worst = std::max(worst, r.max_rel_error);
      checked += r.checked;
      skipped += r.skipped;
      out << "seed " << r.seed << " " << to_string(r.kind) << ": rel err " << fmt17(r.max_rel_error) << " ("
          << r.checked << " checked, " << r.skipped << " near kinks)\n";
    }
    out << "max rel err " << fmt17(worst) << " over " << checked << " coordinates (" << skipped
        << " skipped); tolerance " << fmt17(a.tolerance) << '\n';
    return static_cast<int>(worst < a.tolerance ? kExitOk : kExitNumerical);
  });
}

struct OracleRow {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double expected = 0.0;
  double tolerance = 0.0;
};

/// Quick self-checks of the estimators against the brute-force oracles.
inline std::vector<OracleRow> oracle_checks(std::uint64_t seed) {
  std::vector<OracleRow> rows;
  auto add = [&](std::string name, double value, double expected, double tol) {
    rows.push_back({std::move(name), std::abs(value - expected) <= tol, value, expected, tol});
  };

  MarketParams flat;
  flat.sigma = 0.0;
  const ContractSpec fs = reference_fixed_shares();
  const double naive_cost = oracle::naive_execution_cost(2.0e7, flat);
  {
    const ParamStore naive = naive_params(ContractKind::FixedShares);
    const auto rep = evaluate(naive, fs, flat, simulate_paths(flat, 4, seed), EvalMode::Relaxed, 0.0);
    add("naive zero-vol PnL vs closed form", rep.mean, -naive_cost, 1e-6 * naive_cost);
  }
  {
    ContractSpec stiff = fs;
    stiff.penalty_C = 1.0;
    const auto zv = oracle::zero_vol_schedule(stiff, flat);
    add("zero-vol optimum cost, large C", zv.execution_cost, naive_cost, 1e-6 * naive_cost);
    add("zero-vol gradient norm", zv.grad_norm, 0.0, 1e-10);
  }
  {
    const std::vector<std::vector<double>> seqs = {{1.0}, {0.5, 1.0}, {0.3, 0.4, 1.0}};
    for (std::size_t k = 0; k < seqs.size(); ++k) {
      const auto r = oracle::bernoulli_identity_check(seqs[k], 1000000, mix_seed(seed, k));
      add("bernoulli identity p-seq " + std::to_string(k), r.max_deviation, 0.0, 0.002);
    }
  }
  MarketParams tree;
  tree.N = 10;
  tree.set_constant_volume(4.0e6);
  ContractSpec small = fs;
  std::get<FixedShares>(small.terms).Q = 2.0e7 * 10.0 / 63.0;
  small.set_exercise_range(3, 9);
  {
    const oracle::TriggerPolicy pol{small, tree, 1.2, 44.0};
    const auto ex = oracle::enumerate_tree_objective(pol, small, tree, 0.0);
    const double bi = oracle::backward_induction_value(pol, small, tree);
    add("tree enumeration vs backward induction", ex.mean, bi, 1e-9 * std::abs(bi) + 1e-9);
  }
  {
    const ParamStore p = init_params(ContractKind::FixedShares, seed, InitOptions{16, 5.0, 0.3, 0.5});
    const NeuralPolicy pol(p, small, tree);
    const double gamma = 2.5e-7 * 63.0 / 10.0;
    const auto ex = oracle::enumerate_tree_objective(pol, small, tree, gamma);
    const auto mc = evaluate(p, small, tree, oracle::simulate_binomial_paths(tree, 100000, seed), EvalMode::Relaxed,
                             gamma);
    add("binomial MC mean within 4 SE of enumeration", mc.mean, ex.mean, 4.0 * mc.mean_stderr);
  }
  return rows;
}

inline int cmd_oracle_check(std::uint64_t seed, const std::optional<std::string>& jsonl, std::ostream& out,
                            std::ostream& err) {
  return run_guarded(err, [&] {
    const auto rows = oracle_checks(seed);
    std::optional<std::ofstream> f;
    if (jsonl) f.emplace(open_output(*jsonl));
    bool all = true;
    for (const auto& r : rows) {
      all = all && r.pass;
      char line[256];
      std::snprintf(line, sizeof line, "%-46s %s  value=%.10g expected=%.10g tol=%.3g", r.name.c_str(),
                    r.pass ? "PASS" : "FAIL", r.value, r.expected, r.tolerance);
      out << line << '\n';
      if (f) {
        nlohmann::ordered_json j;
        j["check"] = r.name;
        j["pass"] = r.pass;
        j["value"] = r.value;
        j["expected"] = r.expected;
        j["tolerance"] = r.tolerance;
        *f << j.dump() << '\n';
      }
    }
    return static_cast<int>(all ? kExitOk : kExitNumerical);
  });
}

}  // namespace buyback
