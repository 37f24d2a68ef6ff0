// buyback: train, evaluate and inspect neural buyback-contract policies.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "buyback/commands.hpp"

int main(int argc, char** argv) {
  using namespace buyback;
  CLI::App app{"Neural execution and exercise policies for share buyback contracts"};
  app.require_subcommand(1);

  CommonOverrides ov;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> outdir;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--output-dir", outdir, "Override [output] dir");
  };

  std::string config;
  auto* train = app.add_subcommand("train", "Train a policy and write curve, checkpoint and report");
  train->add_option("config", config, "Run config (.ini)")->required();
  common(train);

  EvaluateArgs ev;
  std::string mode = "relaxed";
  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on held-out paths");
  evaluate->add_option("config", ev.config)->required();
  evaluate->add_option("checkpoint", ev.checkpoint)->required();
  evaluate->add_option("--mode", mode, "relaxed or sampled")->check(CLI::IsMember({"relaxed", "sampled"}));
  evaluate->add_option("--draws", ev.draws, "Uniform draws per path in sampled mode");
  evaluate->add_option("--paths", ev.paths, "Number of held-out paths");
  evaluate->add_option("--report", ev.report, "Also write the JSON report here");
  common(evaluate);

  TrajectoryArgs tr;
  auto* traj = app.add_subcommand("trajectory-report", "Strategy trace on a stylized or supplied path");
  traj->add_option("config", tr.config)->required();
  traj->add_option("checkpoint", tr.checkpoint)->required();
  traj->add_option("--kind", tr.kind, "up, down, v-shape or file")
      ->check(CLI::IsMember({"up", "down", "v-shape", "file"}));
  traj->add_option("--paths", tr.paths_file, "Path CSV for --kind file");
  traj->add_option("--noise", tr.noise, "Std dev (EUR) of daily noise around stylized paths");
  traj->add_option("-o,--output", tr.output, "Trace CSV");
  common(traj);

  SweepArgs sw;
  auto* sweep = app.add_subcommand("sweep", "Train one model per parameter value");
  sweep->add_option("config", sw.config)->required();
  sweep->add_option("--param", sw.param, "eta or gamma")->required()->check(CLI::IsMember({"eta", "gamma"}));
  sweep->add_option("--values", sw.values, "Parameter values")->required()->delimiter(',');
  sweep->add_option("--restarts", sw.restarts, "Seeded restarts per value");
  sweep->add_option("-o,--output", sw.output, "Table CSV");
  common(sweep);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate-paths", "Export simulated price paths");
  simulate->add_option("config", sim.config)->required();
  simulate->add_option("--count", sim.count, "Number of paths");
  simulate->add_option("-o,--output", sim.output, "Path CSV");
  common(simulate);

  GradCheckArgs gc;
  auto* grad = app.add_subcommand("grad-check", "Rollout gradients vs finite differences on a 3-day toy market");
  grad->add_option("--first-seed", gc.first_seed);
  grad->add_option("--seeds", gc.seeds);
  grad->add_option("--tolerance", gc.tolerance);

  std::uint64_t oracle_seed = 1;
  std::optional<std::string> jsonl;
  auto* oracle = app.add_subcommand("oracle-check", "Estimators vs brute-force oracles");
  oracle->add_option("--seed", oracle_seed);
  oracle->add_option("--jsonl", jsonl, "JSON-lines report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  ov.seed = seed;
  ov.output_dir = outdir;

  if (*train) return cmd_train(config, ov, std::cout, std::cerr);
  if (*evaluate) {
    ev.mode = mode == "sampled" ? EvalMode::Sampled : EvalMode::Relaxed;
    return cmd_evaluate(ev, ov, std::cout, std::cerr);
  }
  if (*traj) return cmd_trajectory_report(tr, ov, std::cout, std::cerr);
  if (*sweep) return cmd_sweep(sw, ov, std::cout, std::cerr);
  if (*simulate) return cmd_simulate_paths(sim, ov, std::cout, std::cerr);
  if (*grad) return cmd_grad_check(gc, std::cout, std::cerr);
  if (*oracle) return cmd_oracle_check(oracle_seed, jsonl, std::cout, std::cerr);
  return kExitConfig;
}
