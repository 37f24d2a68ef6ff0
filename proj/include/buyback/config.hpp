#pragma once

// Run configuration: a sectioned key = value file.
//
//   [market]    S0 sigma N dt volume eta cost_exponent dynamics paths_file
//   [contract]  kind Q F zeta alpha kappa beta exercise_set rho_min rho_max penalty_C
//   [training]  gamma batch_I epochs pretrain_epochs learning_rate seed pretrain_penalty_C
//               heldout_paths heldout_every chunk_paths hidden init_nu init_output_scale
//               init_stop_bias checkpoint_every
//   [output]    dir tag
//   [manifest]  code_version (written by runs, ignored on input)
//
// Every key is optional (defaults are the fixed-shares reference case).
// Unknown sections or keys are rejected. `volume` is one number or a
// comma-separated list of N numbers; `exercise_set` is `[first, last]`, a
// comma list `22, 30, 40` or `none`; `rho_min`/`rho_max` accept `inf`/`-inf`.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "buyback/contracts.hpp"
#include "buyback/errors.hpp"
#include "buyback/market.hpp"
#include "buyback/training.hpp"

namespace buyback {

struct RunConfig {
  MarketParams market;
  ContractSpec contract = reference_fixed_shares();
  TrainConfig training;
  int checkpoint_every = 0;
  std::string output_dir = "out";
  std::string tag = "run";
  std::string paths_file;

  void validate() const {
    market.validate();
    contract.validate(market.N);
    training.validate();
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every", "must be nonnegative");
    if (output_dir.empty()) throw ConfigError("dir", "must not be empty");
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& field, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v))
    throw ConfigError(field, "expected a number, got '" + raw + "'");
  return v;
}

inline long long to_int(const std::string& field, const std::string& raw) {
  const std::string s = trim(raw);
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE)
    throw ConfigError(field, "expected an integer, got '" + raw + "'");
  return v;
}

inline std::vector<double> to_list(const std::string& field, const std::string& raw) {
  std::vector<double> out;
  std::stringstream ss(raw);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(to_double(field, tok));
  if (out.empty()) throw ConfigError(field, "empty list");
  return out;
}

inline std::vector<int> parse_exercise_set(const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "none" || s == "[]") return {};
  std::vector<int> days;
  if (!s.empty() && s.front() == '[') {
    if (s.back() != ']') throw ConfigError("exercise_set", "expected '[first, last]'");
    const auto inner = s.substr(1, s.size() - 2);
    const auto comma = inner.find(',');
    if (comma == std::string::npos) throw ConfigError("exercise_set", "expected '[first, last]'");
    const auto first = to_int("exercise_set", inner.substr(0, comma));
    const auto last = to_int("exercise_set", inner.substr(comma + 1));
    if (first > last) throw ConfigError("exercise_set", "first day exceeds last day");
    for (auto n = first; n <= last; ++n) days.push_back(static_cast<int>(n));
    return days;
  }
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) days.push_back(static_cast<int>(to_int("exercise_set", tok)));
  return days;
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Exercise set as `[first, last]` when contiguous, a comma list otherwise.
inline std::string format_exercise_set(const std::vector<int>& days) {
  if (days.empty()) return "none";
  bool contiguous = true;
  for (std::size_t k = 1; k < days.size(); ++k) contiguous = contiguous && days[k] == days[k - 1] + 1;
  if (contiguous) return "[" + std::to_string(days.front()) + ", " + std::to_string(days.back()) + "]";
  std::string s;
  for (std::size_t k = 0; k < days.size(); ++k) s += (k ? ", " : "") + std::to_string(days[k]);
  return s;
}

}  // namespace config_detail

/// Parses a config stream. Relative `paths_file` entries resolve against `base_dir`.
inline RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir = {}) {
  namespace pt = boost::property_tree;
  using namespace config_detail;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", std::string("syntax error: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
  }

  static const std::map<std::string, std::set<std::string>> known = {
      {"market", {"S0", "sigma", "N", "dt", "volume", "eta", "cost_exponent", "dynamics", "paths_file"}},
      {"contract",
       {"kind", "Q", "F", "zeta", "alpha", "kappa", "beta", "exercise_set", "rho_min", "rho_max", "penalty_C"}},
      {"training",
       {"gamma", "batch_I", "epochs", "pretrain_epochs", "learning_rate", "seed", "pretrain_penalty_C",
        "heldout_paths", "heldout_every", "chunk_paths", "hidden", "init_nu", "init_output_scale", "init_stop_bias",
        "checkpoint_every"}},
      {"output", {"dir", "tag"}},
      {"manifest", {"code_version"}},
  };
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError(section, "key outside a section");
    const auto it = known.find(section);
    if (it == known.end()) throw ConfigError(section, "unknown section");
    for (const auto& [key, _] : body)
      if (!it->second.count(key)) throw ConfigError(section + "." + key, "unknown key");
  }
  auto get = [&](const std::string& section, const std::string& key) -> std::optional<std::string> {
    if (auto v = tree.get_optional<std::string>(pt::ptree::path_type(section + "/" + key, '/')))
      return trim(*v);
    return std::nullopt;
  };

  RunConfig rc;
  MarketParams& mp = rc.market;
  if (auto v = get("market", "S0")) mp.S0 = to_double("S0", *v);
  if (auto v = get("market", "sigma")) mp.sigma = to_double("sigma", *v);
  if (auto v = get("market", "N")) {
    const auto n = to_int("N", *v);
    if (n < 2 || n > 100000) throw ConfigError("N", "must lie in [2, 100000]");
    mp.N = static_cast<int>(n);
  }
  if (auto v = get("market", "dt")) mp.dt = to_double("dt", *v);
  mp.set_constant_volume(4.0e6);
  if (auto v = get("market", "volume")) {
    const auto vols = to_list("volume", *v);
    if (vols.size() == 1)
      mp.set_constant_volume(vols[0]);
    else
      mp.volume = vols;
  }
  if (auto v = get("market", "eta")) mp.eta = to_double("eta", *v);
  if (auto v = get("market", "cost_exponent")) mp.cost_exponent = to_double("cost_exponent", *v);
  if (auto v = get("market", "dynamics")) {
    if (*v == "arithmetic")
      mp.dynamics = Dynamics::ArithmeticBrownian;
    else if (*v == "geometric")
      mp.dynamics = Dynamics::GeometricBrownian;
    else if (*v == "file")
      mp.dynamics = Dynamics::ExternalFile;
    else
      throw ConfigError("dynamics", "expected arithmetic, geometric or file, got '" + *v + "'");
  }
  if (auto v = get("market", "paths_file")) {
    std::filesystem::path p(*v);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    rc.paths_file = p.string();
    std::ifstream f(p);
    if (!f) throw ConfigError("paths_file", "cannot open '" + rc.paths_file + "'");
    try {
      mp.external_paths = std::make_shared<PathBatch>(read_paths_csv(f));
    } catch (const ArtifactMismatch& e) {
      throw ConfigError("paths_file", e.what());
    }
  }

  const std::string kind = get("contract", "kind").value_or("fixed-shares");
  ContractSpec& cs = rc.contract;
  switch (parse_contract_kind(kind)) {
    case ContractKind::FixedShares: cs = reference_fixed_shares(); break;
    case ContractKind::FixedNotional: cs = reference_fixed_notional(); break;
    case ContractKind::ProfitSharing: cs = reference_profit_sharing(); break;
  }
  auto reject_for_kind = [&](const char* key) {
    if (get("contract", key)) throw ConfigError(key, "not a term of a " + kind + " contract");
  };
  if (auto* fs = std::get_if<FixedShares>(&cs.terms)) {
    if (auto v = get("contract", "Q")) fs->Q = to_double("Q", *v);
    for (const char* k : {"F", "zeta", "alpha", "kappa", "beta"}) reject_for_kind(k);
  } else if (auto* fn = std::get_if<FixedNotional>(&cs.terms)) {
    if (auto v = get("contract", "F")) fn->F = to_double("F", *v);
    if (auto v = get("contract", "zeta")) fn->zeta = to_double("zeta", *v);
    for (const char* k : {"Q", "alpha", "kappa", "beta"}) reject_for_kind(k);
  } else {
    auto& ps = std::get<ProfitSharing>(cs.terms);
    if (auto v = get("contract", "F")) ps.F = to_double("F", *v);
    if (auto v = get("contract", "alpha")) ps.alpha = to_double("alpha", *v);
    if (auto v = get("contract", "kappa")) ps.kappa = to_double("kappa", *v);
    if (auto v = get("contract", "beta")) ps.beta = to_double("beta", *v);
    for (const char* k : {"Q", "zeta"}) reject_for_kind(k);
  }
  if (auto v = get("contract", "exercise_set")) cs.exercise_days = parse_exercise_set(*v);
  if (auto v = get("contract", "rho_min")) cs.rho_min = to_double("rho_min", *v);
  if (auto v = get("contract", "rho_max")) cs.rho_max = to_double("rho_max", *v);
  if (auto v = get("contract", "penalty_C")) cs.penalty_C = to_double("penalty_C", *v);

  TrainConfig& tc = rc.training;
  auto nonneg = [](const char* field, long long x) {
    if (x < 0) throw ConfigError(field, "must be nonnegative");
    return x;
  };
  if (auto v = get("training", "gamma")) tc.gamma = to_double("gamma", *v);
  if (auto v = get("training", "batch_I")) tc.batch_I = static_cast<std::size_t>(nonneg("batch_I", to_int("batch_I", *v)));
  if (auto v = get("training", "epochs")) tc.epochs = static_cast<int>(to_int("epochs", *v));
  if (auto v = get("training", "pretrain_epochs")) tc.pretrain_epochs = static_cast<int>(to_int("pretrain_epochs", *v));
  if (auto v = get("training", "learning_rate")) tc.learning_rate = to_double("learning_rate", *v);
  if (auto v = get("training", "seed")) tc.seed = static_cast<std::uint64_t>(nonneg("seed", to_int("seed", *v)));
  if (auto v = get("training", "pretrain_penalty_C")) {
    if (*v != "none") tc.pretrain_penalty_C = to_double("pretrain_penalty_C", *v);
  } else if (cs.kind() == ContractKind::ProfitSharing) {
    tc.pretrain_penalty_C = 0.01 / std::get<ProfitSharing>(cs.terms).F;
  }
  if (auto v = get("training", "heldout_paths"))
    tc.heldout_paths = static_cast<std::size_t>(nonneg("heldout_paths", to_int("heldout_paths", *v)));
  if (auto v = get("training", "heldout_every")) tc.heldout_every = static_cast<int>(to_int("heldout_every", *v));
  if (auto v = get("training", "chunk_paths"))
    tc.chunk_paths = static_cast<std::size_t>(nonneg("chunk_paths", to_int("chunk_paths", *v)));
  if (auto v = get("training", "hidden")) tc.init.hidden = static_cast<std::size_t>(nonneg("hidden", to_int("hidden", *v)));
  if (auto v = get("training", "init_nu")) tc.init.nu = to_double("init_nu", *v);
  if (auto v = get("training", "init_output_scale")) tc.init.output_scale = to_double("init_output_scale", *v);
  if (auto v = get("training", "init_stop_bias")) tc.init.stop_bias = to_double("init_stop_bias", *v);
  if (auto v = get("training", "checkpoint_every")) rc.checkpoint_every = static_cast<int>(to_int("checkpoint_every", *v));

  if (auto v = get("output", "dir")) rc.output_dir = *v;
  if (auto v = get("output", "tag")) rc.tag = *v;

  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open '" + path.string() + "'");
  return parse_run_config(in, path.parent_path());
}

/// Fully resolved config in the same grammar; parsing it back yields the same run.
inline std::string to_ini(const RunConfig& rc) {
  using config_detail::format_double;
  std::ostringstream o;
  const MarketParams& mp = rc.market;
  o << "[market]\n";
  o << "S0 = " << format_double(mp.S0) << '\n';
  o << "sigma = " << format_double(mp.sigma) << '\n';
  o << "N = " << mp.N << '\n';
  o << "dt = " << format_double(mp.dt) << '\n';
  bool constant = true;
  for (double v : mp.volume) constant = constant && v == mp.volume.front();
  o << "volume = ";
  if (constant) {
    o << format_double(mp.volume.front());
  } else {
    for (std::size_t k = 0; k < mp.volume.size(); ++k) o << (k ? ", " : "") << format_double(mp.volume[k]);
  }
  o << '\n';
  o << "eta = " << format_double(mp.eta) << '\n';
  o << "cost_exponent = " << format_double(mp.cost_exponent) << '\n';
  o << "dynamics = "
    << (mp.dynamics == Dynamics::ArithmeticBrownian ? "arithmetic"
        : mp.dynamics == Dynamics::GeometricBrownian ? "geometric"
                                                      : "file")
    << '\n';
  if (!rc.paths_file.empty()) o << "paths_file = " << std::filesystem::absolute(rc.paths_file).string() << '\n';

  const ContractSpec& cs = rc.contract;
  o << "\n[contract]\nkind = " << to_string(cs.kind()) << '\n';
  std::visit(
      [&](const auto& t) {
        using Terms = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<Terms, FixedShares>) {
          o << "Q = " << format_double(t.Q) << '\n';
        } else if constexpr (std::is_same_v<Terms, FixedNotional>) {
          o << "F = " << format_double(t.F) << '\n' << "zeta = " << format_double(t.zeta) << '\n';
        } else {
          o << "F = " << format_double(t.F) << '\n'
            << "alpha = " << format_double(t.alpha) << '\n'
            << "kappa = " << format_double(t.kappa) << '\n'
            << "beta = " << format_double(t.beta) << '\n';
        }
      },
      cs.terms);
  o << "exercise_set = " << config_detail::format_exercise_set(cs.exercise_days) << '\n';
  o << "rho_min = " << format_double(cs.rho_min) << '\n';
  o << "rho_max = " << format_double(cs.rho_max) << '\n';
  o << "penalty_C = " << format_double(cs.penalty_C) << '\n';

  const TrainConfig& tc = rc.training;
  o << "\n[training]\n";
  o << "gamma = " << format_double(tc.gamma) << '\n';
  o << "batch_I = " << tc.batch_I << '\n';
  o << "epochs = " << tc.epochs << '\n';
  o << "pretrain_epochs = " << tc.pretrain_epochs << '\n';
  o << "learning_rate = " << format_double(tc.learning_rate) << '\n';
  o << "seed = " << tc.seed << '\n';
  o << "pretrain_penalty_C = " << (tc.pretrain_penalty_C ? format_double(*tc.pretrain_penalty_C) : "none") << '\n';
  o << "heldout_paths = " << tc.heldout_paths << '\n';
  o << "heldout_every = " << tc.heldout_every << '\n';
  o << "chunk_paths = " << tc.chunk_paths << '\n';
  o << "hidden = " << tc.init.hidden << '\n';
  o << "init_nu = " << format_double(tc.init.nu) << '\n';
  o << "init_output_scale = " << format_double(tc.init.output_scale) << '\n';
  o << "init_stop_bias = " << format_double(tc.init.stop_bias) << '\n';
  o << "checkpoint_every = " << rc.checkpoint_every << '\n';

  o << "\n[output]\ndir = " << rc.output_dir << "\ntag = " << rc.tag << '\n';
  return o.str();
}

}  // namespace buyback
