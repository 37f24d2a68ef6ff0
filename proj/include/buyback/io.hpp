#pragma once

// CSV and JSON emitters. Numbers are written with 17 significant digits so
// reruns compare byte for byte.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "buyback/errors.hpp"
#include "buyback/params.hpp"
#include "buyback/training.hpp"

namespace buyback {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_curve_csv(std::ostream& out, const std::vector<CurveRow>& curve) {
  out << "epoch,phase,J,J_normalized,J_heldout\n";
  for (const auto& r : curve) {
    out << r.epoch << ',' << to_string(r.phase) << ',' << fmt17(r.J) << ',' << fmt17(r.J_normalized) << ',';
    if (r.J_heldout) out << fmt17(*r.J_heldout);
    out << '\n';
  }
}

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows, bool header = true) {
  if (header) out << "path_id,day,price,average,inventory,cash,trade,stop_prob,stopped\n";
  for (const auto& r : rows)
    out << r.path_id << ',' << r.day << ',' << fmt17(r.price) << ',' << fmt17(r.average) << ','
        << fmt17(r.inventory) << ',' << fmt17(r.cash) << ',' << fmt17(r.trade) << ',' << fmt17(r.stop_prob) << ','
        << (r.stopped ? "true" : "false") << '\n';
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(r.mode);
  j["paths"] = r.paths;
  j["draws"] = r.draws;
  j["mean"] = r.mean;
  j["variance"] = r.variance;
  j["J"] = r.J;
  j["J_normalized"] = r.J_normalized;
  j["mean_stderr"] = r.mean_stderr;
  return j;
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  return f;
}

inline void save_checkpoint(const std::filesystem::path& p, const ParamStore& params) {
  auto f = open_output(p);
  write_checkpoint(f, params);
}

inline ParamStore load_checkpoint(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw ArtifactMismatch("cannot open checkpoint '" + p.string() + "'");
  return read_checkpoint(f);
}

}  // namespace buyback
