#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "buyback/autodiff.hpp"
#include "buyback/errors.hpp"
#include "buyback/random.hpp"
#include "buyback/tensor.hpp"

namespace buyback {

enum class Dynamics { ArithmeticBrownian, GeometricBrownian, ExternalFile };

inline std::string to_string(Dynamics d) {
  switch (d) {
    case Dynamics::ArithmeticBrownian: return "arithmetic-brownian";
    case Dynamics::GeometricBrownian: return "geometric-brownian";
    case Dynamics::ExternalFile: return "external-file";
  }
  return "?";
}

struct PathBatch;

/// Price, volume and execution-cost model. Money in EUR, time in days.
struct MarketParams {
  double S0 = 45.0;
  /// EUR/sqrt(day) for arithmetic dynamics; relative per sqrt(day) for geometric.
  double sigma = 0.6;
  int N = 63;
  double dt = 1.0;
  /// V_1..V_N in shares/day; volume[n-1] is V_n.
  std::vector<double> volume = std::vector<double>(63, 4.0e6);
  double eta = 0.1;
  /// Exponent phi in L(rho) = eta |rho|^(1+phi).
  double cost_exponent = 0.75;
  Dynamics dynamics = Dynamics::ArithmeticBrownian;
  /// Populated when dynamics == ExternalFile.
  std::shared_ptr<const PathBatch> external_paths;

  double V(int n) const { return volume.at(static_cast<std::size_t>(n - 1)); }

  void set_constant_volume(double v) { volume.assign(static_cast<std::size_t>(N), v); }

  void validate() const {
    if (!(S0 > 0.0)) throw ConfigError("S0", "must be positive");
    if (!(sigma >= 0.0)) throw ConfigError("sigma", "must be nonnegative");
    if (N < 2) throw ConfigError("N", "must be at least 2");
    if (!(dt > 0.0)) throw ConfigError("dt", "must be positive");
    if (volume.size() != static_cast<std::size_t>(N)) throw ConfigError("volume", "needs exactly N entries");
    for (double v : volume)
      if (!(v > 0.0)) throw ConfigError("volume", "entries must be positive");
    if (!(eta >= 0.0)) throw ConfigError("eta", "must be nonnegative");
    if (!(cost_exponent > 0.0)) throw ConfigError("cost_exponent", "must be positive");
    if (dynamics == Dynamics::ExternalFile && !external_paths)
      throw ConfigError("paths_file", "external-file dynamics needs a loaded path file");
  }
};

/// I simulated trajectories. prices(i, n) = S_n^i for n = 0..N and
/// averages(i, n) = A_n^i, with A_0 := S_0 (column 0 mirrors the start price).
struct PathBatch {
  Tensor prices;
  Tensor averages;
  std::uint64_t seed = 0;

  std::size_t count() const { return prices.rows(); }
  int days() const { return static_cast<int>(prices.cols()) - 1; }
  double S(std::size_t i, int n) const { return prices(i, static_cast<std::size_t>(n)); }
  double A(std::size_t i, int n) const { return averages(i, static_cast<std::size_t>(n)); }
};

/// Fills averages from prices: A_1 = S_1, A_{n+1} = A_n + (S_{n+1} - A_n)/(n+1).
inline void compute_running_averages(PathBatch& batch) {
  const std::size_t I = batch.prices.rows(), cols = batch.prices.cols();
  batch.averages = Tensor(I, cols);
  for (std::size_t i = 0; i < I; ++i) {
    batch.averages(i, 0) = batch.prices(i, 0);
    double a = 0.0;
    for (std::size_t n = 1; n < cols; ++n) {
      const double s = batch.prices(i, n);
      a = n == 1 ? s : a + (s - a) / static_cast<double>(n);
      batch.averages(i, n) = a;
    }
  }
}

/// Simulates `count` trajectories; path i uses substream (seed, i).
inline PathBatch simulate_paths(const MarketParams& mp, std::size_t count, std::uint64_t seed) {
  if (count < 1) throw ContractError("simulate_paths: count must be at least 1");
  const auto cols = static_cast<std::size_t>(mp.N) + 1;
  PathBatch batch;
  batch.seed = seed;
  batch.prices = Tensor(count, cols);

  if (mp.dynamics == Dynamics::ExternalFile) {
    if (!mp.external_paths) throw ContractError("external-file dynamics without loaded paths");
    const PathBatch& src = *mp.external_paths;
    if (src.days() != mp.N) throw ArtifactMismatch("path file horizon differs from N");
    // Bootstrap rows of the file, deterministic in (seed, i).
    for (std::size_t i = 0; i < count; ++i) {
      RandomStream rng(seed, i);
      const auto row = std::min(static_cast<std::size_t>(rng.uniform() * static_cast<double>(src.count())),
                                src.count() - 1);
      for (std::size_t n = 0; n < cols; ++n) batch.prices(i, n) = src.prices(row, n);
    }
    compute_running_averages(batch);
    return batch;
  }

  const double vol = mp.sigma * std::sqrt(mp.dt);
  for (std::size_t i = 0; i < count; ++i) {
    RandomStream rng(seed, i);
    double s = mp.S0;
    batch.prices(i, 0) = s;
    for (std::size_t n = 1; n < cols; ++n) {
      const double eps = rng.normal();
      if (mp.dynamics == Dynamics::ArithmeticBrownian)
        s += vol * eps;
      else
        s *= std::exp(-0.5 * vol * vol + vol * eps);
      batch.prices(i, n) = s;
    }
  }
  compute_running_averages(batch);
  return batch;
}

enum class StylizedKind { Up, Down, VShape };

struct StylizedNoise {
  /// Standard deviation (EUR) of i.i.d. daily perturbations around the trend; 0 disables.
  double scale = 0.0;
  std::uint64_t seed = 7;
};

/// One deterministic trend path: up = +10% over [0, T], down = -10%,
/// v-shape = -8% of S0 to day N/2 then +12% of S0 back up to expiry.
inline PathBatch stylized_paths(const MarketParams& mp, StylizedKind kind, StylizedNoise noise = {}) {
  const int N = mp.N;
  const int mid = N / 2;
  PathBatch batch;
  batch.seed = noise.seed;
  batch.prices = Tensor(1, static_cast<std::size_t>(N) + 1);
  RandomStream rng(noise.seed, 0);
  for (int n = 0; n <= N; ++n) {
    const double t = static_cast<double>(n) / N;
    double rel = 0.0;
    switch (kind) {
      case StylizedKind::Up: rel = 0.10 * t; break;
      case StylizedKind::Down: rel = -0.10 * t; break;
      case StylizedKind::VShape:
        rel = n <= mid ? -0.08 * n / mid : -0.08 + 0.12 * static_cast<double>(n - mid) / (N - mid);
        break;
    }
    double s = mp.S0 * (1.0 + rel);
    if (n > 0 && noise.scale > 0.0) s += noise.scale * rng.normal();
    batch.prices(0, static_cast<std::size_t>(n)) = s;
  }
  compute_running_averages(batch);
  return batch;
}

/// L(rho) = eta |rho|^(1+phi), in EUR per share per day of market volume.
template <class T>
T exec_cost(const T& rho, const MarketParams& mp) {
  if (mp.eta == 0.0) return rho * 0.0;
  return mp.eta * abs_pow(rho, 1.0 + mp.cost_exponent);
}

/// ell(x) = C x^2.
template <class T>
T terminal_penalty(const T& x, double C) {
  return C * square(x);
}

/// Contract state on day n: price, running average, cash spent, inventory.
template <class T>
struct State {
  int n = 0;
  T S{};
  T A{};
  T X{};
  T q{};
};

/// Advances one day: q += v dt, X += v S_{n+1} dt + L(v / V_{n+1}) V_{n+1} dt.
template <class T>
void step_state(State<T>& st, const T& v, const T& S_next, const T& A_next, const MarketParams& mp) {
  if (st.n >= mp.N) throw ContractError("step_state past expiry");
  const double V = mp.V(st.n + 1);
  st.X = st.X + v * S_next * mp.dt + exec_cost(v * (1.0 / V), mp) * (V * mp.dt);
  st.q = st.q + v * mp.dt;
  st.S = S_next;
  st.A = A_next;
  ++st.n;
}

/// Scalar convenience: derives A_{n+1} from the running-average recursion.
inline void step_state(State<double>& st, double v, double S_next, const MarketParams& mp) {
  const double A_next = st.n == 0 ? S_next : st.A + (S_next - st.A) / (st.n + 1);
  step_state<double>(st, v, S_next, A_next, mp);
}

inline void write_paths_csv(std::ostream& out, const PathBatch& batch) {
  out << "path_id,day,price\n";
  out.precision(17);
  for (std::size_t i = 0; i < batch.count(); ++i)
    for (int n = 0; n <= batch.days(); ++n) out << i << ',' << n << ',' << batch.S(i, n) << '\n';
}

/// Reads `path_id,day,price` rows. Every path must list days 0..N exactly once.
inline PathBatch read_paths_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ArtifactMismatch("path file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path_id,day,price") throw ArtifactMismatch("path file header must be path_id,day,price");
  std::map<long long, std::map<int, double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, day, price;
    if (!std::getline(ls, id, ',') || !std::getline(ls, day, ',') || !std::getline(ls, price))
      throw ArtifactMismatch("path file line " + std::to_string(lineno) + ": expected three fields");
    try {
      auto [it, inserted] = rows[std::stoll(id)].emplace(std::stoi(day), std::stod(price));
      if (!inserted) throw ArtifactMismatch("path file line " + std::to_string(lineno) + ": duplicate day");
    } catch (const std::logic_error&) {
      throw ArtifactMismatch("path file line " + std::to_string(lineno) + ": not numeric");
    }
  }
  if (rows.empty()) throw ArtifactMismatch("path file has no rows");
  const std::size_t days = rows.begin()->second.size();
  if (days < 3) throw ArtifactMismatch("path file needs at least days 0..2");
  PathBatch batch;
  batch.prices = Tensor(rows.size(), days);
  std::size_t i = 0;
  for (const auto& [id, path] : rows) {
    if (path.size() != days) throw ArtifactMismatch("path file is not rectangular (path " + std::to_string(id) + ")");
    int expect = 0;
    for (const auto& [day, price] : path) {
      if (day != expect++) throw ArtifactMismatch("path " + std::to_string(id) + " does not cover days 0..N");
      batch.prices(i, static_cast<std::size_t>(day)) = price;
    }
    ++i;
  }
  compute_running_averages(batch);
  return batch;
}

}  // namespace buyback
