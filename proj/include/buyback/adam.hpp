#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "buyback/errors.hpp"
#include "buyback/params.hpp"

namespace buyback {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// nu is projected back onto [nu_floor, inf) after every step.
  double nu_floor = 1e-3;
};

/// First/second moment accumulators, shaped like the parameters.
struct AdamState {
  ParamStore m;
  ParamStore v;
  long long t = 0;

  static AdamState zeros_like(const ParamStore& p) {
    AdamState s{p, p, 0};
    auto zero = [](const std::string&, Tensor& x) { std::fill(x.data.begin(), x.data.end(), 0.0); };
    s.m.for_each(zero);
    s.v.for_each(zero);
    return s;
  }
};

/// Zero-valued gradient container with the layout of `p`.
inline ParamStore zero_gradients(const ParamStore& p) {
  ParamStore g = p;
  g.for_each([](const std::string&, Tensor& x) { std::fill(x.data.begin(), x.data.end(), 0.0); });
  return g;
}

/// One adaptive-moment ascent step: params += lr * mhat / (sqrt(vhat) + eps).
inline void adam_step(ParamStore& params, const ParamStore& grads, AdamState& state, const AdamConfig& cfg) {
  grads.for_each([](const std::string& name, const Tensor& g) {
    for (double x : g.data)
      if (!std::isfinite(x)) throw NumericalError("non-finite gradient in " + name);
  });
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

  // Walk the four stores in lockstep; for_each visits in a fixed order.
  std::vector<Tensor*> ps, ms, vs;
  std::vector<const Tensor*> gs;
  params.for_each([&](const std::string&, Tensor& x) { ps.push_back(&x); });
  state.m.for_each([&](const std::string&, Tensor& x) { ms.push_back(&x); });
  state.v.for_each([&](const std::string&, Tensor& x) { vs.push_back(&x); });
  grads.for_each([&](const std::string&, const Tensor& x) { gs.push_back(&x); });
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (ps[k]->shape != gs[k]->shape || ms[k]->shape != gs[k]->shape)
      throw ShapeError("adam_step: gradient and parameter shapes differ");
    for (std::size_t i = 0; i < ps[k]->size(); ++i) {
      const double g = (*gs[k])[i];
      double& m = (*ms[k])[i];
      double& v = (*vs[k])[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      (*ps[k])[i] += cfg.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + cfg.epsilon);
    }
  }
  if (params.nu[0] < cfg.nu_floor) params.nu[0] = cfg.nu_floor;
  params.step += 1;
}

}  // namespace buyback
