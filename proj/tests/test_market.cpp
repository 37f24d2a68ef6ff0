#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "buyback/autodiff.hpp"
#include "buyback/market.hpp"
#include "buyback/random.hpp"

using namespace buyback;

TEST(Philox, KnownAnswerZeroCounterZeroKey) {
  const auto out = philox4x32_10({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(out[0], 0x6627e8d5u);
  EXPECT_EQ(out[1], 0xe169c58du);
  EXPECT_EQ(out[2], 0xbc57ac4cu);
  EXPECT_EQ(out[3], 0x9b00dbd8u);
}

TEST(Philox, KnownAnswerAllOnes) {
  const auto out = philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(out[0], 0x408f276du);
  EXPECT_EQ(out[1], 0x41c83b0eu);
  EXPECT_EQ(out[2], 0xa20bc7c6u);
  EXPECT_EQ(out[3], 0x6d5451fdu);
}

TEST(Philox, KnownAnswerPiDigits) {
  const auto out = philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(out[0], 0xd16cfe09u);
  EXPECT_EQ(out[1], 0x94fdccebu);
  EXPECT_EQ(out[2], 0x5001e420u);
  EXPECT_EQ(out[3], 0x24126ea1u);
}

TEST(RandomStream, UniformsInRangeAndNormalMoments) {
  RandomStream rng(11, 3);
  double s = 0, s2 = 0;
  const int M = 200000;
  for (int k = 0; k < M; ++k) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double o = rng.uniform_open();
    ASSERT_GT(o, 0.0);
    ASSERT_LT(o, 1.0);
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / M, 0.0, 0.01);
  EXPECT_NEAR(s2 / M, 1.0, 0.01);
}

TEST(RandomStream, StreamsAreIndependentOfConstructionOrder) {
  RandomStream a(5, 1), b(5, 2);
  const double a1 = a.uniform();
  RandomStream a2(5, 1);
  EXPECT_EQ(a1, a2.uniform());
  EXPECT_NE(a1, b.uniform());
}

TEST(SimulatePaths, ZeroVolatilityIsFlat) {
  MarketParams mp;
  mp.sigma = 0.0;
  const auto b = simulate_paths(mp, 5, 1);
  for (std::size_t i = 0; i < 5; ++i)
    for (int n = 0; n <= mp.N; ++n) {
      EXPECT_EQ(b.S(i, n), 45.0);
      EXPECT_EQ(b.A(i, n), 45.0);
    }
}

TEST(SimulatePaths, ArithmeticIncrementVariance) {
  MarketParams mp;
  const auto b = simulate_paths(mp, 100000, 7);
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < b.count(); ++i) {
    const double d = b.S(i, 1) - b.S(i, 0);
    s += d;
    s2 += d * d;
  }
  const double n = static_cast<double>(b.count());
  const double var = (s2 - s * s / n) / (n - 1);
  EXPECT_NEAR(var, 0.36, 0.36 * 0.05);
}

TEST(SimulatePaths, GeometricLogIncrementMoments) {
  MarketParams mp;
  mp.dynamics = Dynamics::GeometricBrownian;
  mp.sigma = 0.02;
  const auto b = simulate_paths(mp, 100000, 8);
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < b.count(); ++i) {
    const double d = std::log(b.S(i, 1) / b.S(i, 0));
    s += d;
    s2 += d * d;
  }
  const double n = static_cast<double>(b.count());
  EXPECT_NEAR(s / n, -0.5 * 0.02 * 0.02, 3 * 0.02 / std::sqrt(n));
  EXPECT_NEAR((s2 - s * s / n) / (n - 1), 4e-4, 4e-4 * 0.05);
}

TEST(SimulatePaths, DeterministicAndPrefixStable) {
  MarketParams mp;
  const auto a = simulate_paths(mp, 10, 3);
  const auto b = simulate_paths(mp, 10, 3);
  EXPECT_EQ(a.prices, b.prices);
  EXPECT_EQ(a.averages, b.averages);
  // path i depends only on (seed, i)
  const auto big = simulate_paths(mp, 40, 3);
  for (std::size_t i = 0; i < 10; ++i)
    for (int n = 0; n <= mp.N; ++n) EXPECT_EQ(a.S(i, n), big.S(i, n));
  const auto c = simulate_paths(mp, 10, 4);
  EXPECT_NE(a.prices, c.prices);
}

TEST(SimulatePaths, RunningAverageMatchesDirectMean) {
  MarketParams mp;
  const auto b = simulate_paths(mp, 20, 9);
  for (std::size_t i = 0; i < b.count(); ++i) {
    EXPECT_EQ(b.A(i, 0), b.S(i, 0));
    double sum = 0.0;
    for (int n = 1; n <= mp.N; ++n) {
      sum += b.S(i, n);
      const double direct = sum / n;
      EXPECT_LE(std::abs(b.A(i, n) - direct), 1e-12 * std::abs(direct));
    }
  }
}

TEST(SimulatePaths, ExternalFileBootstrapsRows) {
  MarketParams mp;
  mp.N = 3;
  mp.set_constant_volume(1e6);
  std::stringstream csv("path_id,day,price\n0,0,10\n0,1,11\n0,2,12\n0,3,13\n1,0,10\n1,1,9\n1,2,8\n1,3,7\n");
  mp.external_paths = std::make_shared<PathBatch>(read_paths_csv(csv));
  mp.dynamics = Dynamics::ExternalFile;
  mp.S0 = 10;
  const auto b = simulate_paths(mp, 50, 1);
  bool seen_up = false, seen_down = false;
  for (std::size_t i = 0; i < b.count(); ++i) {
    seen_up = seen_up || b.S(i, 3) == 13;
    seen_down = seen_down || b.S(i, 3) == 7;
    EXPECT_TRUE(b.S(i, 3) == 13 || b.S(i, 3) == 7);
  }
  EXPECT_TRUE(seen_up && seen_down);
}

TEST(StylizedPaths, ShapesWithoutNoise) {
  MarketParams mp;
  const auto up = stylized_paths(mp, StylizedKind::Up);
  EXPECT_NEAR(up.S(0, mp.N), 1.10 * mp.S0, 1e-12);
  const auto v = stylized_paths(mp, StylizedKind::VShape);
  int argmin = 0;
  for (int n = 1; n <= mp.N; ++n)
    if (v.S(0, n) < v.S(0, argmin)) argmin = n;
  EXPECT_EQ(argmin, mp.N / 2);
  const auto down = stylized_paths(mp, StylizedKind::Down);
  for (int n = 2; n <= mp.N; ++n) EXPECT_GE(down.A(0, n), down.S(0, n));
  EXPECT_NEAR(down.S(0, mp.N), 0.9 * mp.S0, 1e-12);
}

TEST(StylizedPaths, SeededNoiseIsReproducible) {
  MarketParams mp;
  const StylizedNoise noise{0.2, 17};
  EXPECT_EQ(stylized_paths(mp, StylizedKind::Down, noise).prices,
            stylized_paths(mp, StylizedKind::Down, noise).prices);
  EXPECT_NE(stylized_paths(mp, StylizedKind::Down, noise).prices, stylized_paths(mp, StylizedKind::Down).prices);
}

TEST(ExecutionCost, ReferenceValues) {
  MarketParams mp;
  EXPECT_EQ(exec_cost(0.0, mp), 0.0);
  EXPECT_DOUBLE_EQ(exec_cost(1.0, mp), 0.1);
  EXPECT_NEAR(exec_cost(0.25, mp), 8.839e-3, 1e-6);
  EXPECT_DOUBLE_EQ(exec_cost(-0.25, mp), exec_cost(0.25, mp));
  RandomStream rng(1, 1);
  for (int k = 0; k < 100; ++k) {
    const double r = rng.uniform(-2.0, 2.0);
    EXPECT_GT(exec_cost(r, mp), 0.0);
  }
}

TEST(TerminalPenalty, ReferenceValues) {
  EXPECT_EQ(terminal_penalty(0.0, 2e-7), 0.0);
  EXPECT_DOUBLE_EQ(terminal_penalty(1e6, 2e-7), 2e5);
  EXPECT_EQ(terminal_penalty(-3.5e5, 2e-7), terminal_penalty(3.5e5, 2e-7));
}

TEST(StepState, NoTradeOnlyAdvancesPrices) {
  MarketParams mp;
  State<double> st{0, 45.0, 45.0, 10.0, 5.0};
  step_state(st, 0.0, 46.0, mp);
  EXPECT_EQ(st.q, 5.0);
  EXPECT_EQ(st.X, 10.0);
  EXPECT_EQ(st.S, 46.0);
  EXPECT_EQ(st.A, 46.0);
  EXPECT_EQ(st.n, 1);
  step_state(st, 0.0, 48.0, mp);
  EXPECT_EQ(st.A, 47.0);
}

TEST(StepState, FullParticipationCharge) {
  MarketParams mp;
  const double V = mp.V(1);
  State<double> st{0, 45.0, 45.0, 0.0, 0.0};
  step_state(st, V, 45.0, mp);
  EXPECT_DOUBLE_EQ(st.X, 45.0 * V + 0.1 * V);
  EXPECT_EQ(st.q, V);
}

TEST(StepState, RoundTripCostsTwiceTheImpact) {
  MarketParams mp;
  mp.sigma = 0.0;
  const double v = 3.0e5, V = mp.V(1);
  State<double> st{0, 45.0, 45.0, 0.0, 0.0};
  step_state(st, v, 45.0, mp);
  step_state(st, -v, 45.0, mp);
  EXPECT_EQ(st.q, 0.0);
  EXPECT_NEAR(st.X, 2 * 0.1 * std::pow(v / V, 1.75) * V, 1e-9);
}

TEST(StepState, PastExpiryIsContractError) {
  MarketParams mp;
  mp.N = 2;
  mp.set_constant_volume(1e6);
  State<double> st{2, 45.0, 45.0, 0.0, 0.0};
  EXPECT_THROW(step_state(st, 1.0, 45.0, mp), ContractError);
}

TEST(StepState, CashIdentityAlongRandomPath) {
  MarketParams mp;
  for (int n = 0; n < mp.N; ++n) mp.volume[n] = 3e6 + 1e5 * n;
  const auto b = simulate_paths(mp, 1, 21);
  RandomStream rng(21, 5);
  State<double> st{0, mp.S0, mp.S0, 0.0, 0.0};
  double resum = 0.0;
  for (int n = 0; n < mp.N; ++n) {
    const double v = rng.uniform(-2e5, 6e5);
    const double S1 = b.S(0, n + 1), V = mp.V(n + 1);
    resum += (v * S1 + 0.1 * std::pow(std::abs(v / V), 1.75) * V) * mp.dt;
    step_state(st, v, S1, mp);
    EXPECT_NEAR(st.X, resum, 1e-10 * std::abs(resum));
    EXPECT_NEAR(st.A, b.A(0, n + 1), 1e-12 * std::abs(st.A));
  }
}

TEST(StepState, DifferentiableInRate) {
  MarketParams mp;
  ad::Tape t;
  const auto v = t.variable(Tensor::scalar(4.0e5));
  State<ad::Var> st{0, t.scalar(45.0), t.scalar(45.0), t.scalar(0.0), t.scalar(0.0)};
  step_state(st, v, t.scalar(46.0), t.scalar(46.0), mp);
  const double V = mp.V(1);
  const double expected = 46.0 + 0.1 * 1.75 * std::pow(4.0e5 / V, 0.75);
  EXPECT_NEAR(t.backward(st.X).of(v)[0], expected, 1e-10);
}

TEST(MarketParams, ValidationNamesTheField) {
  MarketParams mp;
  mp.sigma = -1;
  try {
    mp.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field, "sigma");
  }
  MarketParams m2;
  m2.volume.pop_back();
  EXPECT_THROW(m2.validate(), ConfigError);
  MarketParams m3;
  m3.cost_exponent = 0;
  EXPECT_THROW(m3.validate(), ConfigError);
}

TEST(PathCsv, RoundTripAndValidation) {
  MarketParams mp;
  const auto b = simulate_paths(mp, 4, 2);
  std::stringstream ss;
  write_paths_csv(ss, b);
  const auto back = read_paths_csv(ss);
  EXPECT_EQ(back.prices, b.prices);
  EXPECT_EQ(back.averages, b.averages);

  std::stringstream ragged("path_id,day,price\n0,0,1\n0,1,2\n0,2,3\n1,0,1\n1,1,2\n");
  EXPECT_THROW(read_paths_csv(ragged), ArtifactMismatch);
  std::stringstream header("id,day,price\n0,0,1\n");
  EXPECT_THROW(read_paths_csv(header), ArtifactMismatch);
  std::stringstream gap("path_id,day,price\n0,0,1\n0,2,2\n0,3,3\n");
  EXPECT_THROW(read_paths_csv(gap), ArtifactMismatch);
}
