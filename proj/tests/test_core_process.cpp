#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "vppha/core_process.hpp"
#include "vppha/csv.hpp"

using namespace vppha;

namespace {

ScenarioProcess random_process(std::mt19937_64& rng, TimeGrid g, std::size_t d, std::size_t S) {
  std::uniform_real_distribution<double> up(0.1, 1.0);
  std::normal_distribution<double> nd(0.0, 2.0);
  std::vector<double> p(S);
  double tot = 0.0;
  for (auto& v : p) tot += (v = up(rng));
  for (auto& v : p) v /= tot;
  std::vector<double> vals(S * g.K * d);
  for (auto& v : vals) v = nd(rng);
  return ScenarioProcess(g, d, p, vals);
}

}  // namespace

TEST(TimeGrid, PointsAndHorizon) {
  TimeGrid g(2.0, 0.25, 8);
  EXPECT_DOUBLE_EQ(g.at(0), 2.0);
  EXPECT_DOUBLE_EQ(g.at(3), 2.75);
  EXPECT_DOUBLE_EQ(g.horizon(), 2.0);
}

TEST(TimeGrid, RejectsBadParameters) {
  EXPECT_THROW(TimeGrid(0.0, 0.0, 4), std::invalid_argument);
  EXPECT_THROW(TimeGrid(0.0, -1.0, 4), std::invalid_argument);
  EXPECT_THROW(TimeGrid(0.0, std::numeric_limits<double>::quiet_NaN(), 4), std::invalid_argument);
  EXPECT_THROW(TimeGrid(0.0, 1.0, 0), std::invalid_argument);
}

TEST(Trajectory, ShapeAndFiniteness) {
  TimeGrid g(0, 1, 3);
  EXPECT_THROW(Trajectory(g, 2, std::vector<double>(5, 0.0)), ShapeMismatch);
  EXPECT_THROW(Trajectory(g, 1, std::vector<double>{1, std::numeric_limits<double>::infinity(), 0}),
               std::invalid_argument);
  Trajectory t(g, 2, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t(1, 1), 4.0);
  EXPECT_EQ(t.step(2)[0], 5.0);
}

TEST(ScenarioProcess, ProbabilityValidation) {
  TimeGrid g(0, 1, 2);
  EXPECT_THROW(ScenarioProcess(g, 1, {}), std::invalid_argument);
  EXPECT_THROW(ScenarioProcess(g, 1, {0.5, 0.0, 0.5}), std::invalid_argument);
  EXPECT_THROW(ScenarioProcess(g, 1, {1.5, -0.5}), std::invalid_argument);
  EXPECT_THROW(ScenarioProcess(g, 1, {0.5, 0.49}), std::invalid_argument);
  ScenarioProcess x(g, 1, {0.5, 0.5 + 5e-10});
  EXPECT_NEAR(x.prob(0) + x.prob(1), 1.0, 1e-15);
  EXPECT_LT(x.prob(0), x.prob(1));
}

TEST(ScenarioProcess, EquiprobableIsExact) {
  auto x = ScenarioProcess::equiprobable(TimeGrid(0, 1, 1), 1, 3);
  for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(x.prob(s), 1.0 / 3.0);
}

TEST(ScenarioProcess, ValuesShapeAndFinite) {
  TimeGrid g(0, 1, 2);
  EXPECT_THROW(ScenarioProcess(g, 1, {1.0}, {1.0}), ShapeMismatch);
  EXPECT_THROW(ScenarioProcess(g, 1, {1.0}, {1.0, std::nan("")}), std::invalid_argument);
}

TEST(ScenarioProcess, ScenarioAccessRoundTrip) {
  TimeGrid g(0, 1, 3);
  auto x = ScenarioProcess::equiprobable(g, 2, 2);
  Trajectory t(g, 2, std::vector<double>{1, 2, 3, 4, 5, 6});
  x.set_scenario(1, t);
  EXPECT_EQ(x.scenario(1).data(), t.data());
  EXPECT_EQ(x(1, 2, 1), 6.0);
  EXPECT_EQ(x(0, 2, 1), 0.0);
  EXPECT_THROW(x.set_scenario(0, Trajectory(g, 1)), ShapeMismatch);
}

TEST(ScenarioProcess, Arithmetic) {
  TimeGrid g(0, 1, 1);
  ScenarioProcess a(g, 1, {0.5, 0.5}, {1, 2}), b(g, 1, {0.5, 0.5}, {10, 20});
  auto c = a + 2.0 * b - a;
  EXPECT_EQ(c(0, 0, 0), 20.0);
  EXPECT_EQ(c(1, 0, 0), 40.0);
  ScenarioProcess wrong(TimeGrid(0, 1, 2), 1, {0.5, 0.5});
  EXPECT_THROW(a += wrong, ShapeMismatch);
  EXPECT_THROW(inner(a, wrong), ShapeMismatch);
}

TEST(Expectation, SingleScenarioUnchanged) {
  TimeGrid g(0, 1, 3);
  ScenarioProcess x(g, 1, {1.0}, {3, -1, 7});
  EXPECT_EQ(expectation(x).data(), (std::vector<double>{3, -1, 7}));
}

TEST(Expectation, EquiprobableMean) {
  ScenarioProcess x(TimeGrid(0, 1, 1), 1, {0.5, 0.5}, {0, 2});
  EXPECT_DOUBLE_EQ(expectation(x)(0, 0), 1.0);
}

TEST(Expectation, WeightedSum) {
  ScenarioProcess x(TimeGrid(0, 1, 1), 1, {0.5, 0.25, 0.25}, {4, 0, 8});
  EXPECT_DOUBLE_EQ(expectation(x)(0, 0), 4.0);
}

TEST(Expectation, Linearity) {
  std::mt19937_64 rng(7);
  TimeGrid g(0, 0.5, 6);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_process(rng, g, 2, 5);
    auto y = x.zeros_like();
    std::normal_distribution<double> nd;
    for (auto& v : y.data()) v = nd(rng);
    const double a = nd(rng), b = nd(rng);
    const auto lhs = expectation(a * x + b * y);
    const auto ex = expectation(x), ey = expectation(y);
    for (std::size_t j = 0; j < lhs.data().size(); ++j)
      EXPECT_NEAR(lhs.data()[j], a * ex.data()[j] + b * ey.data()[j], 1e-12);
  }
}

TEST(Expectation, BroadcastIsFixed) {
  TimeGrid g(0, 1, 2);
  ScenarioProcess like(g, 1, {0.2, 0.8});
  Trajectory t(g, 1, std::vector<double>{1.5, -2});
  const auto e = expectation(broadcast(t, like));
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(e(k, 0), t(k, 0), 1e-15);
}

TEST(Inner, ScalarProduct) {
  ScenarioProcess x(TimeGrid(0, 1, 1), 1, {1.0}, {3}), y(TimeGrid(0, 1, 1), 1, {1.0}, {2});
  EXPECT_DOUBLE_EQ(inner(x, y), 6.0);
}

TEST(Inner, WeightedTwoScenario) {
  TimeGrid g(0, 0.5, 2);
  ScenarioProcess x(g, 1, {0.5, 0.5}, {1, 1, 1, 1}), y(g, 1, {0.5, 0.5}, {2, 2, 4, 4});
  EXPECT_DOUBLE_EQ(inner(x, y), 3.0);
}

TEST(Inner, PositivityAndZero) {
  std::mt19937_64 rng(3);
  auto x = random_process(rng, TimeGrid(0, 0.25, 5), 3, 4);
  EXPECT_GT(inner(x, x), 0.0);
  EXPECT_EQ(inner(x.zeros_like(), x.zeros_like()), 0.0);
  EXPECT_DOUBLE_EQ(norm(x), std::sqrt(inner(x, x)));
}

TEST(Inner, BilinearSymmetricCauchySchwarz) {
  std::mt19937_64 rng(11);
  TimeGrid g(0, 0.3, 7);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_process(rng, g, 2, 4);
    auto y = x.zeros_like(), z = x.zeros_like();
    for (auto& v : y.data()) v = nd(rng);
    for (auto& v : z.data()) v = nd(rng);
    const double a = nd(rng), b = nd(rng);
    EXPECT_NEAR(inner(x, y), inner(y, x), 1e-12);
    EXPECT_NEAR(inner(a * x + b * y, z), a * inner(x, z) + b * inner(y, z), 1e-10);
    EXPECT_LE(std::abs(inner(x, y)), norm(x) * norm(y) + 1e-12);
  }
}

TEST(Inner, TrajectoryOverload) {
  TimeGrid g(0, 0.5, 2);
  Trajectory a(g, 1, std::vector<double>{1, 2}), b(g, 1, std::vector<double>{3, 4});
  EXPECT_DOUBLE_EQ(inner(a, b), 5.5);
  EXPECT_THROW(inner(a, Trajectory(TimeGrid(0, 0.5, 3), 1)), ShapeMismatch);
}

TEST(ScenarioCsv, RoundTripIsBitFaithful) {
  TimeGrid g(1.5, 0.5, 3);
  ScenarioProcess x(g, 2, {0.25, 0.75}, {0.1, -2.5, 3, 4.125, 1e-7, 6, 7, 8, 9.75, -0.3, 11, 12});
  std::stringstream ss;
  write_scenario_csv(ss, x);
  EXPECT_EQ(ss.str().substr(0, 30), "scenario,prob,t,channel,value\n");
  auto y = read_scenario_csv(ss, 0.5);
  EXPECT_EQ(y.grid(), x.grid());
  EXPECT_EQ(y.probabilities(), x.probabilities());
  EXPECT_EQ(y.data(), x.data());
}

TEST(ScenarioCsv, RejectsIncompleteGrid) {
  std::stringstream ss("scenario,prob,t,channel,value\n0,0.5,0,0,1\n1,0.5,0,0,2\n0,0.5,1,0,3\n");
  EXPECT_THROW(read_scenario_csv(ss), std::exception);
}
