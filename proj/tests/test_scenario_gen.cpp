#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "vppha/scenario_gen.hpp"

using namespace vppha;

namespace {

/// Smooth synthetic model: curve_l(t) = level^(0.5 + t / spd), scaled.
QuantileModel power_model(std::size_t spd, double scale, const std::string& id = "m") {
  QuantileModel m;
  m.levels = default_quantile_levels();
  m.steps_per_day = spd;
  m.scale = scale;
  m.cluster_id = id;
  for (double l : m.levels) {
    std::vector<double> c(spd);
    for (std::size_t t = 0; t < spd; ++t) c[t] = std::pow(l, 0.5 + static_cast<double>(t) / static_cast<double>(spd));
    m.curves.push_back(c);
  }
  return m;
}

/// Curves equal to their levels, so every marginal is (nearly) uniform.
QuantileModel identity_model(std::size_t spd) {
  QuantileModel m;
  m.levels = default_quantile_levels();
  m.steps_per_day = spd;
  m.scale = 1.0;
  m.cluster_id = "id";
  for (double l : m.levels) m.curves.emplace_back(spd, l);
  return m;
}

QuantileModel constant_model(std::size_t spd, double c, double scale) {
  QuantileModel m;
  m.levels = default_quantile_levels();
  m.steps_per_day = spd;
  m.scale = scale;
  m.cluster_id = "const";
  for (std::size_t l = 0; l < m.levels.size(); ++l) m.curves.emplace_back(spd, c);
  return m;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

/// Lag-1 correlation of consecutive marginal ranks F_k(x_k) over many days.
double lag1_rank_corr(const QuantileModel& m, double alpha_corr, std::size_t days, std::uint64_t seed) {
  const MarginalSet ms(m);
  std::mt19937_64 rng(seed);
  std::vector<double> a, b;
  for (std::size_t d = 0; d < days; ++d) {
    const auto x = sample_scenario(ms, alpha_corr, rng);
    for (std::size_t t = 0; t + 1 < x.size(); ++t) {
      a.push_back(ms[t](x[t] / m.scale));
      b.push_back(ms[t + 1](x[t + 1] / m.scale));
    }
  }
  return pearson(a, b);
}

}  // namespace

TEST(EmpiricalQuantile, OrderStatistic) {
  EXPECT_EQ(empirical_quantile({4, 1, 3, 2}, 0.5), 2.0);
  EXPECT_EQ(empirical_quantile({4, 1, 3, 2}, 0.99), 4.0);
  std::vector<double> hundred(100);
  for (int i = 0; i < 100; ++i) hundred[i] = 100 - i;
  EXPECT_EQ(empirical_quantile(hundred, 0.01), 1.0);
  std::vector<double> ten{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  EXPECT_EQ(empirical_quantile(ten, 0.3), 3.0);
  EXPECT_EQ(empirical_quantile(ten, 1.0), 10.0);
}

TEST(EmpiricalQuantile, RejectsBadInput) {
  EXPECT_THROW(empirical_quantile({}, 0.5), std::invalid_argument);
  EXPECT_THROW(empirical_quantile({1.0}, 0.0), std::invalid_argument);
  EXPECT_THROW(empirical_quantile({1.0}, 1.5), std::invalid_argument);
}

TEST(QuantileLevels, TwentyOneDefaults) {
  const auto lv = default_quantile_levels();
  ASSERT_EQ(lv.size(), 21u);
  EXPECT_DOUBLE_EQ(lv.front(), 0.01);
  EXPECT_DOUBLE_EQ(lv[1], 0.05);
  EXPECT_DOUBLE_EQ(lv[10], 0.5);
  EXPECT_DOUBLE_EQ(lv.back(), 0.99);
}

TEST(FitQuantiles, ConstantDay) {
  const Timestamp day = parse_timestamp("2024-03-04T00:00");
  const auto models = fit_quantiles({{day, std::vector<double>(24, 2.5)}}, month_daytype_cluster, 1);
  ASSERT_EQ(models.size(), 1u);
  EXPECT_EQ(models[0].scale, 2.5);
  EXPECT_EQ(models[0].curves.size(), 21u);
  for (const auto& c : models[0].curves)
    for (double v : c) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(models[0].cluster_id, "m03-weekday");
}

TEST(FitQuantiles, TwoDaysMedian) {
  std::vector<DayTrajectory> h{{parse_timestamp("2024-03-04T00:00"), std::vector<double>(48, 2.0)},
                               {parse_timestamp("2024-03-05T00:00"), std::vector<double>(48, 4.0)}};
  const auto m = fit_quantiles(h, month_daytype_cluster, 2).at(0);
  EXPECT_EQ(m.scale, 4.0);
  EXPECT_DOUBLE_EQ(m.curves[10][7], 0.5);
  EXPECT_DOUBLE_EQ(m.curves[20][7], 1.0);
}

namespace {
QuantileModel fit_uniform_days(int n_days, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<DayTrajectory> h;
  const Timestamp day = parse_timestamp("2024-05-06T00:00");
  for (int d = 0; d < n_days; ++d) {
    std::vector<double> v(144);
    for (double& x : v) x = U(rng);
    h.push_back({day + 1440 * d, v});
  }
  return fit_quantiles(h, [](const Timestamp&) { return std::string("all"); }, 6).at(0);
}
}  // namespace

// The median of 100 uniforms has standard deviation 0.05, so with 100 days
// the bound holds on average and within 4 sigma pointwise; with 10^4 days it
// holds at every index.
TEST(FitQuantiles, UniformDaysGiveHalfMedian) {
  const auto m = fit_uniform_days(100, 1);
  double mean_dev = 0.0;
  for (std::size_t t = 0; t < 144; ++t) {
    mean_dev += std::abs(m.curves[10][t] - 0.5) / 144.0;
    EXPECT_NEAR(m.curves[10][t], 0.5, 0.2) << t;
  }
  EXPECT_LE(mean_dev, 0.05);
  EXPECT_NO_THROW(m.validate());
  const auto big = fit_uniform_days(10000, 2);
  for (std::size_t t = 0; t < 144; ++t) EXPECT_NEAR(big.curves[10][t], 0.5, 0.05) << t;
}

TEST(FitQuantiles, ClustersByMonthAndDayType) {
  std::vector<DayTrajectory> h;
  Timestamp d0 = parse_timestamp("2024-05-31T00:00");  // Friday
  for (int d = 0; d < 4; ++d) h.push_back({d0 + d * 1440, std::vector<double>(24, 1.0 + d)});
  const auto models = fit_quantiles(h, month_daytype_cluster, 1);
  ASSERT_EQ(models.size(), 3u);
  EXPECT_EQ(models[0].cluster_id, "m05-weekday");
  EXPECT_EQ(models[1].cluster_id, "m06-weekday");  // Monday June 3
  EXPECT_EQ(models[2].cluster_id, "m06-weekend");
  EXPECT_EQ(models[2].scale, 3.0);
}

TEST(FitQuantiles, RejectsBadInput) {
  EXPECT_THROW(fit_quantiles({}, month_daytype_cluster, 1), std::invalid_argument);
  const Timestamp day = parse_timestamp("2024-03-04T00:00");
  EXPECT_THROW(fit_quantiles({{day, std::vector<double>(23, 1.0)}}, month_daytype_cluster, 1), std::invalid_argument);
  EXPECT_THROW(fit_quantiles({{day, std::vector<double>(72, 1.0)}}, month_daytype_cluster, 3), std::invalid_argument);
  std::vector<double> neg(24, 1.0);
  neg[3] = -1.0;
  EXPECT_THROW(fit_quantiles({{day, neg}}, month_daytype_cluster, 1), std::invalid_argument);
}

TEST(TrapezoidCdf, Examples) {
  EXPECT_DOUBLE_EQ(trapezoid_cdf(0.5, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(trapezoid_cdf(0.25, 0.5), 0.125);
  EXPECT_EQ(trapezoid_cdf(0.0, 0.3), 0.0);
  for (double a : {0.1, 0.3, 0.5, 0.7, 0.9}) EXPECT_EQ(trapezoid_cdf(1.0, a), 1.0);
}

TEST(TrapezoidCdf, ContinuousMonotoneAndInvertible) {
  for (double al : {0.05, 0.2, 0.35, 0.5, 0.65, 0.9}) {
    const double a = std::min(al, 1 - al), b = std::max(al, 1 - al);
    // left and right branch formulas at the break points
    EXPECT_NEAR(a * a / (2 * a * b), a / (2 * b), 1e-12);
    EXPECT_NEAR(a / (2 * b) + (b - a) / b, 1 - (1 - b) * (1 - b) / (2 * a * b), 1e-12);
    double prev = -1.0;
    for (int i = 0; i <= 1000; ++i) {
      const double x = i / 1000.0;
      const double F = trapezoid_cdf(x, al);
      EXPECT_GE(F, prev);
      prev = F;
      EXPECT_NEAR(trapezoid_cdf_inv(F, al), x, 1e-9);
    }
  }
}

TEST(TrapezoidCdf, MatchesMonteCarloConvolution) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const double al = 0.3;
  const int n = 200000;
  std::vector<double> w(n);
  for (double& v : w) v = (1 - al) * U(rng) + al * U(rng);
  std::sort(w.begin(), w.end());
  double sup = 0.0;
  for (int i = 0; i < n; ++i) {
    const double F = trapezoid_cdf(w[i], al);
    sup = std::max({sup, std::abs(F - (i + 1.0) / n), std::abs(F - static_cast<double>(i) / n)});
  }
  EXPECT_LE(sup, 0.005);
}

TEST(TrapezoidCdf, DomainErrors) {
  EXPECT_THROW(trapezoid_cdf(0.5, 0.0), std::domain_error);
  EXPECT_THROW(trapezoid_cdf(0.5, 1.0), std::domain_error);
  EXPECT_THROW(trapezoid_cdf(1.5, 0.5), std::domain_error);
  EXPECT_THROW(trapezoid_cdf_inv(-0.1, 0.5), std::domain_error);
}

TEST(MarginalCdf, EndpointsAndRoundTrip) {
  const auto m = power_model(24, 1.0);
  for (std::size_t t = 0; t < 24; t += 5) {
    const MarginalCdf F(m, t);
    EXPECT_EQ(F(0.0), 0.0);
    EXPECT_EQ(F(1.0), 1.0);
    const double lo = m.curves.front()[t], hi = m.curves.back()[t];
    double prev = -1;
    for (int i = 0; i <= 200; ++i) {
      const double x = lo + (hi - lo) * i / 200.0;
      EXPECT_NEAR(F.inverse(F(x)), x, 1e-9);
      EXPECT_GE(F(x), prev);
      prev = F(x);
    }
    EXPECT_NEAR(F(m.curves[10][t]), 0.5, 1e-12);
    for (std::size_t l = 0; l < m.levels.size(); ++l) EXPECT_NEAR(F.inverse(m.levels[l]), m.curves[l][t], 1e-12);
  }
}

TEST(MarginalCdf, TiesTakeMiddleRankAndClamp) {
  const auto m = constant_model(4, 0.4, 2.0);
  const MarginalCdf F(m, 0);
  EXPECT_NEAR(F(0.4), 0.5, 1e-12);
  EXPECT_EQ(F.inverse(0.0), 0.4);
  EXPECT_EQ(F.inverse(0.73), 0.4);
  EXPECT_EQ(F.inverse(1.0), 0.4);
  EXPECT_NEAR(F(0.2), 0.005, 1e-12);  // halfway along (0,0)-(0.4,0.01)
}

TEST(SampleScenario, DegenerateModelIsConstant) {
  const auto m = constant_model(24, 0.4, 2.5);
  std::mt19937_64 rng(7);
  for (int i = 0; i < 20; ++i)
    for (double v : sample_scenario(m, 0.3, rng)) EXPECT_EQ(v, 0.4 * 2.5);
}

TEST(SampleScenario, ValuesStayInRangeAndAreReproducible) {
  const auto m = power_model(48, 3.0);
  std::mt19937_64 a(5), b(5);
  for (int i = 0; i < 50; ++i) {
    const auto x = sample_scenario(m, 0.4, a);
    EXPECT_EQ(x, sample_scenario(m, 0.4, b));
    for (double v : x) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 3.0);
    }
  }
}

TEST(SampleScenario, CorrelationFollowsAlphaCorr) {
  const auto m = identity_model(24);
  const std::size_t days = 10000 / 23 + 1;  // about 10^4 consecutive pairs
  EXPECT_GT(lag1_rank_corr(m, 0.02, days, 1), 0.9);
  EXPECT_LT(lag1_rank_corr(m, 0.98, days, 2), 0.1);
  EXPECT_GT(lag1_rank_corr(m, 0.1, days, 3), lag1_rank_corr(m, 0.9, days, 3) + 0.3);
}

TEST(Generate, EquiprobableAndMatchesMarginalMedian) {
  const auto m = power_model(24, 2.0);
  std::mt19937_64 rng(9);
  const auto x = generate(m, 0.3, 10000, rng);
  EXPECT_EQ(x.scenarios(), 10000u);
  EXPECT_EQ(x.steps(), 24u);
  EXPECT_DOUBLE_EQ(x.grid().dt, 1.0);
  for (double p : x.probabilities()) EXPECT_DOUBLE_EQ(p, 1e-4);
  std::vector<double> col(10000);
  for (std::size_t t = 0; t < 24; ++t) {
    for (std::size_t s = 0; s < 10000; ++s) col[s] = x(s, t, 0) / m.scale;
    EXPECT_NEAR(empirical_quantile(col, 0.5), m.curves[10][t], 0.05) << t;
  }
  std::mt19937_64 again(9);
  EXPECT_EQ(generate(m, 0.3, 10000, again).data(), x.data());
}

TEST(Calibrate, RecoversGeneratingParameter) {
  const auto m = power_model(24, 1.0);
  std::mt19937_64 rng(2718);
  std::vector<std::vector<double>> validation;
  for (int i = 0; i < 300; ++i) {
    std::mt19937_64 sub(rng());
    validation.push_back(sample_scenario(m, 0.3, sub));
  }
  const double got = calibrate_alpha_corr(m, validation, default_alpha_corr_grid(), 99);
  EXPECT_NEAR(got, 0.3, 0.1 + 1e-9);
}

TEST(Calibrate, SinglePointAndTies) {
  const auto m = power_model(24, 1.0);
  std::vector<std::vector<double>> val{std::vector<double>(24, 0.5)};
  EXPECT_EQ(calibrate_alpha_corr(m, val, {0.42}, 1, 20), 0.42);
  const auto c = constant_model(24, 0.5, 1.0);
  EXPECT_DOUBLE_EQ(calibrate_alpha_corr(c, val, {0.7, 0.2, 0.5}, 1, 20), 0.2);
  EXPECT_THROW(calibrate_alpha_corr(m, {}, {0.5}, 1), std::invalid_argument);
}

TEST(EnergyDistance, ZeroForIdenticalSetsAndPositiveOtherwise) {
  std::vector<std::vector<double>> a{{0, 1}, {1, 0}}, b{{5, 5}, {6, 5}};
  EXPECT_NEAR(energy_distance(a, a), 0.0, 1e-15);
  EXPECT_GT(energy_distance(a, b), 1.0);
}

TEST(SampleWindow, CrossesMidnightIntoNextDayModel) {
  std::vector<QuantileModel> models{constant_model(24, 0.2, 1.0), constant_model(24, 0.8, 1.0)};
  models[0].cluster_id = "m01-weekday";
  models[1].cluster_id = "m01-weekend";
  ModelLibrary lib(models, month_daytype_cluster);
  const Timestamp fri_evening = parse_timestamp("2021-01-08T20:00");  // Friday
  std::mt19937_64 rng(3);
  const auto w = sample_window(lib, fri_evening, 8, 0.5, rng);
  for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(w[k], 0.2);
  for (int k = 4; k < 8; ++k) EXPECT_DOUBLE_EQ(w[k], 0.8);
  // A February date falls back to the matching day type.
  const auto feb = sample_window(lib, parse_timestamp("2021-02-06T00:00"), 2, 0.5, rng);
  EXPECT_DOUBLE_EQ(feb[0], 0.8);
  EXPECT_THROW(sample_window(lib, parse_timestamp("2021-01-08T20:30"), 2, 0.5, rng), std::invalid_argument);
}

TEST(SampleWindow, SeededFirstRankAndMeasurementRank) {
  std::vector<QuantileModel> models{power_model(24, 2.0, "m01-weekday")};
  ModelLibrary lib(models, month_daytype_cluster);
  const Timestamp t = parse_timestamp("2021-01-05T06:00");
  const double r = measurement_rank(lib, t, 2.0 * models[0].curves[10][6]);
  EXPECT_NEAR(r, 0.5, 1e-12);
  std::mt19937_64 rng(1);
  const auto w = sample_window(lib, t, 3, 0.5, rng, r);
  EXPECT_NEAR(w[0], 2.0 * models[0].curves[10][6], 1e-12);
}

TEST(HistoryCsv, GroupsCompleteDays) {
  std::ostringstream csv;
  csv << "timestamp,value\n";
  Timestamp t = parse_timestamp("2024-01-01T22:00");
  for (int i = 0; i < 2 + 24 + 3; ++i) csv << format_timestamp(t + 60 * i) << ',' << i << '\n';
  std::istringstream in(csv.str());
  const auto days = read_history_csv(in, 1);
  ASSERT_EQ(days.size(), 1u);
  EXPECT_EQ(format_timestamp(days[0].day), "2024-01-02T00:00:00");
  EXPECT_EQ(days[0].values.front(), 2.0);
  EXPECT_EQ(days[0].values.back(), 25.0);
}

TEST(HistoryCsv, GapIsAnError) {
  std::istringstream in("timestamp,value\n2024-01-01T00:00,1\n2024-01-01T02:00,1\n");
  EXPECT_THROW(read_history_csv(in, 1), ParseError);
}

TEST(ModelCsv, RoundTrip) {
  const auto m = power_model(48, 3.25, "m07-weekend");
  std::ostringstream out;
  write_model_csv(out, m);
  std::istringstream in(out.str());
  const auto back = read_model_csv(in);
  EXPECT_EQ(back.levels, m.levels);
  EXPECT_EQ(back.curves, m.curves);
  EXPECT_EQ(back.scale, m.scale);
  EXPECT_EQ(back.steps_per_day, m.steps_per_day);
  EXPECT_EQ(back.cluster_id, m.cluster_id);
  std::istringstream bad("levels=0.5,steps_per_day=2,scale=1,colour=red\n0.1,0.2\n");
  EXPECT_THROW(read_model_csv(bad), ParseError);
}
