#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vppha/cli.hpp"

using namespace vppha;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"([data]
synthetic = true
synthetic_seed = 3
synthetic_history_days = 14
synthetic_days = 1
cluster = daytype
[ems]
delta_minutes = 30
n_s = 12
n_red = 3
[vppha]
max_outer_iters = 25
[sweep]
alphas = 0,5
)";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("vppha_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write_config(const std::string& body, const std::string& name = "run.ini") {
    const auto p = dir_ / name;
    std::ofstream(p) << body;
    return p.string();
  }

  int run(std::vector<std::string> args) {
    std::vector<const char*> argv{"vppha"};
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out;
    err_.str("");
    return cli::run(static_cast<int>(argv.size()), argv.data(), out, err_);
  }

  std::string out(const std::string& sub) const { return (dir_ / sub).string(); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  }

  fs::path dir_;
  std::ostringstream err_;
};

cli::RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return cli::parse_config(in);
}

}  // namespace

TEST(ParseConfig, DefaultsAndOverrides) {
  const auto c = parse(kSmall);
  EXPECT_TRUE(c.data.synthetic.enabled);
  EXPECT_EQ(c.data.synthetic.seed, 3u);
  EXPECT_EQ(c.ems.n_s, 12u);
  EXPECT_EQ(c.ems.step_minutes(), 30);
  EXPECT_EQ(c.ems.vppha.max_outer_iters, 25);
  EXPECT_EQ(c.alphas, (std::vector<double>{0.0, 5.0}));
  EXPECT_EQ(c.ems.battery.q0, 6.5);
  EXPECT_EQ(c.strategy, "all");

  const auto d = parse("[battery]\nq_max = 10\n[ocp]\neps_levels = 4\neps_end = 1e-7\n");
  EXPECT_EQ(d.ems.battery.q0, 5.0);
  ASSERT_EQ(d.ems.ocp.eps_schedule.size(), 4u);
  EXPECT_NEAR(d.ems.ocp.eps_schedule.back(), 1e-7, 1e-20);
  EXPECT_EQ(parse("[battery]\nq_max = 10\nq0 = 2\n").ems.battery.q0, 2.0);
}

TEST(ParseConfig, UnknownKeysAndBadValuesAreErrors) {
  EXPECT_THROW(parse("[ems]\nn_ss = 3\n"), cli::ConfigError);
  EXPECT_THROW(parse("[emz]\nn_s = 3\n"), cli::ConfigError);
  EXPECT_THROW(parse("[ems]\nn_s = three\n"), cli::ConfigError);
  EXPECT_THROW(parse("[ems]\nn_s = -1\n"), cli::ConfigError);
  EXPECT_THROW(parse("[data]\nsynthetic = maybe\n"), cli::ConfigError);
  EXPECT_THROW(parse("[data]\nstart = yesterday\n"), cli::ConfigError);
  EXPECT_THROW(parse("[vppha]\nr = 1,2\n"), cli::ConfigError);
  EXPECT_THROW(parse("[ocp]\neps_start = 1e-9\n"), cli::ConfigError);
}

TEST(ValidateConfig, RejectsInconsistentSettings) {
  auto c = parse(kSmall);
  EXPECT_NO_THROW(cli::validate(c));
  auto bad = c;
  bad.ems.delta = 1.0;  // mpc replans every half hour
  EXPECT_THROW(cli::validate(bad), cli::ConfigError);
  bad.strategy = "pha";
  EXPECT_NO_THROW(cli::validate(bad));
  bad = c;
  bad.alphas = {-1.0};
  EXPECT_THROW(cli::validate(bad), cli::ConfigError);
  bad = c;
  bad.strategy = "best";
  EXPECT_THROW(cli::validate(bad), cli::ConfigError);
  bad = c;
  bad.data.synthetic.enabled = false;
  EXPECT_THROW(cli::validate(bad), cli::ConfigError);
  bad.data.measurements = "/nonexistent/m.csv";
  bad.data.tariff = "/nonexistent/t.csv";
  bad.data.start = parse_timestamp("2023-01-01T00:00");
  bad.data.end = parse_timestamp("2023-01-02T00:00");
  EXPECT_THROW(cli::validate(bad), cli::ConfigError);
  bad = c;
  bad.ems.n_red = 13;
  EXPECT_THROW(cli::validate(bad), cli::ConfigError);
  bad = c;
  bad.data.cluster = "season";
  EXPECT_THROW(cli::validate(bad), cli::ConfigError);
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run({"simulate", "--config", (dir_ / "missing.ini").string()}), cli::kConfigError);
  EXPECT_EQ(run({"simulate", "--config", write_config("[ems]\nbogus = 1\n")}), cli::kConfigError);
  EXPECT_NE(err_.str().find("bogus"), std::string::npos);
  EXPECT_EQ(run({"simulate"}), cli::kConfigError);
  EXPECT_EQ(run({"frobnicate", "--config", write_config(kSmall)}), cli::kConfigError);
  EXPECT_EQ(run({"simulate", "--config", write_config(kSmall), "--strategy", "lqr"}), cli::kConfigError);
  EXPECT_EQ(run({"simulate", "--config", write_config(kSmall), "--workers", "0"}), cli::kConfigError);
  // starved Newton budget: every cold solve fails
  const auto starving = write_config(std::string(kSmall) + "[ocp]\nmax_iters = 1\n", "starve.ini");
  EXPECT_EQ(run({"simulate", "--config", starving, "--strategy", "mpc", "--out", out("s")}), cli::kSolverFailure);
  EXPECT_NE(err_.str().find("solver failure"), std::string::npos);
  // data file with a gap
  std::ofstream(dir_ / "m.csv") << "timestamp,cons_kw,pv_kw\n2023-01-01T00:00,1,0\n2023-01-01T00:30,1,0\n2023-01-01T02:00,1,0\n";
  std::ofstream(dir_ / "t.csv") << "timestamp,pr_buy,pr_sell\n2023-01-01T00:00,0.2,0.1\n";
  const auto gap = write_config("[data]\nmeasurements = " + (dir_ / "m.csv").string() + "\ntariff = " +
                                    (dir_ / "t.csv").string() + "\nstart = 2023-01-01T00:00\nend = 2023-01-01T02:00\n" +
                                    "[ems]\ndelta_minutes = 30\n",
                                "gap.ini");
  EXPECT_EQ(run({"simulate", "--config", gap}), cli::kConfigError);
}

TEST_F(CliTest, GenScenariosWritesModelsAndScenarios) {
  const auto cfg = write_config(kSmall);
  ASSERT_EQ(run({"gen-scenarios", "--config", cfg, "--out", out("a")}), cli::kOk);
  ASSERT_EQ(run({"gen-scenarios", "--config", cfg, "--out", out("b")}), cli::kOk);
  EXPECT_EQ(slurp(dir_ / "a" / "scenarios_cons.csv"), slurp(dir_ / "b" / "scenarios_cons.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "scenarios_pv.csv"), slurp(dir_ / "b" / "scenarios_pv.csv"));
  ASSERT_EQ(run({"gen-scenarios", "--config", cfg, "--out", out("c"), "--seed", "9"}), cli::kOk);
  EXPECT_NE(slurp(dir_ / "a" / "scenarios_cons.csv"), slurp(dir_ / "c" / "scenarios_cons.csv"));

  std::ifstream sc(dir_ / "a" / "scenarios_cons.csv");
  const auto x = read_scenario_csv(sc, 0.5);
  EXPECT_EQ(x.scenarios(), 12u);
  EXPECT_EQ(x.steps(), 48u);
  const auto text = slurp(dir_ / "a" / "scenarios_cons.csv");
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), 1 + 12u * 48u);

  for (const char* f : {"cons_weekday.csv", "cons_weekend.csv", "pv_weekday.csv", "pv_weekend.csv"}) {
    std::ifstream in(dir_ / "a" / "models" / f);
    ASSERT_TRUE(in) << f;
    const auto m = read_model_csv(in);
    EXPECT_EQ(m.curves.size(), 21u);
    EXPECT_EQ(m.steps_per_day, 48u);
  }
}

TEST_F(CliTest, ReduceReportsProductAndMonotoneCosts) {
  const auto cfg = write_config(std::string(kSmall) + "n_red = 1,3,6,12\n");
  ASSERT_EQ(run({"reduce", "--config", cfg, "--out", out("r")}), cli::kOk);
  std::ifstream pr(dir_ / "r" / "product.csv");
  EXPECT_EQ(read_scenario_csv(pr, 0.5).scenarios(), 9u);
  std::ifstream red(dir_ / "r" / "reduction.csv");
  const auto t = csv::read_table(red);
  std::map<std::string, std::vector<double>> cost;
  for (const auto& row : t.rows) cost[row[0]].push_back(csv::parse_double(row[2]));
  for (const auto& [name, v] : cost) {
    ASSERT_EQ(v.size(), 4u);
    for (std::size_t i = 1; i < v.size(); ++i) EXPECT_LE(v[i], v[i - 1] + 1e-12) << name;
    EXPECT_EQ(v.back(), 0.0) << name;  // n_red = S
  }

  const auto big = write_config(std::string(kSmall) + "[ems]\nn_s = 20\nn_red = 15\n", "big.ini");
  // duplicate section keys are fine; the later value wins
  ASSERT_EQ(run({"reduce", "--config", big, "--out", out("b")}), cli::kOk);
  std::ifstream pb(dir_ / "b" / "product.csv");
  EXPECT_EQ(read_scenario_csv(pb, 0.5).scenarios(), 225u);
}

TEST_F(CliTest, SimulateIsReproducibleAndConsistent) {
  const auto cfg = write_config(kSmall);
  ASSERT_EQ(run({"simulate", "--config", cfg, "--out", out("a")}), cli::kOk);
  ASSERT_EQ(run({"simulate", "--config", cfg, "--out", out("b"), "--workers", "2"}), cli::kOk);
  for (const char* f : {"trace_mpc.csv", "trace_pha.csv", "trace_vppha.csv", "summary.csv", "eta.csv"})
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;

  std::ifstream s(dir_ / "a" / "summary.csv");
  const auto t = csv::read_table(s);
  ASSERT_EQ(t.rows.size(), 3u);
  for (const auto& row : t.rows) {
    const double bill = csv::parse_double(row[t.column("bill")]), rho = csv::parse_double(row[t.column("reference_bill")]);
    EXPECT_NEAR(csv::parse_double(row[t.column("bill_reduction_pct")]), 100.0 * (rho - bill) / rho, 1e-12);
    std::ifstream tr(dir_ / "a" / ("trace_" + row[0] + ".csv"));
    const auto trace = read_trace_csv(tr);
    ASSERT_EQ(trace.size(), 48u);
    EXPECT_EQ(trace.back().bill_cum, bill);
  }
  EXPECT_EQ(t.rows[0][0], "mpc");
  EXPECT_EQ(csv::parse_double(t.rows[0][t.column("eta_vs_mpc")]), 0.0);

  std::ifstream e(dir_ / "a" / "eta.csv");
  const auto eta = csv::read_table(e);
  ASSERT_EQ(eta.rows.size(), 48u);
  for (const auto& row : eta.rows)
    if (!row[eta.column("eta_mpc")].empty()) EXPECT_EQ(csv::parse_double(row[eta.column("eta_mpc")]), 0.0);
}

TEST_F(CliTest, SweepAlphaZeroRowMatchesPhaRun) {
  const auto cfg = write_config(kSmall);
  ASSERT_EQ(run({"simulate", "--config", cfg, "--out", out("s"), "--strategy", "pha"}), cli::kOk);
  ASSERT_EQ(run({"sweep-alpha", "--config", cfg, "--out", out("w"), "--workers", "2"}), cli::kOk);
  std::ifstream sw(dir_ / "w" / "sweep_alpha.csv");
  const auto t = csv::read_table(sw);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(csv::parse_double(t.rows[0][0]), 0.0);
  std::ifstream s(dir_ / "s" / "summary.csv");
  const auto summary = csv::read_table(s);
  EXPECT_EQ(t.rows[0][t.column("bill")], summary.rows[0][summary.column("bill")]);
}

TEST_F(CliTest, CalibrateWritesOneRowPerModel) {
  const auto cfg = write_config(std::string(kSmall) + "[calibrate]\ngrid = 0.2,0.5,0.8\nbatch = 40\n");
  ASSERT_EQ(run({"calibrate", "--config", cfg, "--out", out("c")}), cli::kOk);
  std::ifstream in(dir_ / "c" / "calibration.csv");
  const auto t = csv::read_table(in);
  ASSERT_EQ(t.rows.size(), 4u);
  for (const auto& row : t.rows) {
    const double a = csv::parse_double(row[t.column("alpha_corr")]);
    EXPECT_TRUE(a == 0.2 || a == 0.5 || a == 0.8);
  }
}
