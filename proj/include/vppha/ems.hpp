#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vppha/core_process.hpp"
#include "vppha/csv.hpp"
#include "vppha/nonanticipativity.hpp"
#include "vppha/ocp_solver.hpp"
#include "vppha/progressive_hedging.hpp"
#include "vppha/scenario_gen.hpp"
#include "vppha/scenario_red.hpp"
#include "vppha/timestamp.hpp"

namespace vppha {

class DegenerateBaseline : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class MissingData : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Wraps a solver failure during the closed loop with the replan time.
class SimulationFailure : public NonConvergence {
 public:
  SimulationFailure(Timestamp t, const std::string& what)
      : NonConvergence("at " + format_timestamp(t) + ": " + what), when(t) {}
  Timestamp when;
};

struct BatteryParams {
  double q_max = 13.0;
  double p_min = -8.0;
  double p_max = 8.0 * 0.9;
  double rho_c = 0.9;
  double rho_d = 0.9;
  double q0 = 6.5;

  void validate() const {
    if (!(q_max > 0.0)) throw std::invalid_argument("battery: q_max must be > 0");
    if (!(q0 >= 0.0 && q0 <= q_max)) throw std::invalid_argument("battery: q0 must lie in [0, q_max]");
    if (!(p_min < 0.0 && p_max > 0.0)) throw std::invalid_argument("battery: need p_min < 0 < p_max");
    if (!(rho_c > 0.0 && rho_c <= 1.0 && rho_d > 0.0 && rho_d <= 1.0))
      throw std::invalid_argument("battery: efficiencies must lie in (0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Smoothed cost model
// ---------------------------------------------------------------------------

inline double smooth_max(double x, double mu) { return 0.5 * (x + std::sqrt(x * x + mu)); }
inline double smooth_min(double x, double mu) { return 0.5 * (x - std::sqrt(x * x + mu)); }

/// Value with first and second derivative in one variable.
struct Smooth1 {
  double v, d1, d2;
};

inline Smooth1 smooth_max_d(double x, double mu) {
  const double s = std::sqrt(x * x + mu);
  return {0.5 * (x + s), 0.5 * (1.0 + x / s), 0.5 * mu / (s * s * s)};
}
inline Smooth1 smooth_min_d(double x, double mu) {
  const double s = std::sqrt(x * x + mu);
  return {0.5 * (x - s), 0.5 * (1.0 - x / s), -0.5 * mu / (s * s * s)};
}

/// Meter power with its derivatives in p_b.
inline Smooth1 meter_power_d(double p_b, double cons, double pv, const BatteryParams& bat, double mu) {
  const auto mx = smooth_max_d(p_b, mu), mn = smooth_min_d(p_b, mu);
  return {cons - pv + mx.v / bat.rho_c + bat.rho_d * mn.v, mx.d1 / bat.rho_c + bat.rho_d * mn.d1,
          mx.d2 / bat.rho_c + bat.rho_d * mn.d2};
}

inline double meter_power(double p_b, double cons, double pv, const BatteryParams& bat, double mu) {
  return meter_power_d(p_b, cons, pv, bat, mu).v;
}

/// Unsmoothed meter power used for accounting.
inline double meter_power_exact(double p_b, double cons, double pv, const BatteryParams& bat) {
  return cons - pv + std::max(p_b, 0.0) / bat.rho_c + bat.rho_d * std::min(p_b, 0.0);
}

/// Smoothed stage cost and its derivatives in p_b (the cost does not depend on q).
inline Smooth1 stage_cost_d(double p_b, double cons, double pv, double pr_buy, double pr_sell,
                            const BatteryParams& bat, double mu) {
  const auto pm = meter_power_d(p_b, cons, pv, bat, mu);
  const auto mx = smooth_max_d(pm.v, mu), mn = smooth_min_d(pm.v, mu);
  const double g1 = pr_buy * mx.d1 + pr_sell * mn.d1, g2 = pr_buy * mx.d2 + pr_sell * mn.d2;
  return {pr_buy * mx.v + pr_sell * mn.v, g1 * pm.d1, g2 * pm.d1 * pm.d1 + g1 * pm.d2};
}

inline double stage_cost(double p_b, double cons, double pv, double pr_buy, double pr_sell, const BatteryParams& bat,
                         double mu) {
  return stage_cost_d(p_b, cons, pv, pr_buy, pr_sell, bat, mu).v;
}

// ---------------------------------------------------------------------------
// Prices and measurements
// ---------------------------------------------------------------------------

/// Prices over one planning window, one value per step.
struct Tariff {
  Trajectory pr_buy, pr_sell;

  void validate() const {
    if (pr_buy.steps() != pr_sell.steps()) throw ShapeMismatch("Tariff: buy and sell lengths differ");
    for (std::size_t k = 0; k < pr_buy.steps(); ++k)
      if (!(pr_sell(k, 0) >= 0.0 && pr_sell(k, 0) <= pr_buy(k, 0)))
        throw std::invalid_argument("Tariff: need 0 <= pr_sell <= pr_buy");
  }
};

/// Regularly sampled series starting at `start`.
struct TimeSeries {
  Timestamp start;
  std::int64_t step_minutes = 10;
  std::vector<std::vector<double>> columns;

  std::size_t size() const { return columns.empty() ? 0 : columns.front().size(); }
  Timestamp time(std::size_t j) const { return start + static_cast<std::int64_t>(j) * step_minutes; }
  Timestamp end() const { return time(size()); }
  /// Index of the sample covering t, or nullopt outside [start, end).
  std::optional<std::size_t> index(Timestamp t) const {
    if (t < start) return std::nullopt;
    const auto j = static_cast<std::size_t>((t - start) / step_minutes);
    if (j >= size()) return std::nullopt;
    return j;
  }
};

/// Price lookup with 24 h wrap-back when the planning window runs past the data.
struct TariffSeries {
  TimeSeries prices;  // columns: pr_buy, pr_sell

  std::pair<double, double> at(Timestamp t) const {
    if (t < prices.start) throw MissingData("no tariff before " + format_timestamp(prices.start));
    while (!prices.index(t)) {
      if (prices.end() - prices.start < 1440) throw MissingData("tariff covers less than one day");
      t = t + (-1440);
    }
    const auto j = *prices.index(t);
    return {prices.columns[0][j], prices.columns[1][j]};
  }

  Tariff window(Timestamp start, const TimeGrid& grid, std::int64_t step_minutes) const {
    Tariff out{Trajectory(grid, 1), Trajectory(grid, 1)};
    for (std::size_t k = 0; k < grid.K; ++k) {
      const auto [b, s] = at(start + static_cast<std::int64_t>(k) * step_minutes);
      out.pr_buy(k, 0) = b;
      out.pr_sell(k, 0) = s;
    }
    return out;
  }
};

/// Reads `timestamp,<names...>` at a fixed cadence; a gap is MissingData.
inline TimeSeries read_series_csv(std::istream& in, const std::vector<std::string>& names) {
  const auto table = csv::read_table(in);
  const auto ct = table.column("timestamp");
  std::vector<std::size_t> cols;
  for (const auto& n : names) cols.push_back(table.column(n));
  TimeSeries ts;
  ts.columns.assign(names.size(), {});
  if (table.rows.empty()) throw MissingData("series has no rows");
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const Timestamp t = parse_timestamp(table.rows[r][ct]);
    if (r == 0) {
      ts.start = t;
    } else if (r == 1) {
      ts.step_minutes = t - ts.start;
      if (ts.step_minutes <= 0) throw ParseError("timestamps must increase");
    } else if (t != ts.time(r)) {
      throw MissingData("gap or cadence change at " + format_timestamp(t));
    }
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const double v = csv::parse_double(table.rows[r][cols[c]]);
      if (!std::isfinite(v)) throw ParseError("non-finite value at " + format_timestamp(t));
      ts.columns[c].push_back(v);
    }
  }
  return ts;
}

inline void write_series_csv(std::ostream& out, const TimeSeries& ts, const std::vector<std::string>& names) {
  out << "timestamp";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  for (std::size_t j = 0; j < ts.size(); ++j) {
    out << format_timestamp(ts.time(j));
    for (const auto& c : ts.columns) out << ',' << csv::format(c[j]);
    out << '\n';
  }
}

inline TimeSeries read_measurements_csv(std::istream& in) {
  auto ts = read_series_csv(in, {"cons_kw", "pv_kw"});
  for (const auto& c : ts.columns)
    for (double v : c)
      if (v < 0.0) throw ParseError("measurements must be nonnegative");
  return ts;
}

inline TariffSeries read_tariff_csv(std::istream& in) {
  TariffSeries t{read_series_csv(in, {"pr_buy", "pr_sell"})};
  for (std::size_t j = 0; j < t.prices.size(); ++j)
    if (!(t.prices.columns[1][j] >= 0.0 && t.prices.columns[1][j] <= t.prices.columns[0][j]))
      throw ParseError("tariff needs 0 <= pr_sell <= pr_buy at " + format_timestamp(t.prices.time(j)));
  return t;
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

/// Rectangle rule with exact max/min: sum_k dt (pr_b max(P_m,0) + pr_s min(P_m,0)).
inline double bill_increment(double p_m, double pr_buy, double pr_sell, double dt) {
  return dt * (pr_buy * std::max(p_m, 0.0) + pr_sell * std::min(p_m, 0.0));
}

inline double bill(const Trajectory& p_m, const Tariff& tariff) {
  if (p_m.steps() != tariff.pr_buy.steps()) throw ShapeMismatch("bill: lengths differ");
  double b = 0.0;
  for (std::size_t k = 0; k < p_m.steps(); ++k)
    b += bill_increment(p_m(k, 0), tariff.pr_buy(k, 0), tariff.pr_sell(k, 0), p_m.grid().dt);
  return b;
}

/// Bill without a battery.
inline double reference_bill(const Trajectory& cons, const Trajectory& pv, const Tariff& tariff) {
  Trajectory pm(cons.grid(), 1);
  for (std::size_t k = 0; k < cons.steps(); ++k) pm(k, 0) = cons(k, 0) - pv(k, 0);
  return bill(pm, tariff);
}

/// 100 ((rho - candidate) / (rho - mpc) - 1)
inline double performance_ratio(double bill_candidate, double bill_mpc, double rho) {
  if (std::abs(rho - bill_mpc) < 1e-12) throw DegenerateBaseline("performance_ratio: baseline saves nothing");
  return 100.0 * ((rho - bill_candidate) / (rho - bill_mpc) - 1.0);
}

// ---------------------------------------------------------------------------
// Optimal-control mapping
// ---------------------------------------------------------------------------

/// Stage cost of the battery problem; xi = (cons, pv).
inline StageCostFn battery_stage_cost(const Tariff& tariff, const BatteryParams& bat, double mu) {
  std::vector<double> buy(tariff.pr_buy.steps()), sell(buy.size());
  for (std::size_t k = 0; k < buy.size(); ++k) {
    buy[k] = tariff.pr_buy(k, 0);
    sell[k] = tariff.pr_sell(k, 0);
  }
  return [buy = std::move(buy), sell = std::move(sell), bat, mu](
             std::size_t k, const Eigen::Ref<const VectorXd>&, const Eigen::Ref<const VectorXd>& u,
             std::span<const double> xi, StageDerivatives& out) {
    const auto c = stage_cost_d(u(0), xi[0], xi[1], buy[k], sell[k], bat, mu);
    out.value = c.v;
    out.grad_y.setZero();
    out.grad_u(0) = c.d1;
    out.hess_yy.setZero();
    out.hess_yu.setZero();
    out.hess_uu(0, 0) = c.d2;
  };
}

/// Battery problem for one scenario. State Q, control P_b, rows
/// -Q <= 0, Q - q_max <= 0, p_min - P_b <= 0, P_b - p_max <= 0, terminal
/// Q_K = q0. At k = 0 the state is fixed by the measurement, so its two
/// rows are replaced by the constant row -1 <= 0.
inline OCPInstance build_ocp_instance(const Trajectory& scenario, const Tariff& tariff, const BatteryParams& bat,
                                      double mu, const Trajectory& lambda_aug, const Trajectory& zeta_aug, double r,
                                      double q_init) {
  if (scenario.channels() != 2) throw ShapeMismatch("build_ocp_instance: scenario needs (cons, pv) channels");
  if (tariff.pr_buy.steps() != scenario.steps()) throw ShapeMismatch("build_ocp_instance: tariff length");
  const TimeGrid grid = scenario.grid();
  OCPInstance in;
  in.grid = grid;
  in.n = 1;
  in.m = 1;
  in.p = 4;
  in.q = 1;
  in.A = {MatrixXd::Zero(1, 1)};
  in.B = {MatrixXd::Ones(1, 1)};
  MatrixXd C(4, 1), D(4, 1), C0 = MatrixXd::Zero(4, 1);
  C << -1.0, 1.0, 0.0, 0.0;
  D << 0.0, 0.0, -1.0, 1.0;
  VectorXd E(4), E0(4);
  E << 0.0, -bat.q_max, bat.p_min, -bat.p_max;
  E0 << -1.0, -1.0, bat.p_min, -bat.p_max;
  in.C.assign(grid.K, C);
  in.D.assign(grid.K, D);
  in.E.assign(grid.K, E);
  in.C[0] = C0;
  in.E[0] = E0;
  in.F = MatrixXd::Ones(1, 1);
  in.G = VectorXd::Constant(1, -bat.q0);
  in.y0 = VectorXd::Constant(1, q_init);
  in.stage_cost = battery_stage_cost(tariff, bat, mu);
  in.xi = scenario;
  in.lambda_aug = lambda_aug;
  in.zeta_aug = zeta_aug;
  in.r = r;
  in.control_bound = std::max(-bat.p_min, bat.p_max);
  return in;
}

/// Joint homotopy in (mu, eps): one eps level per step, with mu falling
/// geometrically from mu_start to mu over the first `mu_levels` steps. A
/// sharp max/min makes the cold Newton solve stall without it.
struct ContinuationLevel {
  double mu, eps;
};

inline std::vector<ContinuationLevel> continuation_path(const std::vector<double>& eps_schedule, double mu,
                                                        std::size_t mu_levels, double mu_start = 1e-1) {
  std::vector<ContinuationLevel> out;
  for (std::size_t i = 0; i < eps_schedule.size(); ++i) {
    double m = mu;
    if (mu_levels > 1 && i + 1 < mu_levels && mu_start > mu) {
      const double t = static_cast<double>(i) / static_cast<double>(mu_levels - 1);
      m = std::exp((1.0 - t) * std::log(mu_start) + t * std::log(mu));
    }
    out.push_back({m, eps_schedule[i]});
  }
  return out;
}

/// Inserts the geometric midpoint between consecutive levels.
inline std::vector<ContinuationLevel> refine(const std::vector<ContinuationLevel>& path) {
  std::vector<ContinuationLevel> out;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i > 0)
      out.push_back({std::sqrt(path[i - 1].mu * path[i].mu), std::sqrt(path[i - 1].eps * path[i].eps)});
    out.push_back(path[i]);
  }
  return out;
}

/// Cold solve of a battery instance along `path`; `inst` must carry the
/// final mu. Returns the solution at the last level.
inline OCPSolution solve_battery_ocp(const OCPInstance& inst, const Tariff& tariff, const BatteryParams& bat,
                                     const std::vector<ContinuationLevel>& path, const OCPSolverOptions& opts) {
  if (path.empty()) throw std::invalid_argument("solve_battery_ocp: empty path");
  OCPInstance work = inst;
  OCPSolution sol;
  int iters = 0;
  for (std::size_t i = 0; i < path.size(); ++i) {
    const bool last = i + 1 == path.size();
    work.stage_cost = last ? inst.stage_cost : battery_stage_cost(tariff, bat, path[i].mu);
    OCPSolverOptions o = opts;
    o.eps_schedule = {path[i].eps};
    if (!last) o.newton_tol = std::max(opts.newton_tol, opts.stage_tol_factor * path[i].eps);
    sol = solve_socp(work, o, i == 0 ? nullptr : &sol);
    iters += sol.newton_iters;
  }
  sol.newton_iters = iters;
  return sol;
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

struct EmsConfig {
  BatteryParams battery;
  double mu_smooth = 1e-5;
  double delta = 1.0 / 6.0;  // hours; also the control and measurement cadence
  double horizon_h = 24.0;
  double replan_h = 24.0;
  std::size_t n_s = 100;
  std::size_t n_red = 15;
  VpphaParams vppha = [] {
    VpphaParams p;
    p.alpha = 5.0;
    p.r = 0.3;
    p.primal_tol = 1e-3;
    p.drift_tol = 1e-3;
    p.max_outer_iters = 100;
    p.init_r = 1e-8;
    return p;
  }();
  double alpha_corr_cons = 0.5;
  double alpha_corr_pv = 0.5;
  /// Start the consumption rank chain from the last measurement.
  bool seed_from_measurement = false;
  /// Keep the battery idle (P_b = 0); used for audits.
  bool passive = false;
  OCPSolverOptions ocp = [] {
    OCPSolverOptions o;
    o.eps_schedule = geometric_schedule(1e-1, 1e-8, 16);
    return o;
  }();
  std::size_t mu_levels = 12;
  /// Short schedule for warm-started solves within one replan.
  std::vector<double> warm_eps_schedule = geometric_schedule(1e-5, 1e-8, 3);

  std::size_t steps(double hours) const { return static_cast<std::size_t>(std::llround(hours / delta)); }
  std::int64_t step_minutes() const { return std::llround(delta * 60.0); }

  void validate() const {
    battery.validate();
    vppha.validate();
    if (!(mu_smooth > 0.0)) throw std::invalid_argument("ems: mu_smooth must be > 0");
    if (!(delta > 0.0)) throw std::invalid_argument("ems: delta must be > 0");
    if (std::abs(delta * 60.0 - static_cast<double>(step_minutes())) > 1e-9 || step_minutes() <= 0 ||
        1440 % step_minutes() != 0)
      throw std::invalid_argument("ems: delta must be a whole number of minutes dividing one day");
    if (!(replan_h > 0.0) || !(horizon_h >= replan_h)) throw std::invalid_argument("ems: need horizon_h >= replan_h > 0");
    for (double h : {horizon_h, replan_h})
      if (std::abs(h / delta - std::round(h / delta)) > 1e-9)
        throw std::invalid_argument("ems: horizon and replan periods must be multiples of delta");
    if (n_s < 1 || n_red < 1 || n_red > n_s) throw std::invalid_argument("ems: need 1 <= n_red <= n_s");
    if (!(alpha_corr_cons > 0.0 && alpha_corr_cons < 1.0 && alpha_corr_pv > 0.0 && alpha_corr_pv < 1.0))
      throw std::invalid_argument("ems: alpha_corr must be in (0, 1)");
  }
};

/// Strategy presets on top of `base`. mpc: single scenario, alpha = 0,
/// replanning every half hour. pha: base sizes with alpha = 0. vppha: base
/// as is. The EmsConfig defaults hold the table values (24 h, 100, 15, 5).
inline EmsConfig strategy_preset(const std::string& name, EmsConfig base = {}) {
  if (name == "mpc") {
    base.replan_h = 0.5;
    base.n_s = 1;
    base.n_red = 1;
    base.vppha.alpha = 0.0;
  } else if (name == "pha") {
    base.vppha.alpha = 0.0;
  } else if (name != "vppha") {
    throw std::invalid_argument("unknown strategy '" + name + "'");
  }
  return base;
}

inline const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names{"mpc", "pha", "vppha"};
  return names;
}

/// Scenario fans for consumption and PV over one planning window.
struct ScenarioFans {
  ScenarioProcess cons, pv;  // one channel each
};

/// Produces `n_s` scenarios on `grid` starting at `start`. `last` holds the
/// measurements available at `start` (cons, pv at start - delta), if any.
using ScenarioSource = std::function<ScenarioFans(Timestamp start, const TimeGrid& grid, std::size_t n_s,
                                                  std::mt19937_64& rng, std::optional<std::pair<double, double>> last)>;

/// Scenario source backed by fitted quantile models.
inline ScenarioSource quantile_source(const ModelLibrary& cons, const ModelLibrary& pv, const EmsConfig& cfg) {
  return [&cons, &pv, a_c = cfg.alpha_corr_cons, a_p = cfg.alpha_corr_pv, seed = cfg.seed_from_measurement,
          delta_min = cfg.step_minutes()](Timestamp start, const TimeGrid& grid, std::size_t n_s,
                                          std::mt19937_64& rng, std::optional<std::pair<double, double>> last) {
    if (cons.step_minutes() != delta_min || pv.step_minutes() != delta_min)
      throw std::invalid_argument("quantile models do not match the control cadence");
    ScenarioFans f{ScenarioProcess::equiprobable(grid, 1, n_s), ScenarioProcess::equiprobable(grid, 1, n_s)};
    std::optional<double> rank;
    if (seed && last) rank = measurement_rank(cons, start + (-delta_min), last->first);
    for (std::size_t s = 0; s < n_s; ++s) {
      std::mt19937_64 sub(rng());
      std::optional<double> r0;
      if (rank) r0 = RankChain(a_c).next(*rank, sub);
      const auto c = sample_window(cons, start, grid.K, a_c, sub, r0);
      const auto p = sample_window(pv, start, grid.K, a_p, sub);
      for (std::size_t k = 0; k < grid.K; ++k) {
        f.cons(s, k, 0) = c[k];
        f.pv(s, k, 0) = p[k];
      }
    }
    return f;
  };
}

/// Control of the bundle whose (cons, pv) prefix is nearest to the
/// observations. `observed` holds the released steps 0 .. r - delay of the
/// plan window (two channels).
inline double select_applied_control(const ScenarioProcess& plan, const BundlePartition& part,
                                     const ScenarioProcess& xi, const std::vector<std::array<double, 2>>& observed,
                                     std::size_t r, const BatteryParams& bat) {
  if (r >= plan.steps()) throw std::out_of_range("select_applied_control: r beyond plan");
  const auto& bundles = part.bundles(r);
  std::size_t pick = bundles.front().front();
  if (bundles.size() > 1) {
    const std::size_t released = r + 1 - part.delay_steps();
    if (observed.size() < released) throw MissingData("select_applied_control: observations missing");
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : bundles) {
      const std::size_t s = b.front();
      double d2 = 0.0;
      for (std::size_t k = 0; k < released; ++k)
        for (std::size_t i = 0; i < 2; ++i) {
          const double e = xi(s, k, i) - observed[k][i];
          d2 += e * e;
        }
      if (d2 < best) {
        best = d2;
        pick = s;
      }
    }
  }
  return std::clamp(plan(pick, r, 0), bat.p_min, bat.p_max);
}

struct TraceRow {
  Timestamp t;
  double q_kwh, p_b_kw, p_m_kw, bill_cum;
};

struct ClipEvent {
  Timestamp t;
  double q_unclipped;
};

struct SimulationResult {
  double bill = 0.0;
  double reference = 0.0;
  std::vector<double> reference_cum;  // battery-less bill up to each step
  std::vector<TraceRow> trace;
  std::vector<ClipEvent> clips;
  std::vector<double> pr_buy, pr_sell;  // applied prices per step
  int replans = 0;
  int unconverged_replans = 0;
  std::vector<int> outer_iterations;
};

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  out << "t,q_kwh,p_b_kw,p_m_kw,bill_cum\n";
  for (const auto& r : trace)
    out << format_timestamp(r.t) << ',' << csv::format(r.q_kwh) << ',' << csv::format(r.p_b_kw) << ','
        << csv::format(r.p_m_kw) << ',' << csv::format(r.bill_cum) << '\n';
}

inline std::vector<TraceRow> read_trace_csv(std::istream& in) {
  const auto t = csv::read_table(in);
  const auto ct = t.column("t"), cq = t.column("q_kwh"), cb = t.column("p_b_kw"), cm = t.column("p_m_kw"),
             cc = t.column("bill_cum");
  std::vector<TraceRow> out;
  for (const auto& r : t.rows)
    out.push_back({parse_timestamp(r[ct]), csv::parse_double(r[cq]), csv::parse_double(r[cb]),
                   csv::parse_double(r[cm]), csv::parse_double(r[cc])});
  return out;
}

/// Receding-horizon simulation over [t0, tf): replan every replan_h hours
/// from the measured state, apply one control per delta, and account the
/// exact bill. Measurements are indexed at the control cadence.
inline SimulationResult rolling_horizon(const EmsConfig& cfg, const TimeSeries& meas, const TariffSeries& tariff,
                                        const ScenarioSource& source, std::mt19937_64& rng, Timestamp t0,
                                        Timestamp tf) {
  cfg.validate();
  const std::int64_t step = cfg.step_minutes();
  if (meas.step_minutes != step) throw MissingData("measurement cadence differs from delta");
  if (tf <= t0 || (tf - t0) % step != 0) throw std::invalid_argument("rolling_horizon: bad time range");
  const auto n_steps = static_cast<std::size_t>((tf - t0) / step);
  const auto first = meas.index(t0);
  if (!first || !meas.index(tf + (-step))) throw MissingData("measurements do not cover the simulation range");
  if (*first < 1 && !cfg.passive) throw MissingData("need one measurement before t0");

  const double dt = cfg.delta;
  const std::size_t K = cfg.steps(cfg.horizon_h), replan = cfg.steps(cfg.replan_h);
  const std::size_t d_steps = delay_steps_for(cfg.delta, dt);
  const auto& bat = cfg.battery;
  const auto& cons = meas.columns[0];
  const auto& pv = meas.columns[1];

  SimulationResult res;
  double q = bat.q0;
  ScenarioProcess plan, xi;
  BundlePartition part;
  std::size_t plan_start = 0;
  std::vector<std::array<double, 2>> observed;

  for (std::size_t j = 0; j < n_steps; ++j) {
    const Timestamp t = t0 + static_cast<std::int64_t>(j) * step;
    const std::size_t mj = *first + j;
    if (!cfg.passive && j % replan == 0) {
      const TimeGrid grid(0.0, dt, K);
      const Tariff window = tariff.window(t, grid, step);
      const std::pair<double, double> last{cons[mj - 1], pv[mj - 1]};
      try {
        auto fans = source(t, grid, cfg.n_s, rng, last);
        xi = cfg.n_red < cfg.n_s ? reduce_pair(fans.cons, fans.pv, cfg.n_red).product
                                 : product_process(fans.cons, fans.pv);
        part = compute_bundles(xi, d_steps);
        const double q_init = q;
        const auto path = continuation_path(cfg.ocp.eps_schedule, cfg.mu_smooth, cfg.mu_levels);
        OcpSubproblem sub(
            xi.scenarios(),
            [&, q_init](std::size_t s) {
              const Trajectory zero(grid, 1);
              return build_ocp_instance(xi.scenario(s), window, bat, cfg.mu_smooth, zero, zero, cfg.vppha.r, q_init);
            },
            cfg.ocp, cfg.warm_eps_schedule, [&](const OCPInstance& inst) {
              try {
                return solve_battery_ocp(inst, window, bat, path, cfg.ocp);
              } catch (const NonConvergence&) {
                return solve_battery_ocp(inst, window, bat, refine(path), cfg.ocp);
              }
            });
        const ScenarioProcess shape = ScenarioProcess(grid, 1, xi.probabilities());
        auto out = vppha_solve(shape, cfg.vppha, part, sub.as_subproblem());
        plan = std::move(out.policy);
        ++res.replans;
        if (!out.converged) ++res.unconverged_replans;
        res.outer_iterations.push_back(static_cast<int>(out.history.size()));
      } catch (const NonConvergence& e) {
        throw SimulationFailure(t, e.what());
      } catch (const Infeasible& e) {
        throw SimulationFailure(t, e.what());
      }
      plan_start = j;
      observed.clear();
    }
    const std::size_t r = j - plan_start;
    double p_b = 0.0;
    if (!cfg.passive) {
      // steps released by time t: plan steps up to r - d_steps
      while (observed.size() + d_steps <= r) {
        const std::size_t mk = *first + plan_start + observed.size();
        observed.push_back({cons[mk], pv[mk]});
      }
      p_b = select_applied_control(plan, part, xi, observed, r, bat);
    }
    const auto [pb_price, ps_price] = tariff.at(t);
    const double p_m = meter_power_exact(p_b, cons[mj], pv[mj], bat);
    res.bill += bill_increment(p_m, pb_price, ps_price, dt);
    res.trace.push_back({t, q, p_b, p_m, res.bill});
    res.pr_buy.push_back(pb_price);
    res.pr_sell.push_back(ps_price);
    double next = q + dt * p_b;
    if (next < 0.0 || next > bat.q_max) {
      res.clips.push_back({t + step, next});
      next = std::clamp(next, 0.0, bat.q_max);
    }
    q = next;
  }
  for (std::size_t j = 0; j < n_steps; ++j) {
    res.reference += bill_increment(cons[*first + j] - pv[*first + j], res.pr_buy[j], res.pr_sell[j], dt);
    res.reference_cum.push_back(res.reference);
  }
  return res;
}

/// Offline audit: bill recomputed from the logged meter power and prices.
inline double audit_bill(const SimulationResult& r, double dt) {
  double b = 0.0;
  for (std::size_t j = 0; j < r.trace.size(); ++j) b += bill_increment(r.trace[j].p_m_kw, r.pr_buy[j], r.pr_sell[j], dt);
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic world
// ---------------------------------------------------------------------------

/// Household-like consumption, rooftop PV and day-ahead-like prices on a
/// fixed cadence, reproducible from a seed.
struct SyntheticWorld {
  TimeSeries measurements;  // cons_kw, pv_kw
  TariffSeries tariff;
};

inline SyntheticWorld make_synthetic_world(Timestamp start, std::size_t days, std::int64_t step_minutes,
                                           std::uint64_t seed) {
  if (step_minutes <= 0 || 1440 % step_minutes != 0) throw std::invalid_argument("synthetic world: bad cadence");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const auto per_day = static_cast<std::size_t>(1440 / step_minutes);
  const std::size_t n = days * per_day;
  const double pi = std::acos(-1.0);
  SyntheticWorld w;
  w.measurements.start = start;
  w.measurements.step_minutes = step_minutes;
  w.measurements.columns.assign(2, std::vector<double>(n));
  w.tariff.prices.start = start;
  w.tariff.prices.step_minutes = step_minutes;
  w.tariff.prices.columns.assign(2, std::vector<double>(n));
  double ar = 0.0, cloud = 0.0, price_ar = 0.0;
  for (std::size_t d = 0; d < days; ++d) {
    const Timestamp day = start + static_cast<std::int64_t>(d * 1440);
    const bool weekend = day.weekend();
    const double doy = static_cast<double>((day.day().time_since_epoch().count() + 719468) % 365);
    const double season = 0.5 + 0.5 * std::cos(2.0 * pi * (doy - 172.0) / 365.0);  // 1 in summer
    cloud = 0.6 * cloud + 0.4 * U(rng);
    const double day_level = 0.9 + 0.2 * U(rng);
    for (std::size_t i = 0; i < per_day; ++i) {
      const std::size_t j = d * per_day + i;
      const double h = static_cast<double>(i * static_cast<std::size_t>(step_minutes)) / 60.0;
      auto bump = [&](double c, double wdt) { return std::exp(-0.5 * (h - c) * (h - c) / (wdt * wdt)); };
      const double base = 0.35 + (weekend ? 0.9 : 1.1) * bump(weekend ? 9.0 : 7.5, 1.0) + 1.6 * bump(19.0, 1.6) +
                          (weekend ? 0.5 : 0.2) * bump(13.0, 2.0);
      ar = 0.9 * ar + 0.25 * nd(rng);
      const double spike = U(rng) < 0.02 ? 1.5 * U(rng) : 0.0;
      w.measurements.columns[0][j] = std::max(0.0, day_level * base * std::exp(0.3 * ar) + spike);
      const double sun = std::max(0.0, std::sin(pi * (h - 6.0) / 14.0));
      w.measurements.columns[1][j] =
          std::max(0.0, (2.0 + 3.0 * season) * std::pow(sun, 1.5) * (1.0 - 0.7 * cloud) * (1.0 + 0.1 * nd(rng)));
      price_ar = 0.95 * price_ar + 0.01 * nd(rng);
      const double buy = std::max(0.05, 0.16 + 0.10 * bump(8.0, 1.5) + 0.16 * bump(19.5, 2.0) -
                                            0.08 * bump(13.5, 2.5) - 0.05 * bump(3.0, 2.5) + price_ar);
      w.tariff.prices.columns[0][j] = buy;
      w.tariff.prices.columns[1][j] = std::min(buy, 0.06);
    }
  }
  return w;
}

/// Complete days of one measurement column, for quantile fitting.
inline std::vector<DayTrajectory> split_days(const TimeSeries& ts, std::size_t column, Timestamp from, Timestamp to) {
  std::vector<DayTrajectory> out;
  const auto per_day = static_cast<std::size_t>(1440 / ts.step_minutes);
  for (std::size_t j = 0; j < ts.size(); ++j) {
    const Timestamp t = ts.time(j);
    if (t.minute_of_day() != 0 || t < from || !(t + 1440 <= to) || j + per_day > ts.size()) continue;
    out.push_back({t, std::vector<double>(ts.columns[column].begin() + static_cast<std::ptrdiff_t>(j),
                                          ts.columns[column].begin() + static_cast<std::ptrdiff_t>(j + per_day))});
  }
  return out;
}

}  // namespace vppha
