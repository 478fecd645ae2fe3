#pragma once

#include <CLI11.hpp>
#include <tbb/parallel_for.h>
#include <tbb/info.h>
#include <tbb/task_arena.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppha/ems.hpp"

namespace vppha::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kOk = 0, kOther = 1, kConfigError = 2, kSolverFailure = 3 };

struct SyntheticSpec {
  bool enabled = false;
  std::uint64_t seed = 1;
  Timestamp start = parse_timestamp("2023-01-02T00:00");
  std::size_t history_days = 56;
  std::size_t days = 7;
};

struct DataConfig {
  std::string measurements, tariff, history;
  std::optional<Timestamp> start, end;
  std::string cluster = "month-daytype";
  SyntheticSpec synthetic;
};

struct RunConfig {
  DataConfig data;
  EmsConfig ems;
  std::vector<double> alphas{0.0, 1.0, 5.0};
  std::vector<std::size_t> n_red_sweep;
  std::vector<double> alpha_corr_grid = default_alpha_corr_grid();
  std::size_t calibration_batch = 200;
  std::uint64_t seed = 1;
  std::string out = "out";
  int workers = 1;
  std::string strategy = "all";

  std::vector<std::string> strategies() const {
    if (strategy == "all") return strategy_names();
    return {strategy};
  }
};

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    return csv::parse_double(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline long long to_int(const std::string& key, const std::string& v) {
  try {
    return csv::parse_int(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  const auto i = to_int(key, v);
  if (i < 0) throw ConfigError(key + ": must be >= 0");
  return static_cast<std::size_t>(i);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline Timestamp to_time(const std::string& key, const std::string& v) {
  try {
    return parse_timestamp(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": bad timestamp '" + v + "'");
  }
}

}  // namespace detail

/// Reads an INI file (sections data, ems, battery, vppha, ocp, sweep,
/// calibrate, run). Unknown sections or keys are errors.
inline RunConfig parse_config(std::istream& in) {
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c;
  bool q0_set = false;
  std::optional<double> eps_start, eps_end;
  std::optional<std::size_t> eps_levels, warm_levels;

  using Setter = std::function<void(const std::string& key, const std::vector<std::string>& v)>;
  auto one = [](auto f) -> Setter {
    return [f](const std::string& key, const std::vector<std::string>& v) {
      if (v.size() != 1) throw ConfigError(key + ": expected a single value");
      f(key, v.front());
    };
  };
  auto num = [&](double& dst) { return one([&dst](const std::string& k, const std::string& v) { dst = detail::to_double(k, v); }); };
  auto size = [&](std::size_t& dst) { return one([&dst](const std::string& k, const std::string& v) { dst = detail::to_size(k, v); }); };
  auto text = [&](std::string& dst) { return one([&dst](const std::string&, const std::string& v) { dst = v; }); };
  auto flag = [&](bool& dst) { return one([&dst](const std::string& k, const std::string& v) { dst = detail::to_bool(k, v); }); };

  auto& e = c.ems;
  auto& b = e.battery;
  auto& p = e.vppha;
  std::map<std::string, Setter> keys{
      {"data.measurements", text(c.data.measurements)},
      {"data.tariff", text(c.data.tariff)},
      {"data.history", text(c.data.history)},
      {"data.cluster", text(c.data.cluster)},
      {"data.start", one([&](const std::string& k, const std::string& v) { c.data.start = detail::to_time(k, v); })},
      {"data.end", one([&](const std::string& k, const std::string& v) { c.data.end = detail::to_time(k, v); })},
      {"data.synthetic", flag(c.data.synthetic.enabled)},
      {"data.synthetic_seed", one([&](const std::string& k, const std::string& v) {
         c.data.synthetic.seed = static_cast<std::uint64_t>(detail::to_size(k, v));
       })},
      {"data.synthetic_start",
       one([&](const std::string& k, const std::string& v) { c.data.synthetic.start = detail::to_time(k, v); })},
      {"data.synthetic_history_days", size(c.data.synthetic.history_days)},
      {"data.synthetic_days", size(c.data.synthetic.days)},
      {"ems.delta_minutes", one([&](const std::string& k, const std::string& v) { e.delta = detail::to_double(k, v) / 60.0; })},
      {"ems.horizon_h", num(e.horizon_h)},
      {"ems.replan_h", num(e.replan_h)},
      {"ems.n_s", size(e.n_s)},
      {"ems.n_red", size(e.n_red)},
      {"ems.mu_smooth", num(e.mu_smooth)},
      {"ems.mu_levels", size(e.mu_levels)},
      {"ems.alpha_corr_cons", num(e.alpha_corr_cons)},
      {"ems.alpha_corr_pv", num(e.alpha_corr_pv)},
      {"ems.seed_from_measurement", flag(e.seed_from_measurement)},
      {"battery.q_max", num(b.q_max)},
      {"battery.p_min", num(b.p_min)},
      {"battery.p_max", num(b.p_max)},
      {"battery.rho_c", num(b.rho_c)},
      {"battery.rho_d", num(b.rho_d)},
      {"battery.q0", one([&](const std::string& k, const std::string& v) {
         b.q0 = detail::to_double(k, v);
         q0_set = true;
       })},
      {"vppha.r", num(p.r)},
      {"vppha.alpha", num(p.alpha)},
      {"vppha.max_outer_iters", one([&](const std::string& k, const std::string& v) {
         p.max_outer_iters = static_cast<int>(detail::to_int(k, v));
       })},
      {"vppha.primal_tol", num(p.primal_tol)},
      {"vppha.drift_tol", num(p.drift_tol)},
      {"vppha.init_r", num(p.init_r)},
      {"ocp.eps_start", one([&](const std::string& k, const std::string& v) { eps_start = detail::to_double(k, v); })},
      {"ocp.eps_end", one([&](const std::string& k, const std::string& v) { eps_end = detail::to_double(k, v); })},
      {"ocp.eps_levels", one([&](const std::string& k, const std::string& v) { eps_levels = detail::to_size(k, v); })},
      {"ocp.warm_levels", one([&](const std::string& k, const std::string& v) { warm_levels = detail::to_size(k, v); })},
      {"ocp.newton_tol", num(e.ocp.newton_tol)},
      {"ocp.max_iters", one([&](const std::string& k, const std::string& v) {
         e.ocp.max_iters = static_cast<int>(detail::to_int(k, v));
       })},
      {"sweep.alphas", [&](const std::string& k, const std::vector<std::string>& v) {
         c.alphas.clear();
         for (const auto& x : v) c.alphas.push_back(detail::to_double(k, x));
       }},
      {"sweep.n_red", [&](const std::string& k, const std::vector<std::string>& v) {
         c.n_red_sweep.clear();
         for (const auto& x : v) c.n_red_sweep.push_back(detail::to_size(k, x));
       }},
      {"calibrate.grid", [&](const std::string& k, const std::vector<std::string>& v) {
         c.alpha_corr_grid.clear();
         for (const auto& x : v) c.alpha_corr_grid.push_back(detail::to_double(k, x));
       }},
      {"calibrate.batch", size(c.calibration_batch)},
      {"run.seed", one([&](const std::string& k, const std::string& v) {
         c.seed = static_cast<std::uint64_t>(detail::to_size(k, v));
       })},
      {"run.out", text(c.out)},
      {"run.workers", one([&](const std::string& k, const std::string& v) {
         c.workers = static_cast<int>(detail::to_int(k, v));
       })},
      {"run.strategy", text(c.strategy)},
  };

  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    const std::string key = item.fullname();
    auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
    // CLI11 splits comma lists into several inputs
    it->second(key, item.inputs.empty() ? std::vector<std::string>{""} : item.inputs);
  }
  if (!q0_set) b.q0 = b.q_max / 2.0;
  if (eps_start || eps_end || eps_levels) {
    const double s = eps_start.value_or(1e-1), f = eps_end.value_or(1e-8);
    const std::size_t n = eps_levels.value_or(16);
    if (!(s > f && f > 0.0) || n < 2) throw ConfigError("ocp: need eps_start > eps_end > 0 and eps_levels >= 2");
    e.ocp.eps_schedule = geometric_schedule(s, f, static_cast<int>(n));
  }
  if (warm_levels) {
    if (*warm_levels < 1) throw ConfigError("ocp.warm_levels must be >= 1");
    e.warm_eps_schedule = *warm_levels == 1 ? std::vector<double>{e.ocp.eps_schedule.back()}
                                            : geometric_schedule(1e-5, e.ocp.eps_schedule.back(), static_cast<int>(*warm_levels));
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

/// Checks everything that does not need the data files.
inline void validate(const RunConfig& c) {
  try {
    c.ems.validate();
    for (const auto& n : strategy_names())
      if (c.strategy == "all" || c.strategy == n) try {
          strategy_preset(n, c.ems).validate();
        } catch (const std::invalid_argument& e) {
          throw std::invalid_argument("strategy " + n + ": " + e.what());
        }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto step = c.ems.step_minutes();
  if (60 % step != 0 || (60 / step != 1 && 60 / step != 2 && 60 / step != 6))
    throw ConfigError("ems.delta_minutes must be 10, 30 or 60");
  for (double a : c.alphas)
    if (!(a >= 0.0)) throw ConfigError("sweep.alphas must be >= 0");
  if (c.alphas.empty()) throw ConfigError("sweep.alphas is empty");
  for (double a : c.alpha_corr_grid)
    if (!(a > 0.0 && a < 1.0)) throw ConfigError("calibrate.grid values must lie in (0, 1)");
  if (c.workers < 1) throw ConfigError("run.workers must be >= 1");
  if (c.strategy != "all") {
    const auto& names = strategy_names();
    if (std::find(names.begin(), names.end(), c.strategy) == names.end())
      throw ConfigError("strategy must be one of mpc, pha, vppha, all");
  }
  if (c.data.cluster != "month-daytype" && c.data.cluster != "daytype" && c.data.cluster != "single")
    throw ConfigError("data.cluster must be month-daytype, daytype or single");
  if (!c.data.synthetic.enabled) {
    if (c.data.measurements.empty()) throw ConfigError("data.measurements is required");
    if (c.data.tariff.empty()) throw ConfigError("data.tariff is required");
    for (const auto* f : {&c.data.measurements, &c.data.tariff, &c.data.history})
      if (!f->empty() && !std::filesystem::exists(*f)) throw ConfigError("file not found: " + *f);
    if (!c.data.start || !c.data.end) throw ConfigError("data.start and data.end are required");
  } else if (c.data.synthetic.days < 1 || c.data.synthetic.history_days < 1) {
    throw ConfigError("synthetic world needs at least one history day and one simulated day");
  }
}

inline ClusterRule cluster_rule(const std::string& name) {
  if (name == "month-daytype") return month_daytype_cluster;
  if (name == "daytype") return [](const Timestamp& d) { return std::string(d.weekend() ? "weekend" : "weekday"); };
  if (name == "single") return [](const Timestamp&) { return std::string("all"); };
  throw ConfigError("unknown cluster rule '" + name + "'");
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct Dataset {
  TimeSeries measurements;
  TariffSeries tariff;
  Timestamp start, end;
  std::vector<DayTrajectory> cons_history, pv_history;
};

inline Dataset load_dataset(const RunConfig& c) {
  Dataset d;
  const auto step = c.ems.step_minutes();
  if (c.data.synthetic.enabled) {
    const auto& s = c.data.synthetic;
    // one extra day so the last planning window has data
    auto w = make_synthetic_world(s.start, s.history_days + s.days + 1, step, s.seed);
    d.measurements = std::move(w.measurements);
    d.tariff = std::move(w.tariff);
    d.start = c.data.start.value_or(s.start + static_cast<std::int64_t>(s.history_days) * 1440);
    d.end = c.data.end.value_or(d.start + static_cast<std::int64_t>(s.days) * 1440);
  } else {
    auto m = csv::open_in(c.data.measurements);
    d.measurements = read_measurements_csv(m);
    auto t = csv::open_in(c.data.tariff);
    d.tariff = read_tariff_csv(t);
    d.start = *c.data.start;
    d.end = *c.data.end;
  }
  if (d.measurements.step_minutes != step)
    throw ConfigError("measurement cadence (" + std::to_string(d.measurements.step_minutes) +
                      " min) differs from ems.delta_minutes");
  if (!(d.start < d.end)) throw ConfigError("data.start must precede data.end");
  if (!c.data.history.empty()) {
    const int sph = static_cast<int>(60 / step);
    auto h1 = csv::open_in(c.data.history);
    d.cons_history = read_history_csv(h1, sph, "cons_kw");
    auto h2 = csv::open_in(c.data.history);
    d.pv_history = read_history_csv(h2, sph, "pv_kw");
  } else {
    d.cons_history = split_days(d.measurements, 0, d.measurements.start, d.start);
    d.pv_history = split_days(d.measurements, 1, d.measurements.start, d.start);
  }
  if (d.cons_history.empty()) throw MissingData("no complete history days before the start time");
  return d;
}

struct Models {
  std::unique_ptr<ModelLibrary> cons, pv;
};

inline Models fit_models(const RunConfig& c, const Dataset& d) {
  const auto rule = cluster_rule(c.data.cluster);
  const int sph = static_cast<int>(60 / c.ems.step_minutes());
  return {std::make_unique<ModelLibrary>(fit_quantiles(d.cons_history, rule, sph), rule),
          std::make_unique<ModelLibrary>(fit_quantiles(d.pv_history, rule, sph), rule)};
}

/// Common random numbers: every stochastic strategy draws from the same
/// stream so that runs differing only in alpha are directly comparable.
inline std::mt19937_64 strategy_rng(std::uint64_t seed, const std::string& strategy) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(strategy == "mpc" ? 1 : 2)};
  return std::mt19937_64(seq);
}

inline EmsConfig strategy_config(const RunConfig& c, const std::string& strategy, std::optional<double> alpha,
                                 int workers) {
  EmsConfig e = strategy_preset(strategy, c.ems);
  if (alpha) e.vppha.alpha = *alpha;
  e.vppha.workers = workers;
  return e;
}

inline SimulationResult run_strategy(const RunConfig& c, const Dataset& d, const Models& m, const std::string& strategy,
                                     std::optional<double> alpha = std::nullopt, int workers = 1) {
  const EmsConfig e = strategy_config(c, strategy, alpha, workers);
  auto rng = strategy_rng(c.seed, strategy);
  return rolling_horizon(e, d.measurements, d.tariff, quantile_source(*m.cons, *m.pv, e), rng, d.start, d.end);
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

inline std::filesystem::path ensure_dir(const std::string& out) {
  std::filesystem::create_directories(out);
  return out;
}

inline void write_clips_csv(std::ostream& o, const std::vector<ClipEvent>& clips) {
  o << "t,q_unclipped\n";
  for (const auto& e : clips) o << format_timestamp(e.t) << ',' << csv::format(e.q_unclipped) << '\n';
}

inline double bill_reduction_pct(double bill, double rho) { return 100.0 * (rho - bill) / rho; }

/// Cumulative eta per step against the mpc run; empty where the baseline
/// has not saved anything yet.
inline void write_eta_csv(std::ostream& o, const std::vector<std::string>& names,
                          const std::vector<const SimulationResult*>& runs, const SimulationResult& mpc) {
  o << "t,rho_cum";
  for (const auto& n : names) o << ",bill_" << n;
  for (const auto& n : names) o << ",eta_" << n;
  o << '\n';
  const auto& ref_cum = mpc.reference_cum;
  for (std::size_t j = 0; j < mpc.trace.size(); ++j) {
    o << format_timestamp(mpc.trace[j].t) << ',' << csv::format(ref_cum[j]);
    for (const auto* r : runs) o << ',' << csv::format(r->trace[j].bill_cum);
    for (const auto* r : runs) {
      o << ',';
      const double base = mpc.trace[j].bill_cum;
      if (std::abs(ref_cum[j] - base) >= 1e-12)
        o << csv::format(performance_ratio(r->trace[j].bill_cum, base, ref_cum[j]));
    }
    o << '\n';
  }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void write_models(const std::filesystem::path& dir, const Models& m) {
  std::filesystem::create_directories(dir / "models");
  for (const auto& [name, lib] : {std::pair{"cons", m.cons.get()}, std::pair{"pv", m.pv.get()}})
    for (const auto& model : lib->models()) {
      auto o = csv::open_out((dir / "models" / (std::string(name) + "_" + model.cluster_id + ".csv")).string());
      write_model_csv(o, model);
    }
}

inline ScenarioFans sample_fans(const RunConfig& c, const Dataset& d, const Models& m) {
  const TimeGrid grid(0.0, c.ems.delta, c.ems.steps(c.ems.horizon_h));
  std::seed_seq seq{static_cast<std::uint32_t>(c.seed), static_cast<std::uint32_t>(c.seed >> 32), 3u};
  std::mt19937_64 rng(seq);
  return quantile_source(*m.cons, *m.pv, c.ems)(d.start, grid, c.ems.n_s, rng, std::nullopt);
}

inline int cmd_gen_scenarios(const RunConfig& c, std::ostream& log) {
  const auto d = load_dataset(c);
  const auto m = fit_models(c, d);
  const auto dir = ensure_dir(c.out);
  write_models(dir, m);
  const auto fans = sample_fans(c, d, m);
  auto oc = csv::open_out((dir / "scenarios_cons.csv").string());
  write_scenario_csv(oc, fans.cons);
  auto op = csv::open_out((dir / "scenarios_pv.csv").string());
  write_scenario_csv(op, fans.pv);
  log << "fitted " << m.cons->models().size() << " consumption and " << m.pv->models().size()
      << " PV models; wrote " << fans.cons.scenarios() << " scenarios x " << fans.cons.steps() << " steps to "
      << dir.string() << '\n';
  return kOk;
}

inline int cmd_reduce(const RunConfig& c, std::ostream& log) {
  const auto d = load_dataset(c);
  const auto m = fit_models(c, d);
  const auto dir = ensure_dir(c.out);
  const auto fans = sample_fans(c, d, m);
  const auto pair = reduce_pair(fans.cons, fans.pv, c.ems.n_red);
  auto o1 = csv::open_out((dir / "reduced_cons.csv").string());
  write_scenario_csv(o1, pair.cons.reduced);
  auto o2 = csv::open_out((dir / "reduced_pv.csv").string());
  write_scenario_csv(o2, pair.pv.reduced);
  auto o3 = csv::open_out((dir / "product.csv").string());
  write_scenario_csv(o3, pair.product);
  auto o4 = csv::open_out((dir / "reduction.csv").string());
  o4 << "process,n_red,transport_cost\n";
  auto sweep = c.n_red_sweep.empty() ? std::vector<std::size_t>{c.ems.n_red} : c.n_red_sweep;
  for (std::size_t n : sweep) {
    if (n < 1 || n > c.ems.n_s) throw ConfigError("sweep.n_red values must lie in [1, n_s]");
    o4 << "cons," << n << ',' << csv::format(fast_forward(fans.cons, n).transport_cost) << '\n';
    o4 << "pv," << n << ',' << csv::format(fast_forward(fans.pv, n).transport_cost) << '\n';
  }
  log << "reduced " << c.ems.n_s << " -> " << c.ems.n_red << " per process; product has " << pair.product.scenarios()
      << " branches\n";
  return kOk;
}

inline int cmd_simulate(const RunConfig& c, std::ostream& log) {
  const auto d = load_dataset(c);
  const auto m = fit_models(c, d);
  const auto dir = ensure_dir(c.out);
  const auto names = c.strategies();
  std::map<std::string, SimulationResult> runs;
  for (const auto& n : names) {
    runs[n] = run_strategy(c, d, m, n, std::nullopt, c.workers);
    auto o = csv::open_out((dir / ("trace_" + n + ".csv")).string());
    write_trace_csv(o, runs[n].trace);
    auto oc = csv::open_out((dir / ("clips_" + n + ".csv")).string());
    write_clips_csv(oc, runs[n].clips);
    log << n << ": bill " << csv::format(runs[n].bill) << " (reference " << csv::format(runs[n].reference) << ")\n";
  }
  const SimulationResult* mpc = runs.count("mpc") ? &runs.at("mpc") : nullptr;
  auto o = csv::open_out((dir / "summary.csv").string());
  o << "strategy,bill,reference_bill,bill_reduction_pct,eta_vs_mpc,replans,unconverged_replans,clip_events\n";
  for (const auto& n : names) {
    const auto& r = runs.at(n);
    o << n << ',' << csv::format(r.bill) << ',' << csv::format(r.reference) << ','
      << csv::format(bill_reduction_pct(r.bill, r.reference)) << ',';
    if (mpc && std::abs(r.reference - mpc->bill) >= 1e-12)
      o << csv::format(performance_ratio(r.bill, mpc->bill, r.reference));
    o << ',' << r.replans << ',' << r.unconverged_replans << ',' << r.clips.size() << '\n';
  }
  if (mpc) {
    std::vector<const SimulationResult*> ptrs;
    for (const auto& n : names) ptrs.push_back(&runs.at(n));
    auto oe = csv::open_out((dir / "eta.csv").string());
    write_eta_csv(oe, names, ptrs, *mpc);
  }
  return kOk;
}

struct SweepRow {
  double alpha, bill, eta;
  int unconverged;
};

inline std::vector<SweepRow> sweep_alpha(const RunConfig& c, const Dataset& d, const Models& m) {
  const auto mpc = run_strategy(c, d, m, "mpc", std::nullopt, 1);
  std::vector<SimulationResult> res(c.alphas.size());
  // points run concurrently, each one single-threaded
  tbb::task_arena arena(std::min(c.workers, tbb::info::default_concurrency()));
  arena.execute([&] {
    tbb::parallel_for(std::size_t{0}, c.alphas.size(),
                      [&](std::size_t i) { res[i] = run_strategy(c, d, m, "vppha", c.alphas[i], 1); });
  });
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < res.size(); ++i)
    rows.push_back({c.alphas[i], res[i].bill, performance_ratio(res[i].bill, mpc.bill, res[i].reference),
                    res[i].unconverged_replans});
  return rows;
}

inline int cmd_sweep_alpha(const RunConfig& c, std::ostream& log) {
  const auto d = load_dataset(c);
  const auto m = fit_models(c, d);
  const auto dir = ensure_dir(c.out);
  const auto rows = sweep_alpha(c, d, m);
  auto o = csv::open_out((dir / "sweep_alpha.csv").string());
  o << "alpha,bill,eta,unconverged_replans\n";
  for (const auto& r : rows) {
    o << csv::format(r.alpha) << ',' << csv::format(r.bill) << ',' << csv::format(r.eta) << ',' << r.unconverged << '\n';
    log << "alpha " << csv::format(r.alpha) << ": eta " << csv::format(r.eta) << '\n';
  }
  return kOk;
}

inline int cmd_calibrate(const RunConfig& c, std::ostream& log) {
  const auto d = load_dataset(c);
  const auto m = fit_models(c, d);
  const auto dir = ensure_dir(c.out);
  const auto rule = cluster_rule(c.data.cluster);
  auto o = csv::open_out((dir / "calibration.csv").string());
  o << "channel,cluster,days,alpha_corr\n";
  for (const auto& [name, lib, hist] : {std::tuple{"cons", m.cons.get(), &d.cons_history},
                                        std::tuple{"pv", m.pv.get(), &d.pv_history}})
    for (const auto& model : lib->models()) {
      std::vector<std::vector<double>> days;
      for (const auto& day : *hist)
        if (rule(day.day) == model.cluster_id) days.push_back(day.values);
      const double a = calibrate_alpha_corr(model, days, c.alpha_corr_grid, c.seed, c.calibration_batch);
      o << name << ',' << model.cluster_id << ',' << days.size() << ',' << csv::format(a) << '\n';
      log << name << ' ' << model.cluster_id << ": alpha_corr " << csv::format(a) << '\n';
    }
  return kOk;
}

/// Parses the command line and runs one subcommand; returns the exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Scenario-based battery energy management with variance-penalized progressive hedging"};
  app.require_subcommand(1);
  std::string config_path, out_dir, strategy;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  const std::vector<std::string> commands{"gen-scenarios", "reduce", "simulate", "sweep-alpha", "calibrate"};
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "INI configuration file")->required();
    sub->add_option("--seed", seed, "random seed (overrides run.seed)");
    sub->add_option("--out", out_dir, "output directory (overrides run.out)");
    sub->add_option("--strategy", strategy, "mpc, pha, vppha or all")->check(CLI::IsMember({"mpc", "pha", "vppha", "all"}));
    sub->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfigError;
  }
  try {
    RunConfig c = load_config(config_path);
    if (seed) c.seed = *seed;
    if (!out_dir.empty()) c.out = out_dir;
    if (!strategy.empty()) c.strategy = strategy;
    if (workers) c.workers = *workers;
    validate(c);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen-scenarios") return cmd_gen_scenarios(c, out);
    if (cmd == "reduce") return cmd_reduce(c, out);
    if (cmd == "simulate") return cmd_simulate(c, out);
    if (cmd == "sweep-alpha") return cmd_sweep_alpha(c, out);
    return cmd_calibrate(c, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const MissingData& e) {
    err << "data error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ParseError& e) {
    err << "data error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NonConvergence& e) {
    err << "solver failure: " << e.what() << '\n';
    return kSolverFailure;
  } catch (const Infeasible& e) {
    err << "solver failure: " << e.what() << '\n';
    return kSolverFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kOther;
  }
}

}  // namespace vppha::cli
