#pragma once

#include <tbb/blocked_range.h>
#include <tbb/parallel_for.h>
#include <tbb/info.h>
#include <tbb/task_arena.h>

#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppha/core_process.hpp"
#include "vppha/csv.hpp"
#include "vppha/nonanticipativity.hpp"
#include "vppha/ocp_solver.hpp"

namespace vppha {

struct VpphaParams {
  double r = 1.0;
  double alpha = 0.0;
  int max_outer_iters = 500;
  double primal_tol = 1e-6;
  double drift_tol = 1e-6;
  /// Proximal weight of the independent per-scenario solves that seed z^0.
  double init_r = 1e-8;
  /// Concurrent subproblem solves; 0 lets TBB decide.
  int workers = 0;

  void validate() const {
    if (!(r > 0.0)) throw std::invalid_argument("VpphaParams: r must be > 0");
    if (!(alpha >= 0.0)) throw std::invalid_argument("VpphaParams: alpha must be >= 0");
    if (max_outer_iters < 1) throw std::invalid_argument("VpphaParams: max_outer_iters must be >= 1");
    if (!(primal_tol > 0.0) || !(drift_tol > 0.0)) throw std::invalid_argument("VpphaParams: tolerances must be > 0");
    if (!(init_r > 0.0)) throw std::invalid_argument("VpphaParams: init_r must be > 0");
    if (workers < 0) throw std::invalid_argument("VpphaParams: workers must be >= 0");
  }
};

struct SubproblemResult {
  Trajectory u;
  double cost = 0.0;  // f_s(u) without the augmentation terms
};

/// u^s = argmin f_s(u) + <lambda, u> + r/2 |u - zeta|^2 for scenario s.
/// Called concurrently for distinct s.
using Subproblem =
    std::function<SubproblemResult(std::size_t s, const Trajectory& zeta, const Trajectory& lambda, double r)>;

/// Subproblem failure carrying the offending scenario.
class ScenarioNonConvergence : public NonConvergence {
 public:
  ScenarioNonConvergence(std::size_t s, const std::string& what)
      : NonConvergence("scenario " + std::to_string(s) + ": " + what), scenario(s) {}
  std::size_t scenario;
};

struct VpphaState {
  ScenarioProcess u, lambda, z;
  int iter = 0;
  double primal_residual = std::numeric_limits<double>::infinity();
  double drift = std::numeric_limits<double>::infinity();
  double expected_cost = 0.0;
  double variance_penalty = 0.0;
};

struct IterationRecord {
  int iter;
  double primal_residual, drift, expected_cost, variance_penalty;
};

struct VpphaResult {
  ScenarioProcess policy;  // proj_adapted(u) at the returned iterate
  VpphaState state;
  std::vector<IterationRecord> history;
  bool converged = false;
};

inline void write_iteration_log_csv(std::ostream& out, const std::vector<IterationRecord>& log) {
  out << "iter,primal_residual,drift,expected_cost,variance_penalty\n";
  for (const auto& r : log)
    out << r.iter << ',' << csv::format(r.primal_residual) << ',' << csv::format(r.drift) << ','
        << csv::format(r.expected_cost) << ',' << csv::format(r.variance_penalty) << '\n';
}

/// (alpha E z + r P z) / (r + alpha): prox of the variance penalty plus the
/// indicator of adapted processes.
inline ScenarioProcess prox_variance(const ScenarioProcess& z, const BundlePartition& part, double r, double alpha) {
  if (!(r > 0.0) || !(alpha >= 0.0)) throw std::invalid_argument("prox_variance: need r > 0, alpha >= 0");
  ScenarioProcess out = proj_adapted(z, part);
  if (alpha == 0.0) return out;
  out *= r / (r + alpha);
  out += (alpha / (r + alpha)) * broadcast(expectation(z), z);
  return out;
}

/// (alpha/2) |x - E x|^2 in the probability- and dt-weighted norm.
inline double variance_penalty(const ScenarioProcess& x, double alpha) {
  const double n = norm(x - broadcast(expectation(x), x));
  return 0.5 * alpha * n * n;
}

namespace detail {

/// Solves every scenario, rethrowing the failure of the lowest scenario index.
inline std::vector<SubproblemResult> solve_all(const Subproblem& sub, const ScenarioProcess& zeta,
                                               const ScenarioProcess& lambda, double r, int workers) {
  const std::size_t S = zeta.scenarios();
  std::vector<SubproblemResult> out(S);
  std::vector<std::exception_ptr> errors(S);
  auto body = [&](const tbb::blocked_range<std::size_t>& range) {
    for (std::size_t s = range.begin(); s != range.end(); ++s) {
      try {
        out[s] = sub(s, zeta.scenario(s), lambda.scenario(s), r);
      } catch (...) {
        errors[s] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    body(tbb::blocked_range<std::size_t>(0, S));
  } else {
    // capped at the hardware concurrency
    tbb::task_arena arena(workers > 0 ? std::min(workers, tbb::info::default_concurrency()) : tbb::task_arena::automatic);
    arena.execute([&] { tbb::parallel_for(tbb::blocked_range<std::size_t>(0, S, 1), body); });
  }
  for (std::size_t s = 0; s < S; ++s) {
    if (!errors[s]) continue;
    try {
      std::rethrow_exception(errors[s]);
    } catch (const NonConvergence& e) {
      throw ScenarioNonConvergence(s, e.what());
    }
  }
  for (std::size_t s = 0; s < S; ++s)
    if (out[s].u.steps() != zeta.steps() || out[s].u.channels() != zeta.channels())
      throw ShapeMismatch("subproblem returned a control of the wrong shape");
  return out;
}

inline ScenarioProcess gather(const std::vector<SubproblemResult>& res, const ScenarioProcess& like) {
  ScenarioProcess u = like.zeros_like();
  for (std::size_t s = 0; s < res.size(); ++s) u.set_scenario(s, res[s].u);
  return u;
}

inline double expected_cost(const std::vector<SubproblemResult>& res, const ScenarioProcess& like) {
  double c = 0.0;
  for (std::size_t s = 0; s < res.size(); ++s) c += like.prob(s) * res[s].cost;
  return c;
}

}  // namespace detail

/// One splitting step: scenario solves at zeta = P z, multiplier update on
/// the non-adapted part, then the reflected prox update of z.
inline VpphaState vppha_step(const VpphaState& state, const VpphaParams& params, const BundlePartition& part,
                             const Subproblem& subproblem) {
  const ScenarioProcess zeta = proj_adapted(state.z, part);
  const auto res = detail::solve_all(subproblem, zeta, state.lambda, params.r, params.workers);

  VpphaState next;
  next.u = detail::gather(res, state.z);
  const ScenarioProcess u_perp = proj_orthogonal(next.u, part);
  next.lambda = state.lambda + params.r * u_perp;
  ScenarioProcess reflected = 2.0 * next.u - state.z;
  next.z = state.z - next.u + prox_variance(reflected, part, params.r, params.alpha);
  next.iter = state.iter + 1;
  next.primal_residual = norm(u_perp);
  next.drift = norm(next.z - state.z);
  next.expected_cost = detail::expected_cost(res, state.z);
  next.variance_penalty = variance_penalty(next.u, params.alpha);
  return next;
}

/// Starting state: independent scenario solves (lambda = 0, zeta = 0,
/// proximal weight init_r) give x^0, and z^0 = P x^0 - lambda0 / r.
inline VpphaState vppha_initial_state(const ScenarioProcess& like, const VpphaParams& params,
                                      const BundlePartition& part, const Subproblem& subproblem,
                                      const ScenarioProcess* lambda0 = nullptr) {
  VpphaState st;
  st.lambda = lambda0 ? *lambda0 : like.zeros_like();
  st.lambda.require_shape(like);
  if (norm(proj_adapted(st.lambda, part)) > 1e-9 * (1.0 + norm(st.lambda)))
    throw std::invalid_argument("vppha: lambda0 must be orthogonal to adapted processes");
  const ScenarioProcess zero = like.zeros_like();
  const auto res = detail::solve_all(subproblem, zero, zero, params.init_r, params.workers);
  st.u = detail::gather(res, like);
  st.z = proj_adapted(st.u, part) - (1.0 / params.r) * st.lambda;
  st.expected_cost = detail::expected_cost(res, like);
  st.variance_penalty = variance_penalty(st.u, params.alpha);
  return st;
}

/// Iterates until both the non-adapted part of u and the z-drift fall under
/// their tolerances. Without convergence the iterate with the smallest
/// scaled residual is returned and `converged` is false.
inline VpphaResult vppha_solve(const ScenarioProcess& like, const VpphaParams& params, const BundlePartition& part,
                               const Subproblem& subproblem, const ScenarioProcess* lambda0 = nullptr) {
  params.validate();
  if (part.scenarios() != like.scenarios() || part.grid().K != like.steps())
    throw ShapeMismatch("vppha_solve: partition does not match the scenario shape");
  VpphaResult out;
  VpphaState st = vppha_initial_state(like, params, part, subproblem, lambda0);
  VpphaState best;
  double best_merit = std::numeric_limits<double>::infinity();
  for (int k = 0; k < params.max_outer_iters; ++k) {
    st = vppha_step(st, params, part, subproblem);
    out.history.push_back({st.iter, st.primal_residual, st.drift, st.expected_cost, st.variance_penalty});
    const double merit = std::max(st.primal_residual / params.primal_tol, st.drift / params.drift_tol);
    if (merit < best_merit) {
      best_merit = merit;
      best = st;
    }
    if (st.primal_residual <= params.primal_tol && st.drift <= params.drift_tol) {
      out.converged = true;
      break;
    }
  }
  out.state = out.converged ? std::move(st) : std::move(best);
  out.policy = proj_adapted(out.state.u, part);
  return out;
}

// ---------------------------------------------------------------------------
// Optimal-control subproblems
// ---------------------------------------------------------------------------

/// Wraps a per-scenario OCP builder as a subproblem. Each scenario keeps its
/// previous primal-dual solution and reuses it as the Newton starting point,
/// using `warm_schedule` once a previous solution exists.
class OcpSubproblem {
 public:
  using Builder = std::function<OCPInstance(std::size_t s)>;
  /// Solve from scratch; defaults to solve_socp with the cold options.
  using ColdSolve = std::function<OCPSolution(const OCPInstance&)>;

  OcpSubproblem(std::size_t scenarios, Builder build, OCPSolverOptions cold, std::vector<double> warm_schedule = {},
                ColdSolve cold_solve = {})
      : build_(std::move(build)), cold_(std::move(cold)), warm_(std::move(warm_schedule)),
        cold_solve_(std::move(cold_solve)), cache_(scenarios) {
    if (!cold_solve_) cold_solve_ = [o = cold_](const OCPInstance& inst) { return solve_socp(inst, o); };
  }

  SubproblemResult operator()(std::size_t s, const Trajectory& zeta, const Trajectory& lambda, double r) {
    OCPInstance inst = build_(s);
    inst.zeta_aug = zeta;
    inst.lambda_aug = lambda;
    inst.r = r;
    OCPSolution sol;
    if (cache_[s] && !warm_.empty()) {
      OCPSolverOptions o = cold_;
      o.eps_schedule = warm_;
      try {
        sol = solve_socp(inst, o, &*cache_[s]);
      } catch (const NonConvergence&) {
        sol = cold_solve_(inst);
      }
    } else {
      sol = cold_solve_(inst);
    }
    SubproblemResult out{Trajectory(inst.grid, static_cast<std::size_t>(inst.m)), 0.0};
    for (std::size_t k = 0; k < inst.K(); ++k)
      for (Eigen::Index i = 0; i < inst.m; ++i) out.u(k, static_cast<std::size_t>(i)) = sol.u(static_cast<Eigen::Index>(k), i);
    out.cost = ocp_objective(inst, sol, false);
    cache_[s] = std::move(sol);
    return out;
  }

  /// Adapter for the Subproblem signature; each call only touches slot s.
  Subproblem as_subproblem() {
    return [this](std::size_t s, const Trajectory& z, const Trajectory& l, double r) { return (*this)(s, z, l, r); };
  }

 private:
  Builder build_;
  OCPSolverOptions cold_;
  std::vector<double> warm_;
  ColdSolve cold_solve_;
  std::vector<std::optional<OCPSolution>> cache_;
};

}  // namespace vppha
