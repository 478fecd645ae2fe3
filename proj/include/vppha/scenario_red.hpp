#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "vppha/core_process.hpp"

namespace vppha {

/// sqrt(sum_k dt sum_i (a - b)^2)
inline double trajectory_distance(const Trajectory& a, const Trajectory& b) {
  if (a.steps() != b.steps() || a.channels() != b.channels())
    throw ShapeMismatch("trajectory_distance: shapes differ");
  double s = 0.0;
  for (std::size_t j = 0; j < a.data().size(); ++j) {
    const double d = a.data()[j] - b.data()[j];
    s += d * d;
  }
  return std::sqrt(a.grid().dt * s);
}

/// Symmetric S x S matrix of scenario distances.
inline std::vector<double> distance_matrix(const ScenarioProcess& x) {
  const std::size_t S = x.scenarios();
  std::vector<Trajectory> traj;
  traj.reserve(S);
  for (std::size_t s = 0; s < S; ++s) traj.push_back(x.scenario(s));
  std::vector<double> D(S * S, 0.0);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = i + 1; j < S; ++j) D[i * S + j] = D[j * S + i] = trajectory_distance(traj[i], traj[j]);
  return D;
}

struct ReductionResult {
  std::vector<std::size_t> selected;  // in selection order
  ScenarioProcess reduced;            // scenarios in selection order
  double transport_cost = 0.0;
};

/// Greedy forward selection: each round adds the scenario that minimizes the
/// probability-weighted distance of the remaining scenarios to the selected
/// set. Unselected mass moves to the nearest selected scenario. Ties go to
/// the lowest index.
inline ReductionResult fast_forward(const ScenarioProcess& proc, std::size_t n_red) {
  const std::size_t S = proc.scenarios();
  if (n_red < 1 || n_red > S) throw std::invalid_argument("fast_forward: n_red must be in [1, S]");
  const auto D = distance_matrix(proc);
  const auto& p = proc.probabilities();

  std::vector<char> chosen(S, 0);
  std::vector<double> nearest(S, std::numeric_limits<double>::infinity());  // distance to selected set
  ReductionResult out;
  for (std::size_t round = 0; round < n_red; ++round) {
    std::size_t best = S;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < S; ++u) {
      if (chosen[u]) continue;
      double c = 0.0;
      for (std::size_t i = 0; i < S; ++i)
        if (!chosen[i] && i != u) c += p[i] * std::min(nearest[i], D[i * S + u]);
      if (c < best_cost) {
        best_cost = c;
        best = u;
      }
    }
    chosen[best] = 1;
    out.selected.push_back(best);
    for (std::size_t i = 0; i < S; ++i) nearest[i] = std::min(nearest[i], D[i * S + best]);
  }

  std::vector<double> mass(n_red);
  for (std::size_t j = 0; j < n_red; ++j) mass[j] = p[out.selected[j]];
  double cost = 0.0;
  for (std::size_t i = 0; i < S; ++i) {
    if (chosen[i]) continue;
    std::size_t target = 0;
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n_red; ++j) {
      const double d = D[i * S + out.selected[j]];
      if (d < dmin || (d == dmin && out.selected[j] < out.selected[target])) {
        dmin = d;
        target = j;
      }
    }
    mass[target] += p[i];
    cost += p[i] * dmin;
  }
  out.transport_cost = cost;
  std::vector<double> values;
  values.reserve(n_red * proc.steps() * proc.channels());
  for (std::size_t s : out.selected) {
    const auto t = proc.scenario(s);
    values.insert(values.end(), t.data().begin(), t.data().end());
  }
  out.reduced = ScenarioProcess(proc.grid(), proc.channels(), mass, std::move(values));
  return out;
}

/// Independent product of two processes on the same grid: scenario
/// (i, j) -> index i * S_b + j, channels of a then b, probability p_i q_j.
inline ScenarioProcess product_process(const ScenarioProcess& a, const ScenarioProcess& b) {
  if (!(a.grid() == b.grid())) throw ShapeMismatch("product_process: grids differ");
  const std::size_t Sa = a.scenarios(), Sb = b.scenarios(), K = a.steps(), da = a.channels(), db = b.channels();
  std::vector<double> prob;
  std::vector<double> values;
  values.reserve(Sa * Sb * K * (da + db));
  for (std::size_t i = 0; i < Sa; ++i)
    for (std::size_t j = 0; j < Sb; ++j) {
      prob.push_back(a.prob(i) * b.prob(j));
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < da; ++c) values.push_back(a(i, k, c));
        for (std::size_t c = 0; c < db; ++c) values.push_back(b(j, k, c));
      }
    }
  return ScenarioProcess(a.grid(), da + db, std::move(prob), std::move(values));
}

struct PairReduction {
  ReductionResult cons, pv;
  ScenarioProcess product;  // n_red^2 scenarios, channels (cons, pv)
};

/// Reduces both processes to n_red scenarios each and crosses them.
inline PairReduction reduce_pair(const ScenarioProcess& cons, const ScenarioProcess& pv, std::size_t n_red) {
  PairReduction out{fast_forward(cons, n_red), fast_forward(pv, n_red), {}};
  out.product = product_process(out.cons.reduced, out.pv.reduced);
  return out;
}

}  // namespace vppha
