#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "vppha/core_process.hpp"

namespace vppha {

/// Per-step partition of the scenario set into bundles that cannot be told
/// apart from the information released so far.
class BundlePartition {
 public:
  BundlePartition() = default;

  /// `labels[k][s]` is the bundle index of scenario s at step k. Bundle
  /// indices are assigned in order of first appearance (lowest scenario first).
  BundlePartition(TimeGrid grid, std::size_t delay_steps, std::vector<std::vector<std::size_t>> labels)
      : grid_(grid), delay_(delay_steps), labels_(std::move(labels)) {
    if (labels_.size() != grid_.K) throw ShapeMismatch("BundlePartition: one labelling per step");
    bundles_.resize(grid_.K);
    for (std::size_t k = 0; k < grid_.K; ++k) {
      canonicalize(labels_[k]);
      for (std::size_t s = 0; s < labels_[k].size(); ++s) {
        if (labels_[k][s] >= bundles_[k].size()) bundles_[k].resize(labels_[k][s] + 1);
        bundles_[k][labels_[k][s]].push_back(s);
      }
    }
  }

  /// Every scenario in one bundle at every step.
  static BundlePartition trivial(TimeGrid grid, std::size_t S) {
    return BundlePartition(grid, grid.K, std::vector<std::vector<std::size_t>>(grid.K, std::vector<std::size_t>(S, 0)));
  }

  /// Every scenario alone at every step.
  static BundlePartition full(TimeGrid grid, std::size_t S) {
    std::vector<std::size_t> ids(S);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return BundlePartition(grid, 0, std::vector<std::vector<std::size_t>>(grid.K, ids));
  }

  const TimeGrid& grid() const { return grid_; }
  std::size_t scenarios() const { return labels_.empty() ? 0 : labels_[0].size(); }
  std::size_t delay_steps() const { return delay_; }
  std::size_t bundle_of(std::size_t k, std::size_t s) const { return labels_[k][s]; }
  const std::vector<std::vector<std::size_t>>& bundles(std::size_t k) const { return bundles_[k]; }
  std::size_t bundle_count(std::size_t k) const { return bundles_[k].size(); }

  /// True when each bundle at k+1 lies inside a single bundle at k.
  bool refines_over_time() const {
    for (std::size_t k = 0; k + 1 < grid_.K; ++k)
      for (const auto& b : bundles_[k + 1])
        for (std::size_t s : b)
          if (labels_[k][s] != labels_[k][b.front()]) return false;
    return true;
  }

 private:
  static void canonicalize(std::vector<std::size_t>& lab) {
    constexpr auto unset = static_cast<std::size_t>(-1);
    std::vector<std::size_t> seen;
    std::size_t next = 0;
    for (auto& l : lab) {
      if (l >= seen.size()) seen.resize(l + 1, unset);
      if (seen[l] == unset) seen[l] = next++;
      l = seen[l];
    }
  }

  TimeGrid grid_;
  std::size_t delay_ = 0;
  std::vector<std::vector<std::size_t>> labels_;
  std::vector<std::vector<std::vector<std::size_t>>> bundles_;
};

/// round(delta / dt), rejecting delays that are not a whole number of steps.
inline std::size_t delay_steps_for(double delta, double dt) {
  if (delta < 0.0) throw std::invalid_argument("delay must be >= 0");
  const double ratio = delta / dt;
  const double rounded = std::round(ratio);
  if (std::abs(ratio - rounded) > 1e-9)
    throw std::invalid_argument("delay is not an integer multiple of the time step");
  return static_cast<std::size_t>(rounded);
}

/// Scenarios s, s' share a bundle at step k iff their xi values agree within
/// `tol` on every step j <= k - delay_steps (closed under transitivity).
inline BundlePartition compute_bundles(const ScenarioProcess& xi, std::size_t delay_steps, double tol = 0.0) {
  if (tol < 0.0) throw std::invalid_argument("compute_bundles: tol must be >= 0");
  const std::size_t S = xi.scenarios(), K = xi.steps(), d = xi.channels();
  // still_equal[s*S+t]: prefixes agree so far
  std::vector<char> still_equal(S * S, 1);
  std::vector<std::vector<std::size_t>> labels(K, std::vector<std::size_t>(S, 0));
  std::vector<std::size_t> parent(S);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t k = 0; k < K; ++k) {
    if (k < delay_steps) continue;  // nothing released yet: single bundle
    const std::size_t j = k - delay_steps;
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t t = s + 1; t < S; ++t) {
        if (!still_equal[s * S + t]) continue;
        for (std::size_t i = 0; i < d; ++i)
          if (std::abs(xi(s, j, i) - xi(t, j, i)) > tol) {
            still_equal[s * S + t] = 0;
            break;
          }
      }
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t t = s + 1; t < S; ++t)
        if (still_equal[s * S + t]) {
          auto a = find(s), b = find(t);
          if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
    for (std::size_t s = 0; s < S; ++s) labels[k][s] = find(s);
  }
  return BundlePartition(xi.grid(), delay_steps, std::move(labels));
}

/// Conditional expectation given the bundle structure: the orthogonal
/// projection onto delta-adapted processes.
inline ScenarioProcess proj_adapted(const ScenarioProcess& x, const BundlePartition& part) {
  if (part.scenarios() != x.scenarios() || part.grid().K != x.steps())
    throw ShapeMismatch("proj_adapted: partition does not match process");
  ScenarioProcess out = x.zeros_like();
  const std::size_t d = x.channels();
  std::vector<double> acc(d);
  for (std::size_t k = 0; k < x.steps(); ++k)
    for (const auto& bundle : part.bundles(k)) {
      if (bundle.size() == 1) {
        for (std::size_t i = 0; i < d; ++i) out(bundle[0], k, i) = x(bundle[0], k, i);
        continue;
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      double mass = 0.0;
      for (std::size_t s : bundle) {
        mass += x.prob(s);
        for (std::size_t i = 0; i < d; ++i) acc[i] += x.prob(s) * x(s, k, i);
      }
      for (std::size_t s : bundle)
        for (std::size_t i = 0; i < d; ++i) out(s, k, i) = acc[i] / mass;
    }
  return out;
}

inline ScenarioProcess proj_orthogonal(const ScenarioProcess& x, const BundlePartition& part) {
  return x - proj_adapted(x, part);
}

}  // namespace vppha
