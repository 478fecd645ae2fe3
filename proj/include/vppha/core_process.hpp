#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vppha {

/// Thrown whenever two processes or trajectories are combined on incompatible shapes.
class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Uniform grid t0 + j*dt, j = 0..K-1 (hours).
struct TimeGrid {
  double t0 = 0.0;
  double dt = 1.0;
  std::size_t K = 1;

  TimeGrid() = default;
  TimeGrid(double t0_, double dt_, std::size_t K_) : t0(t0_), dt(dt_), K(K_) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("TimeGrid: dt must be > 0");
    if (K < 1) throw std::invalid_argument("TimeGrid: K must be >= 1");
  }

  double at(std::size_t j) const { return t0 + static_cast<double>(j) * dt; }
  double horizon() const { return static_cast<double>(K) * dt; }

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;
};

/// A single K x d deterministic signal.
class Trajectory {
 public:
  Trajectory() = default;
  Trajectory(TimeGrid grid, std::size_t d, double fill = 0.0)
      : grid_(grid), d_(d), values_(grid.K * d, fill) {}
  Trajectory(TimeGrid grid, std::size_t d, std::vector<double> values)
      : grid_(grid), d_(d), values_(std::move(values)) {
    if (values_.size() != grid_.K * d_) throw ShapeMismatch("Trajectory: values size != K*d");
    for (double v : values_)
      if (!std::isfinite(v)) throw std::invalid_argument("Trajectory: non-finite value");
  }

  const TimeGrid& grid() const { return grid_; }
  std::size_t steps() const { return grid_.K; }
  std::size_t channels() const { return d_; }

  double& operator()(std::size_t k, std::size_t i) { return values_[k * d_ + i]; }
  double operator()(std::size_t k, std::size_t i) const { return values_[k * d_ + i]; }

  std::span<double> step(std::size_t k) { return {values_.data() + k * d_, d_}; }
  std::span<const double> step(std::size_t k) const { return {values_.data() + k * d_, d_}; }

  std::vector<double>& data() { return values_; }
  const std::vector<double>& data() const { return values_; }

 private:
  TimeGrid grid_;
  std::size_t d_ = 0;
  std::vector<double> values_;
};

/// S weighted scenarios of a K-step, d-channel signal. Layout is [s][k][i].
class ScenarioProcess {
 public:
  static constexpr double kRenormTol = 1e-9;

  ScenarioProcess() = default;

  /// Zero-valued process with the given probabilities.
  ScenarioProcess(TimeGrid grid, std::size_t d, std::vector<double> probabilities)
      : grid_(grid), d_(d), probs_(std::move(probabilities)) {
    values_.assign(probs_.size() * grid_.K * d_, 0.0);
    normalize_probabilities();
  }

  ScenarioProcess(TimeGrid grid, std::size_t d, std::vector<double> probabilities,
                  std::vector<double> values)
      : grid_(grid), d_(d), probs_(std::move(probabilities)), values_(std::move(values)) {
    if (values_.size() != probs_.size() * grid_.K * d_)
      throw ShapeMismatch("ScenarioProcess: values size != S*K*d");
    for (double v : values_)
      if (!std::isfinite(v)) throw std::invalid_argument("ScenarioProcess: non-finite value");
    normalize_probabilities();
  }

  static ScenarioProcess equiprobable(TimeGrid grid, std::size_t d, std::size_t S) {
    ScenarioProcess out(grid, d, std::vector<double>(S, 1.0 / static_cast<double>(S)));
    std::fill(out.probs_.begin(), out.probs_.end(), 1.0 / static_cast<double>(S));  // exactly 1/S
    return out;
  }

  /// Same shape and probabilities, zero values.
  ScenarioProcess zeros_like() const {
    ScenarioProcess out = *this;
    std::fill(out.values_.begin(), out.values_.end(), 0.0);
    return out;
  }

  const TimeGrid& grid() const { return grid_; }
  std::size_t scenarios() const { return probs_.size(); }
  std::size_t steps() const { return grid_.K; }
  std::size_t channels() const { return d_; }
  const std::vector<double>& probabilities() const { return probs_; }
  double prob(std::size_t s) const { return probs_[s]; }

  double& operator()(std::size_t s, std::size_t k, std::size_t i) {
    return values_[(s * grid_.K + k) * d_ + i];
  }
  double operator()(std::size_t s, std::size_t k, std::size_t i) const {
    return values_[(s * grid_.K + k) * d_ + i];
  }

  std::span<const double> step(std::size_t s, std::size_t k) const {
    return {values_.data() + (s * grid_.K + k) * d_, d_};
  }

  Trajectory scenario(std::size_t s) const {
    auto first = values_.begin() + static_cast<std::ptrdiff_t>(s * grid_.K * d_);
    return Trajectory(grid_, d_, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(grid_.K * d_)));
  }

  void set_scenario(std::size_t s, const Trajectory& x) {
    if (x.steps() != grid_.K || x.channels() != d_) throw ShapeMismatch("set_scenario: shape");
    std::copy(x.data().begin(), x.data().end(),
              values_.begin() + static_cast<std::ptrdiff_t>(s * grid_.K * d_));
  }

  std::vector<double>& data() { return values_; }
  const std::vector<double>& data() const { return values_; }

  bool same_shape(const ScenarioProcess& o) const {
    return grid_ == o.grid_ && d_ == o.d_ && probs_.size() == o.probs_.size();
  }

  ScenarioProcess& operator+=(const ScenarioProcess& o) {
    require_shape(o);
    for (std::size_t j = 0; j < values_.size(); ++j) values_[j] += o.values_[j];
    return *this;
  }
  ScenarioProcess& operator-=(const ScenarioProcess& o) {
    require_shape(o);
    for (std::size_t j = 0; j < values_.size(); ++j) values_[j] -= o.values_[j];
    return *this;
  }
  ScenarioProcess& operator*=(double a) {
    for (double& v : values_) v *= a;
    return *this;
  }
  friend ScenarioProcess operator+(ScenarioProcess a, const ScenarioProcess& b) { return a += b; }
  friend ScenarioProcess operator-(ScenarioProcess a, const ScenarioProcess& b) { return a -= b; }
  friend ScenarioProcess operator*(double a, ScenarioProcess x) { return x *= a; }

  void require_shape(const ScenarioProcess& o) const {
    if (!same_shape(o)) throw ShapeMismatch("ScenarioProcess: shape mismatch");
  }

 private:
  void normalize_probabilities() {
    if (probs_.empty()) throw std::invalid_argument("ScenarioProcess: no scenarios");
    double total = 0.0;
    for (double p : probs_) {
      if (!(p > 0.0) || !std::isfinite(p))
        throw std::invalid_argument("ScenarioProcess: probabilities must be strictly positive");
      total += p;
    }
    if (std::abs(total - 1.0) > kRenormTol)
      throw std::invalid_argument("ScenarioProcess: probabilities sum to " + std::to_string(total));
    if (total != 1.0)
      for (double& p : probs_) p /= total;
  }

  TimeGrid grid_;
  std::size_t d_ = 0;
  std::vector<double> probs_;
  std::vector<double> values_;
};

/// sum_s p_s x^s per step and channel.
inline Trajectory expectation(const ScenarioProcess& x) {
  Trajectory out(x.grid(), x.channels());
  for (std::size_t s = 0; s < x.scenarios(); ++s) {
    const double p = x.prob(s);
    for (std::size_t k = 0; k < x.steps(); ++k)
      for (std::size_t i = 0; i < x.channels(); ++i) out(k, i) += p * x(s, k, i);
  }
  return out;
}

/// Broadcast a trajectory over the scenarios of `like`.
inline ScenarioProcess broadcast(const Trajectory& t, const ScenarioProcess& like) {
  ScenarioProcess out = like.zeros_like();
  for (std::size_t s = 0; s < like.scenarios(); ++s) out.set_scenario(s, t);
  return out;
}

/// E <x, y>_{L2} with the left-rectangle rule in time.
inline double inner(const ScenarioProcess& x, const ScenarioProcess& y) {
  x.require_shape(y);
  const double dt = x.grid().dt;
  double total = 0.0;
  for (std::size_t s = 0; s < x.scenarios(); ++s) {
    double acc = 0.0;
    for (std::size_t k = 0; k < x.steps(); ++k)
      for (std::size_t i = 0; i < x.channels(); ++i) acc += x(s, k, i) * y(s, k, i);
    total += x.prob(s) * dt * acc;
  }
  return total;
}

inline double norm(const ScenarioProcess& x) { return std::sqrt(inner(x, x)); }

/// sum_k dt <a_k, b_k>
inline double inner(const Trajectory& a, const Trajectory& b) {
  if (a.steps() != b.steps() || a.channels() != b.channels())
    throw ShapeMismatch("Trajectory inner: shape mismatch");
  double acc = 0.0;
  for (std::size_t j = 0; j < a.data().size(); ++j) acc += a.data()[j] * b.data()[j];
  return a.grid().dt * acc;
}

}  // namespace vppha
