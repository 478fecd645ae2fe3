#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppha/core_process.hpp"
#include "vppha/csv.hpp"
#include "vppha/timestamp.hpp"

namespace vppha {

/// {0.01, 0.05, 0.10, ..., 0.95, 0.99}
inline std::vector<double> default_quantile_levels() {
  std::vector<double> lv{0.01};
  for (int i = 1; i <= 19; ++i) lv.push_back(0.05 * i);
  lv.push_back(0.99);
  return lv;
}

/// ceil(n * level)-th smallest sample. The product is nudged down by 1e-9 so
/// that levels such as 0.3 with n = 10 select the 3rd value despite rounding.
inline double empirical_quantile(std::vector<double> samples, double level) {
  if (samples.empty()) throw std::invalid_argument("empirical_quantile: no samples");
  if (!(level > 0.0 && level <= 1.0)) throw std::invalid_argument("empirical_quantile: level must be in (0, 1]");
  const double n = static_cast<double>(samples.size());
  auto rank = static_cast<std::size_t>(std::ceil(n * level - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, samples.size());
  std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(rank - 1), samples.end());
  return samples[rank - 1];
}

struct QuantileModel {
  std::vector<double> levels;
  std::vector<std::vector<double>> curves;  // [level][time index], normalized
  std::size_t steps_per_day = 0;
  double scale = 1.0;
  std::string cluster_id;

  void validate() const {
    if (levels.empty() || steps_per_day == 0) throw std::invalid_argument("QuantileModel: empty");
    if (!(scale > 0.0)) throw std::invalid_argument("QuantileModel: scale must be > 0");
    if (curves.size() != levels.size()) throw std::invalid_argument("QuantileModel: one curve per level");
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (!(levels[l] > 0.0 && levels[l] < 1.0) || (l > 0 && !(levels[l] > levels[l - 1])))
        throw std::invalid_argument("QuantileModel: levels must be increasing in (0, 1)");
      if (curves[l].size() != steps_per_day) throw std::invalid_argument("QuantileModel: curve length");
      for (std::size_t t = 0; t < steps_per_day; ++t) {
        const double v = curves[l][t];
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("QuantileModel: curve value outside [0, 1]");
        if (l > 0 && v < curves[l - 1][t]) throw std::invalid_argument("QuantileModel: curves cross");
      }
    }
  }
};

/// One calendar day of measurements at a fixed cadence.
struct DayTrajectory {
  Timestamp day;  // midnight
  std::vector<double> values;
};

using ClusterRule = std::function<std::string(const Timestamp& day)>;

/// Calendar month crossed with weekday/weekend, e.g. "m03-weekend".
inline std::string month_daytype_cluster(const Timestamp& day) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "m%02u-%s", day.month(), day.weekend() ? "weekend" : "weekday");
  return buf;
}

/// One model per cluster label, ordered by label. A cluster whose peak is 0
/// keeps scale 1 so that all curves are 0.
inline std::vector<QuantileModel> fit_quantiles(const std::vector<DayTrajectory>& history, const ClusterRule& rule,
                                                int steps_per_hour,
                                                const std::vector<double>& levels = default_quantile_levels()) {
  if (steps_per_hour != 1 && steps_per_hour != 2 && steps_per_hour != 6)
    throw std::invalid_argument("fit_quantiles: steps_per_hour must be 1, 2 or 6");
  if (history.empty()) throw std::invalid_argument("fit_quantiles: cluster with zero days");
  const auto spd = static_cast<std::size_t>(24 * steps_per_hour);
  std::map<std::string, std::vector<const DayTrajectory*>> groups;
  for (const auto& d : history) {
    if (d.values.size() != spd) throw std::invalid_argument("fit_quantiles: day has wrong number of values");
    for (double v : d.values)
      if (!(v >= 0.0)) throw std::invalid_argument("fit_quantiles: negative or non-finite value");
    groups[rule(d.day)].push_back(&d);
  }
  std::vector<QuantileModel> out;
  for (const auto& [label, days] : groups) {
    if (days.empty()) throw std::invalid_argument("fit_quantiles: cluster with zero days");
    QuantileModel m;
    m.levels = levels;
    m.steps_per_day = spd;
    m.cluster_id = label;
    double peak = 0.0;
    for (const auto* d : days) peak = std::max(peak, *std::max_element(d->values.begin(), d->values.end()));
    m.scale = peak > 0.0 ? peak : 1.0;
    m.curves.assign(levels.size(), std::vector<double>(spd, 0.0));
    std::vector<double> col(days.size());
    for (std::size_t t = 0; t < spd; ++t) {
      for (std::size_t i = 0; i < days.size(); ++i) col[i] = days[i]->values[t] / m.scale;
      double floor = 0.0;
      for (std::size_t l = 0; l < levels.size(); ++l) {
        floor = std::max(floor, std::clamp(empirical_quantile(col, levels[l]), 0.0, 1.0));
        m.curves[l][t] = floor;
      }
    }
    m.validate();
    out.push_back(std::move(m));
  }
  return out;
}

/// Piecewise-linear CDF at one time index through (0,0), (curve_l, level_l),
/// (1,1). Where several breakpoints share a value the CDF jumps; the forward
/// map returns the middle of the jump. The inverse is clamped to the curve
/// range [curve_1, curve_L].
class MarginalCdf {
 public:
  MarginalCdf(const QuantileModel& m, std::size_t t) {
    if (t >= m.steps_per_day) throw std::out_of_range("MarginalCdf: time index");
    vx_.push_back(0.0);
    ly_.push_back(0.0);
    for (std::size_t l = 0; l < m.levels.size(); ++l) {
      vx_.push_back(m.curves[l][t]);
      ly_.push_back(m.levels[l]);
    }
    vx_.push_back(1.0);
    ly_.push_back(1.0);
  }

  double operator()(double x) const {
    if (x <= vx_.front() && x < vx_[1]) return 0.0;
    if (x >= vx_.back() && x > vx_[vx_.size() - 2]) return 1.0;
    const auto lo = std::lower_bound(vx_.begin(), vx_.end(), x);
    const auto hi = std::upper_bound(vx_.begin(), vx_.end(), x);
    if (lo != hi) {  // x hits one or more breakpoints
      const auto a = static_cast<std::size_t>(lo - vx_.begin()), b = static_cast<std::size_t>(hi - vx_.begin()) - 1;
      return 0.5 * (ly_[a] + ly_[b]);
    }
    const auto j = static_cast<std::size_t>(lo - vx_.begin());  // vx_[j-1] < x < vx_[j]
    const double w = (x - vx_[j - 1]) / (vx_[j] - vx_[j - 1]);
    return ly_[j - 1] + w * (ly_[j] - ly_[j - 1]);
  }

  double inverse(double u) const {
    const std::size_t first = 1, last = vx_.size() - 2;
    if (u <= ly_[first]) return vx_[first];
    if (u >= ly_[last]) return vx_[last];
    const auto it = std::upper_bound(ly_.begin() + first, ly_.begin() + last + 1, u);
    const auto j = static_cast<std::size_t>(it - ly_.begin());  // ly_[j-1] <= u < ly_[j]
    const double w = (u - ly_[j - 1]) / (ly_[j] - ly_[j - 1]);
    return vx_[j - 1] + w * (vx_[j] - vx_[j - 1]);
  }

 private:
  std::vector<double> vx_, ly_;
};

/// CDF of W = (1 - alpha) U + alpha V for independent uniforms U, V.
inline double trapezoid_cdf(double x, double alpha_corr) {
  if (!(alpha_corr > 0.0 && alpha_corr < 1.0)) throw std::domain_error("trapezoid_cdf: alpha_corr must be in (0, 1)");
  if (!(x >= 0.0 && x <= 1.0)) throw std::domain_error("trapezoid_cdf: x must be in [0, 1]");
  const double a = std::min(alpha_corr, 1.0 - alpha_corr), b = std::max(alpha_corr, 1.0 - alpha_corr);
  if (x <= a) return x * x / (2.0 * a * b);
  if (x <= b) return a / (2.0 * b) + (x - a) / b;
  if (x == 1.0) return 1.0;
  return 1.0 - (1.0 - x) * (1.0 - x) / (2.0 * a * b);
}

inline double trapezoid_cdf_inv(double u, double alpha_corr) {
  if (!(alpha_corr > 0.0 && alpha_corr < 1.0))
    throw std::domain_error("trapezoid_cdf_inv: alpha_corr must be in (0, 1)");
  if (!(u >= 0.0 && u <= 1.0)) throw std::domain_error("trapezoid_cdf_inv: u must be in [0, 1]");
  const double a = std::min(alpha_corr, 1.0 - alpha_corr), b = std::max(alpha_corr, 1.0 - alpha_corr);
  const double ua = a / (2.0 * b);
  if (u <= ua) return std::sqrt(2.0 * a * b * u);
  if (u <= 1.0 - ua) return a + b * (u - ua);
  return 1.0 - std::sqrt(2.0 * a * b * (1.0 - u));
}

/// Rank recursion rank_{k+1} = F((1 - alpha) rank_k + alpha U) where
/// rank_k = F_k(x_k), mapped through the marginal inverses.
class RankChain {
 public:
  explicit RankChain(double alpha_corr) : alpha_(alpha_corr) {
    if (!(alpha_corr > 0.0 && alpha_corr < 1.0)) throw std::domain_error("alpha_corr must be in (0, 1)");
  }
  /// Rank of the next value given the rank of the previous one.
  double next(double prev_rank, std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const double w = (1.0 - alpha_) * std::clamp(prev_rank, 0.0, 1.0) + alpha_ * U(rng);
    return trapezoid_cdf(std::clamp(w, 0.0, 1.0), alpha_);
  }
  double alpha() const { return alpha_; }

 private:
  double alpha_;
};

/// Cached marginals of one model.
class MarginalSet {
 public:
  explicit MarginalSet(const QuantileModel& m) : model_(&m) {
    m.validate();
    for (std::size_t t = 0; t < m.steps_per_day; ++t) cdf_.emplace_back(m, t);
  }
  const QuantileModel& model() const { return *model_; }
  const MarginalCdf& operator[](std::size_t t) const { return cdf_[t]; }

 private:
  const QuantileModel* model_;
  std::vector<MarginalCdf> cdf_;
};

/// One day (steps_per_day values, in physical units). The first value draws
/// its rank uniformly; `first_rank` overrides that draw.
inline std::vector<double> sample_scenario(const MarginalSet& ms, double alpha_corr, std::mt19937_64& rng,
                                           std::optional<double> first_rank = std::nullopt) {
  const RankChain chain(alpha_corr);
  const auto& m = ms.model();
  std::vector<double> out(m.steps_per_day);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  double rank = first_rank ? *first_rank : U(rng);
  double x = ms[0].inverse(rank);
  out[0] = x * m.scale;
  for (std::size_t t = 1; t < m.steps_per_day; ++t) {
    rank = chain.next(ms[t - 1](x), rng);
    x = ms[t].inverse(rank);
    out[t] = x * m.scale;
  }
  return out;
}

inline std::vector<double> sample_scenario(const QuantileModel& m, double alpha_corr, std::mt19937_64& rng) {
  return sample_scenario(MarginalSet(m), alpha_corr, rng);
}

/// N_s equiprobable days on a grid of 1/steps_per_hour hours. Scenario s uses
/// its own stream seeded from `rng`.
inline ScenarioProcess generate(const QuantileModel& m, double alpha_corr, std::size_t n_s, std::mt19937_64& rng) {
  if (n_s == 0) throw std::invalid_argument("generate: need at least one scenario");
  const MarginalSet ms(m);
  const double dt = 24.0 / static_cast<double>(m.steps_per_day);
  auto out = ScenarioProcess::equiprobable(TimeGrid(0.0, dt, m.steps_per_day), 1, n_s);
  for (std::size_t s = 0; s < n_s; ++s) {
    std::mt19937_64 sub(rng());
    const auto day = sample_scenario(ms, alpha_corr, sub);
    for (std::size_t k = 0; k < day.size(); ++k) out(s, k, 0) = day[k];
  }
  return out;
}

/// Models indexed by cluster label plus the rule that picks one per day.
class ModelLibrary {
 public:
  ModelLibrary(std::vector<QuantileModel> models, ClusterRule rule) : models_(std::move(models)), rule_(std::move(rule)) {
    if (models_.empty()) throw std::invalid_argument("ModelLibrary: no models");
    for (const auto& m : models_) {
      if (m.steps_per_day != models_.front().steps_per_day)
        throw std::invalid_argument("ModelLibrary: models disagree on steps_per_day");
      if (index_.count(m.cluster_id)) throw std::invalid_argument("ModelLibrary: duplicate cluster " + m.cluster_id);
      index_[m.cluster_id] = sets_.size();
      sets_.push_back(std::make_unique<MarginalSet>(m));
    }
  }
  ModelLibrary(const ModelLibrary&) = delete;
  ModelLibrary& operator=(const ModelLibrary&) = delete;

  std::size_t steps_per_day() const { return models_.front().steps_per_day; }
  std::int64_t step_minutes() const { return 1440 / static_cast<std::int64_t>(steps_per_day()); }
  const std::vector<QuantileModel>& models() const { return models_; }

  /// Model for the day containing `t`. Days whose cluster has no model fall
  /// back to the first model with the same day type suffix, then to the first.
  const MarginalSet& for_time(Timestamp t) const {
    const Timestamp midnight{t.day().time_since_epoch().count() * 1440};
    const std::string label = rule_(midnight);
    if (auto it = index_.find(label); it != index_.end()) return *sets_[it->second];
    const auto dash = label.find('-');
    if (dash != std::string::npos)
      for (std::size_t i = 0; i < models_.size(); ++i)
        if (models_[i].cluster_id.size() > dash && models_[i].cluster_id.substr(dash) == label.substr(dash))
          return *sets_[i];
    return *sets_.front();
  }

 private:
  std::vector<QuantileModel> models_;
  ClusterRule rule_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::unique_ptr<MarginalSet>> sets_;
};

/// K values starting at `start` (on the model cadence), continuing the rank
/// chain across midnight with the next day's model.
inline std::vector<double> sample_window(const ModelLibrary& lib, Timestamp start, std::size_t K, double alpha_corr,
                                         std::mt19937_64& rng, std::optional<double> first_rank = std::nullopt) {
  const RankChain chain(alpha_corr);
  const std::int64_t step = lib.step_minutes();
  if (start.minute_of_day() % step != 0) throw std::invalid_argument("sample_window: start is off the model cadence");
  std::vector<double> out(K);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  double rank = first_rank ? *first_rank : U(rng);
  double prev_x = 0.0;
  const MarginalSet* prev = nullptr;
  std::size_t prev_t = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const Timestamp t = start + static_cast<std::int64_t>(k) * step;
    const MarginalSet& ms = lib.for_time(t);
    const auto idx = static_cast<std::size_t>(t.minute_of_day() / step);
    if (prev) rank = chain.next((*prev)[prev_t](prev_x), rng);
    prev_x = ms[idx].inverse(rank);
    out[k] = prev_x * ms.model().scale;
    prev = &ms;
    prev_t = idx;
  }
  return out;
}

/// Rank of a physical measurement under the model active at `t`.
inline double measurement_rank(const ModelLibrary& lib, Timestamp t, double value) {
  const MarginalSet& ms = lib.for_time(t);
  const auto idx = static_cast<std::size_t>(t.minute_of_day() / lib.step_minutes());
  return ms[idx](std::clamp(value / ms.model().scale, 0.0, 1.0));
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| between two sets
/// of equal-length vectors under the Euclidean norm.
inline double energy_distance(const std::vector<std::vector<double>>& X, const std::vector<std::vector<double>>& Y) {
  if (X.empty() || Y.empty()) throw std::invalid_argument("energy_distance: empty sample");
  auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeMismatch("energy_distance: vector lengths differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  };
  auto mean_dist = [&](const auto& A, const auto& B) {
    double s = 0.0;
    for (const auto& a : A)
      for (const auto& b : B) s += dist(a, b);
    return s / static_cast<double>(A.size() * B.size());
  };
  return 2.0 * mean_dist(X, Y) - mean_dist(X, X) - mean_dist(Y, Y);
}

inline std::vector<double> default_alpha_corr_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 9; ++i) g.push_back(i / 10.0);
  return g;
}

/// Grid value whose generated batch is closest in energy distance to the
/// validation days. Every grid value reuses the same seed; ties go to the
/// smallest grid value.
inline double calibrate_alpha_corr(const QuantileModel& m, const std::vector<std::vector<double>>& validation_days,
                                   std::vector<double> grid, std::uint64_t seed, std::size_t batch = 200) {
  if (validation_days.empty()) throw std::invalid_argument("calibrate_alpha_corr: empty validation set");
  if (grid.empty()) throw std::invalid_argument("calibrate_alpha_corr: empty grid");
  std::sort(grid.begin(), grid.end());
  const MarginalSet ms(m);
  double best = grid.front(), best_d = std::numeric_limits<double>::infinity();
  for (double a : grid) {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<double>> X;
    X.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      std::mt19937_64 sub(rng());
      X.push_back(sample_scenario(ms, a, sub));
    }
    const double d = energy_distance(X, validation_days);
    if (std::isinf(best_d) || d < best_d - 1e-12 * std::max(1.0, std::abs(best_d))) {
      best_d = d;
      best = a;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Parses `timestamp,value` rows at a fixed cadence into complete days.
/// Days with missing steps at the start or end of the record are dropped;
/// a gap inside the record is an error.
inline std::vector<DayTrajectory> read_history_csv(std::istream& in, int steps_per_hour,
                                                   const std::string& value_column = "value") {
  const auto table = csv::read_table(in);
  const auto ct = table.column("timestamp"), cv = table.column(value_column);
  const std::int64_t step = 60 / steps_per_hour;
  if (steps_per_hour <= 0 || 60 % steps_per_hour != 0) throw std::invalid_argument("read_history_csv: cadence");
  const auto spd = static_cast<std::size_t>(24 * steps_per_hour);
  std::map<std::int64_t, std::vector<double>> days;
  std::map<std::int64_t, std::size_t> filled;
  std::optional<Timestamp> prev;
  for (const auto& r : table.rows) {
    const Timestamp t = parse_timestamp(r[ct]);
    if (prev && t - *prev != step)
      throw ParseError("history gap or cadence change at " + format_timestamp(t));
    prev = t;
    if (t.minute_of_day() % step != 0) throw ParseError("timestamp off cadence: " + format_timestamp(t));
    const std::int64_t d = t.day().time_since_epoch().count();
    auto& v = days[d];
    v.resize(spd, 0.0);
    v[static_cast<std::size_t>(t.minute_of_day() / step)] = csv::parse_double(r[cv]);
    ++filled[d];
  }
  std::vector<DayTrajectory> out;
  for (auto& [d, v] : days)
    if (filled[d] == spd) out.push_back({Timestamp{d * 1440}, std::move(v)});
  return out;
}

/// Header line `levels=l1;l2;...,steps_per_day=n,scale=s,cluster_id=id`
/// followed by one comma-separated curve per level.
inline void write_model_csv(std::ostream& out, const QuantileModel& m) {
  out << "levels=";
  for (std::size_t l = 0; l < m.levels.size(); ++l) out << (l ? ";" : "") << csv::format(m.levels[l]);
  out << ",steps_per_day=" << m.steps_per_day << ",scale=" << csv::format(m.scale) << ",cluster_id=" << m.cluster_id
      << '\n';
  for (const auto& c : m.curves) {
    for (std::size_t t = 0; t < c.size(); ++t) out << (t ? "," : "") << csv::format(c[t]);
    out << '\n';
  }
}

inline QuantileModel read_model_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("model CSV: missing header");
  QuantileModel m;
  bool have_levels = false, have_spd = false, have_scale = false, have_id = false;
  for (const auto& field : csv::split(line)) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ParseError("model CSV: bad header field '" + field + "'");
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "levels") {
      for (const auto& l : csv::split(val, ';')) m.levels.push_back(csv::parse_double(l));
      have_levels = true;
    } else if (key == "steps_per_day") {
      m.steps_per_day = static_cast<std::size_t>(csv::parse_int(val));
      have_spd = true;
    } else if (key == "scale") {
      m.scale = csv::parse_double(val);
      have_scale = true;
    } else if (key == "cluster_id") {
      m.cluster_id = val;
      have_id = true;
    } else {
      throw ParseError("model CSV: unknown header key '" + key + "'");
    }
  }
  if (!(have_levels && have_spd && have_scale && have_id)) throw ParseError("model CSV: incomplete header");
  while (m.curves.size() < m.levels.size() && std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<double> c;
    for (const auto& f : csv::split(line)) c.push_back(csv::parse_double(f));
    m.curves.push_back(std::move(c));
  }
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("model CSV: ") + e.what());
  }
  return m;
}

}  // namespace vppha
