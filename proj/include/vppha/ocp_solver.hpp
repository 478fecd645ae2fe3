#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppha/core_process.hpp"
#include "vppha/csv.hpp"
#include "vppha/detail/banded_lu.hpp"

namespace vppha {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Newton stalled or hit its iteration cap at the final smoothing level.
class NonConvergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Terminal equality cannot be met by any control.
class Infeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Fischer-Burmeister smoothing
// ---------------------------------------------------------------------------

struct FbValue {
  double value;
  double d_x;
  double d_y;
};

/// FB(x, y, eps) = x - y - sqrt(x^2 + y^2 + 2 eps). Its zero set is
/// {x > 0, y < 0, -x y = eps} for eps > 0, and complementarity for eps = 0.
inline FbValue fb(double x, double y, double eps) {
  const double s = std::sqrt(x * x + y * y + 2.0 * eps);
  if (s == 0.0) return {0.0, 1.0, -1.0};
  return {x - y - s, 1.0 - x / s, -1.0 - y / s};
}

// ---------------------------------------------------------------------------
// Problem data
// ---------------------------------------------------------------------------

/// Value, gradient and Hessian blocks of a stage cost at one point.
struct StageDerivatives {
  double value = 0.0;
  VectorXd grad_y, grad_u;
  MatrixXd hess_yy, hess_yu, hess_uu;

  void resize(Eigen::Index n, Eigen::Index m) {
    grad_y.setZero(n);
    grad_u.setZero(m);
    hess_yy.setZero(n, n);
    hess_yu.setZero(n, m);
    hess_uu.setZero(m, m);
    value = 0.0;
  }
};

struct TerminalDerivatives {
  double value = 0.0;
  VectorXd grad;
  MatrixXd hess;

  void resize(Eigen::Index n) {
    grad.setZero(n);
    hess.setZero(n, n);
    value = 0.0;
  }
};

/// l(y, u, xi_k) at step k. `out` is pre-sized and zeroed.
using StageCostFn = std::function<void(std::size_t k, const Eigen::Ref<const VectorXd>& y,
                                       const Eigen::Ref<const VectorXd>& u, std::span<const double> xi,
                                       StageDerivatives& out)>;
using TerminalCostFn = std::function<void(const Eigen::Ref<const VectorXd>& y, TerminalDerivatives& out)>;

/// One deterministic scenario subproblem: linear dynamics, affine path
/// inequalities C y + D u + E <= 0, terminal equality F y_K + G = 0, and the
/// progressive-hedging terms <lambda, u> + r/2 |u - zeta|^2.
///
/// Time-indexed data may hold either K entries or a single entry used at
/// every step.
struct OCPInstance {
  TimeGrid grid;
  Eigen::Index n = 0, m = 0, p = 0, q = 0;
  std::vector<MatrixXd> A, B, C, D;
  std::vector<VectorXd> E;
  MatrixXd F;
  VectorXd G;
  VectorXd y0;
  StageCostFn stage_cost;
  TerminalCostFn terminal_cost;  // empty means h = 0
  Trajectory xi;
  Trajectory lambda_aug;
  Trajectory zeta_aug;
  double r = 1.0;
  double control_bound = std::numeric_limits<double>::infinity();

  std::size_t K() const { return grid.K; }
  template <class T>
  static const T& pick(const std::vector<T>& v, std::size_t k) {
    return v.size() == 1 ? v.front() : v[k];
  }
  const MatrixXd& A_at(std::size_t k) const { return pick(A, k); }
  const MatrixXd& B_at(std::size_t k) const { return pick(B, k); }
  const MatrixXd& C_at(std::size_t k) const { return pick(C, k); }
  const MatrixXd& D_at(std::size_t k) const { return pick(D, k); }
  const VectorXd& E_at(std::size_t k) const { return pick(E, k); }

  void validate() const {
    auto bad = [](const std::string& what) { throw std::invalid_argument("OCPInstance: " + what); };
    if (n < 1 || m < 1 || p < 0 || q < 0) bad("dimensions");
    if (!(r > 0.0)) bad("r must be > 0");
    if (!stage_cost) bad("missing stage cost");
    auto check_series = [&](const auto& v, Eigen::Index rows, Eigen::Index cols, const char* name) {
      if (v.size() != 1 && v.size() != K()) bad(std::string(name) + " must have 1 or K entries");
      for (const auto& M : v) {
        if (M.rows() != rows || M.cols() != cols) bad(std::string(name) + " has wrong shape");
        if (!M.allFinite()) bad(std::string(name) + " not finite");
      }
    };
    check_series(A, n, n, "A");
    check_series(B, n, m, "B");
    if (p > 0) {
      check_series(C, p, n, "C");
      check_series(D, p, m, "D");
      check_series(E, p, 1, "E");
    }
    if (F.rows() != q || (q > 0 && F.cols() != n) || G.size() != q) bad("terminal constraint shape");
    if (y0.size() != n || !y0.allFinite()) bad("y0");
    if (lambda_aug.steps() != K() || lambda_aug.channels() != static_cast<std::size_t>(m)) bad("lambda_aug shape");
    if (zeta_aug.steps() != K() || zeta_aug.channels() != static_cast<std::size_t>(m)) bad("zeta_aug shape");
    if (xi.steps() != K()) bad("xi must have K steps");
  }
};

struct OCPSolution {
  MatrixXd u;          // K x m
  MatrixXd y;          // (K+1) x n
  MatrixXd p_costate;  // (K+1) x n
  MatrixXd mu_mult;    // K x p
  VectorXd eta_mult;   // q
  double kkt_residual = std::numeric_limits<double>::infinity();
  int newton_iters = 0;
  double eps_final = 0.0;
  double objective = 0.0;               // augmented objective at the final iterate
  std::vector<double> stage_objectives;  // one per completed smoothing level
};

struct NewtonTraceRecord {
  double eps;
  int iter;
  double residual;
  double step_len;
};

inline void write_newton_trace_csv(std::ostream& out, const std::vector<NewtonTraceRecord>& trace) {
  out << "eps,iter,residual,step_len\n";
  for (const auto& t : trace)
    out << csv::format(t.eps) << ',' << t.iter << ',' << csv::format(t.residual) << ',' << csv::format(t.step_len)
        << '\n';
}

/// Geometric sequence from `first` down to `last`, `count` values.
inline std::vector<double> geometric_schedule(double first, double last, int count) {
  std::vector<double> out;
  if (count == 1) return {last};
  for (int i = 0; i < count; ++i)
    out.push_back(first * std::pow(last / first, static_cast<double>(i) / static_cast<double>(count - 1)));
  out.back() = last;
  return out;
}

struct OCPSolverOptions {
  std::vector<double> eps_schedule = geometric_schedule(1e-1, 1e-8, 10);
  double newton_tol = 1e-9;
  int max_iters = 60;  // per smoothing level
  /// Intermediate levels stop at max(newton_tol, stage_tol_factor * eps).
  double stage_tol_factor = 1e-2;
  std::vector<NewtonTraceRecord>* trace = nullptr;
};

// ---------------------------------------------------------------------------
// Direct-transcription KKT system
// ---------------------------------------------------------------------------

namespace detail {

/// Unknown and residual layout: block k < K holds [y_k, p_k, u_k, mu_k]; the
/// final block holds [y_K, p_K, eta]. Residual rows follow the same blocks:
/// [dynamics into y_k, costate at k, control stationarity, FB rows] and
/// finally [dynamics into y_K, terminal equality, transversality].
class KktSystem {
 public:
  explicit KktSystem(const OCPInstance& inst)
      : in_(inst), n_(inst.n), m_(inst.m), p_(inst.p), q_(inst.q), K_(inst.K()) {
    w_ = static_cast<std::size_t>(2 * n_ + m_ + p_);
    size_ = K_ * w_ + static_cast<std::size_t>(2 * n_ + q_);
    stage_.resize(n_, m_);
    term_.resize(n_);
  }

  std::size_t size() const { return size_; }
  std::size_t y(std::size_t k) const { return k * w_; }
  std::size_t pc(std::size_t k) const { return k * w_ + static_cast<std::size_t>(n_); }
  std::size_t u(std::size_t k) const { return k * w_ + static_cast<std::size_t>(2 * n_); }
  std::size_t mu(std::size_t k) const { return k * w_ + static_cast<std::size_t>(2 * n_ + m_); }
  std::size_t eta() const { return K_ * w_ + static_cast<std::size_t>(2 * n_); }

  VectorXd pack(const OCPSolution& s) const {
    VectorXd z = VectorXd::Zero(static_cast<Eigen::Index>(size_));
    for (std::size_t k = 0; k <= K_; ++k) {
      z.segment(seg(y(k)), n_) = s.y.row(static_cast<Eigen::Index>(k)).transpose();
      z.segment(seg(pc(k)), n_) = s.p_costate.row(static_cast<Eigen::Index>(k)).transpose();
    }
    for (std::size_t k = 0; k < K_; ++k) {
      z.segment(seg(u(k)), m_) = s.u.row(static_cast<Eigen::Index>(k)).transpose();
      if (p_ > 0) z.segment(seg(mu(k)), p_) = s.mu_mult.row(static_cast<Eigen::Index>(k)).transpose();
    }
    if (q_ > 0) z.segment(seg(eta()), q_) = s.eta_mult;
    return z;
  }

  void unpack(const VectorXd& z, OCPSolution& s) const {
    s.y.resize(static_cast<Eigen::Index>(K_ + 1), n_);
    s.p_costate.resize(static_cast<Eigen::Index>(K_ + 1), n_);
    s.u.resize(static_cast<Eigen::Index>(K_), m_);
    s.mu_mult.resize(static_cast<Eigen::Index>(K_), p_);
    for (std::size_t k = 0; k <= K_; ++k) {
      s.y.row(static_cast<Eigen::Index>(k)) = z.segment(seg(y(k)), n_).transpose();
      s.p_costate.row(static_cast<Eigen::Index>(k)) = z.segment(seg(pc(k)), n_).transpose();
    }
    for (std::size_t k = 0; k < K_; ++k) {
      s.u.row(static_cast<Eigen::Index>(k)) = z.segment(seg(u(k)), m_).transpose();
      if (p_ > 0) s.mu_mult.row(static_cast<Eigen::Index>(k)) = z.segment(seg(mu(k)), p_).transpose();
    }
    s.eta_mult = q_ > 0 ? VectorXd(z.segment(seg(eta()), q_)) : VectorXd();
  }

  /// Residual, and the Jacobian triplets when `jac` is non-null.
  void evaluate(const VectorXd& z, double eps, VectorXd& res, std::vector<Triplet>* jac) {
    res.setZero(static_cast<Eigen::Index>(size_));
    if (jac) jac->clear();
    const double dt = in_.grid.dt;
    auto put = [&](std::size_t r, std::size_t c, double v) {
      if (jac && v != 0.0) jac->push_back({r, c, v});
    };
    auto put_block = [&](std::size_t r, std::size_t c, const MatrixXd& M, double scale) {
      if (!jac) return;
      for (Eigen::Index i = 0; i < M.rows(); ++i)
        for (Eigen::Index j = 0; j < M.cols(); ++j)
          put(r + static_cast<std::size_t>(i), c + static_cast<std::size_t>(j), scale * M(i, j));
    };
    auto put_identity = [&](std::size_t r, std::size_t c, Eigen::Index dim, double scale) {
      for (Eigen::Index i = 0; i < dim; ++i) put(r + static_cast<std::size_t>(i), c + static_cast<std::size_t>(i), scale);
    };

    for (std::size_t k = 0; k < K_; ++k) {
      const auto yk = z.segment(seg(y(k)), n_);
      const auto uk = z.segment(seg(u(k)), m_);
      const auto pk = z.segment(seg(pc(k)), n_);
      const auto pnext = z.segment(seg(pc(k + 1)), n_);
      const MatrixXd& A = in_.A_at(k);
      const MatrixXd& B = in_.B_at(k);

      // Row block k, part 1: dynamics into y_k.
      const std::size_t r_dyn = y(k);
      if (k == 0) {
        res.segment(seg(r_dyn), n_) = yk - in_.y0;
        put_identity(r_dyn, y(0), n_, 1.0);
      } else {
        const auto yprev = z.segment(seg(y(k - 1)), n_);
        const auto uprev = z.segment(seg(u(k - 1)), m_);
        const MatrixXd& Ap = in_.A_at(k - 1);
        const MatrixXd& Bp = in_.B_at(k - 1);
        res.segment(seg(r_dyn), n_) = yk - yprev - dt * (Ap * yprev + Bp * uprev);
        if (jac) {
          put_identity(r_dyn, y(k), n_, 1.0);
          put_identity(r_dyn, y(k - 1), n_, -1.0);
          put_block(r_dyn, y(k - 1), Ap, -dt);
          put_block(r_dyn, u(k - 1), Bp, -dt);
        }
      }

      stage_.resize(n_, m_);
      in_.stage_cost(k, yk, uk, in_.xi.step(k), stage_);

      VectorXd g;
      if (p_ > 0) g = in_.C_at(k) * yk + in_.D_at(k) * uk + in_.E_at(k);

      // Part 2: costate recursion.
      const std::size_t r_co = pc(k);
      VectorXd co = pk - pnext - dt * (stage_.grad_y + A.transpose() * pnext);
      if (p_ > 0) co -= dt * in_.C_at(k).transpose() * z.segment(seg(mu(k)), p_);
      res.segment(seg(r_co), n_) = co;
      if (jac) {
        put_identity(r_co, pc(k), n_, 1.0);
        put_identity(r_co, pc(k + 1), n_, -1.0);
        put_block(r_co, pc(k + 1), MatrixXd(A.transpose()), -dt);
        put_block(r_co, y(k), stage_.hess_yy, -dt);
        put_block(r_co, u(k), stage_.hess_yu, -dt);
        if (p_ > 0) put_block(r_co, mu(k), MatrixXd(in_.C_at(k).transpose()), -dt);
      }

      // Part 3: control stationarity.
      const std::size_t r_st = u(k);
      VectorXd st = stage_.grad_u + B.transpose() * pnext;
      for (Eigen::Index i = 0; i < m_; ++i)
        st(i) += in_.lambda_aug(k, static_cast<std::size_t>(i)) +
                 in_.r * (uk(i) - in_.zeta_aug(k, static_cast<std::size_t>(i)));
      if (p_ > 0) st += in_.D_at(k).transpose() * z.segment(seg(mu(k)), p_);
      res.segment(seg(r_st), m_) = st;
      if (jac) {
        put_block(r_st, y(k), MatrixXd(stage_.hess_yu.transpose()), 1.0);
        put_block(r_st, u(k), stage_.hess_uu, 1.0);
        put_identity(r_st, u(k), m_, in_.r);
        put_block(r_st, pc(k + 1), MatrixXd(B.transpose()), 1.0);
        if (p_ > 0) put_block(r_st, mu(k), MatrixXd(in_.D_at(k).transpose()), 1.0);
      }

      // Part 4: smoothed complementarity.
      const std::size_t r_fb = mu(k);
      for (Eigen::Index i = 0; i < p_; ++i) {
        const double mui = z(seg(mu(k)) + i);
        const auto f = fb(mui, g(i), eps);
        res(seg(r_fb) + i) = f.value;
        if (jac) {
          const std::size_t row = r_fb + static_cast<std::size_t>(i);
          put(row, mu(k) + static_cast<std::size_t>(i), f.d_x);
          for (Eigen::Index j = 0; j < n_; ++j) put(row, y(k) + static_cast<std::size_t>(j), f.d_y * in_.C_at(k)(i, j));
          for (Eigen::Index j = 0; j < m_; ++j) put(row, u(k) + static_cast<std::size_t>(j), f.d_y * in_.D_at(k)(i, j));
        }
      }
    }

    // Final block.
    const auto yK = z.segment(seg(y(K_)), n_);
    const auto pK = z.segment(seg(pc(K_)), n_);
    {
      const auto yprev = z.segment(seg(y(K_ - 1)), n_);
      const auto uprev = z.segment(seg(u(K_ - 1)), m_);
      const MatrixXd& Ap = in_.A_at(K_ - 1);
      const MatrixXd& Bp = in_.B_at(K_ - 1);
      res.segment(seg(y(K_)), n_) = yK - yprev - dt * (Ap * yprev + Bp * uprev);
      if (jac) {
        put_identity(y(K_), y(K_), n_, 1.0);
        put_identity(y(K_), y(K_ - 1), n_, -1.0);
        put_block(y(K_), y(K_ - 1), Ap, -dt);
        put_block(y(K_), u(K_ - 1), Bp, -dt);
      }
    }
    const std::size_t r_term = pc(K_);  // q terminal rows, then n transversality rows
    if (q_ > 0) {
      res.segment(seg(r_term), q_) = in_.F * yK + in_.G;
      put_block(r_term, y(K_), in_.F, 1.0);
    }
    term_.resize(n_);
    if (in_.terminal_cost) in_.terminal_cost(yK, term_);
    const std::size_t r_tr = r_term + static_cast<std::size_t>(q_);
    VectorXd tr = pK - term_.grad;
    if (q_ > 0) tr -= in_.F.transpose() * z.segment(seg(eta()), q_);
    res.segment(seg(r_tr), n_) = tr;
    if (jac) {
      put_identity(r_tr, pc(K_), n_, 1.0);
      put_block(r_tr, y(K_), term_.hess, -1.0);
      if (q_ > 0) put_block(r_tr, eta(), MatrixXd(in_.F.transpose()), -1.0);
    }
  }

  /// sum_k dt (l_k + <lambda_k, u_k> + r/2 |u_k - zeta_k|^2) + h(y_K); with
  /// `augmented` false only the original cost sum_k dt l_k + h(y_K).
  double objective(const OCPSolution& s, bool augmented = true) {
    const double dt = in_.grid.dt;
    double total = 0.0;
    for (std::size_t k = 0; k < K_; ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      stage_.resize(n_, m_);
      in_.stage_cost(k, s.y.row(ki).transpose(), s.u.row(ki).transpose(), in_.xi.step(k), stage_);
      double aug = 0.0;
      if (augmented)
        for (Eigen::Index i = 0; i < m_; ++i) {
          const double dev = s.u(ki, i) - in_.zeta_aug(k, static_cast<std::size_t>(i));
          aug += in_.lambda_aug(k, static_cast<std::size_t>(i)) * s.u(ki, i) + 0.5 * in_.r * dev * dev;
        }
      total += dt * (stage_.value + aug);
    }
    term_.resize(n_);
    if (in_.terminal_cost) {
      in_.terminal_cost(s.y.row(static_cast<Eigen::Index>(K_)).transpose(), term_);
      total += term_.value;
    }
    return total;
  }

 private:
  static Eigen::Index seg(std::size_t i) { return static_cast<Eigen::Index>(i); }

  const OCPInstance& in_;
  Eigen::Index n_, m_, p_, q_;
  std::size_t K_, w_ = 0, size_ = 0;
  StageDerivatives stage_;
  TerminalDerivatives term_;
};

/// Rank test on u -> F y_K(u) + G. Throws Infeasible when no control can meet it.
inline void check_terminal_reachability(const OCPInstance& inst) {
  if (inst.q == 0) return;
  const std::size_t K = inst.K();
  const double dt = inst.grid.dt;
  const Eigen::Index n = inst.n, m = inst.m;
  // y_K = Phi y0 + sum_k Psi_k u_k, built backwards.
  MatrixXd Gamma(n, static_cast<Eigen::Index>(K) * m);
  MatrixXd prop = MatrixXd::Identity(n, n);
  for (std::size_t kk = K; kk-- > 0;) {
    Gamma.block(0, static_cast<Eigen::Index>(kk) * m, n, m) = prop * (dt * inst.B_at(kk));
    prop = prop * (MatrixXd::Identity(n, n) + dt * inst.A_at(kk));
  }
  const VectorXd free_end = prop * inst.y0;
  const MatrixXd M = inst.F * Gamma;
  const VectorXd rhs = -(inst.F * free_end + inst.G);
  Eigen::FullPivLU<MatrixXd> lu(M);
  lu.setThreshold(1e-10);
  if (lu.rank() == inst.q) return;
  const VectorXd sol = M.completeOrthogonalDecomposition().solve(rhs);
  const double miss = (M * sol - rhs).lpNorm<Eigen::Infinity>();
  if (miss > 1e-8 * (1.0 + rhs.lpNorm<Eigen::Infinity>()))
    throw Infeasible("terminal constraint is not reachable (rank " + std::to_string(lu.rank()) + " < " +
                     std::to_string(inst.q) + ")");
}

}  // namespace detail

/// Starting point: u = zeta, y by forward simulation, p = 0, mu = 1, eta = 0.
inline OCPSolution default_initial_guess(const OCPInstance& inst) {
  const std::size_t K = inst.K();
  const auto Ki = static_cast<Eigen::Index>(K);
  OCPSolution s;
  s.u.resize(Ki, inst.m);
  for (std::size_t k = 0; k < K; ++k)
    for (Eigen::Index i = 0; i < inst.m; ++i) s.u(static_cast<Eigen::Index>(k), i) = inst.zeta_aug(k, static_cast<std::size_t>(i));
  s.y.resize(Ki + 1, inst.n);
  s.y.row(0) = inst.y0.transpose();
  for (std::size_t k = 0; k < K; ++k) {
    const auto ki = static_cast<Eigen::Index>(k);
    VectorXd yk = s.y.row(ki).transpose();
    s.y.row(ki + 1) = (yk + inst.grid.dt * (inst.A_at(k) * yk + inst.B_at(k) * s.u.row(ki).transpose())).transpose();
  }
  s.p_costate = MatrixXd::Zero(Ki + 1, inst.n);
  s.mu_mult = MatrixXd::Ones(Ki, inst.p);
  s.eta_mult = VectorXd::Zero(inst.q);
  return s;
}

/// Max-norm of the full first-order residual at smoothing level eps.
inline double kkt_residual(const OCPInstance& inst, const OCPSolution& sol, double eps) {
  detail::KktSystem sys(inst);
  VectorXd res;
  sys.evaluate(sys.pack(sol), eps, res, nullptr);
  return res.lpNorm<Eigen::Infinity>();
}

/// Augmented objective of `sol` (or the original cost when `augmented` is false).
inline double ocp_objective(const OCPInstance& inst, const OCPSolution& sol, bool augmented = true) {
  detail::KktSystem sys(inst);
  return sys.objective(sol, augmented);
}

/// Solves the smoothed first-order system by damped Newton, tracking the
/// eps schedule with warm starts between levels.
inline OCPSolution solve_socp(const OCPInstance& inst, const OCPSolverOptions& opts = {},
                              const OCPSolution* initial = nullptr) {
  inst.validate();
  const auto& sched = opts.eps_schedule;
  if (sched.empty()) throw std::invalid_argument("solve_socp: empty eps schedule");
  for (std::size_t i = 0; i < sched.size(); ++i) {
    if (!(sched[i] > 0.0)) throw std::invalid_argument("solve_socp: eps must be positive");
    if (i > 0 && !(sched[i] < sched[i - 1])) throw std::invalid_argument("solve_socp: eps must decrease strictly");
  }
  detail::check_terminal_reachability(inst);

  detail::KktSystem sys(inst);
  OCPSolution sol = initial ? *initial : default_initial_guess(inst);
  VectorXd z = sys.pack(sol);
  VectorXd res, trial_res, trial;
  std::vector<detail::Triplet> jac;
  detail::BandedSystem band;
  std::vector<double> rhs;
  int total_iters = 0;

  for (std::size_t level = 0; level < sched.size(); ++level) {
    const double eps = sched[level];
    const bool last = level + 1 == sched.size();
    const double tol = last ? opts.newton_tol : std::max(opts.newton_tol, opts.stage_tol_factor * eps);
    sys.evaluate(z, eps, res, &jac);
    double rnorm = res.lpNorm<Eigen::Infinity>();
    std::vector<double> history{rnorm};
    int iter = 0;
    while (rnorm > tol) {
      if (iter >= opts.max_iters)
        throw NonConvergence("solve_socp: iteration limit at eps=" + csv::format(eps) +
                             " (residual " + csv::format(rnorm) + ")");
      band.assemble(sys.size(), jac);
      rhs.assign(res.data(), res.data() + res.size());
      for (double& v : rhs) v = -v;
      if (!band.solve(rhs)) throw NonConvergence("solve_socp: singular KKT matrix at eps=" + csv::format(eps));
      const Eigen::Map<const VectorXd> step(rhs.data(), static_cast<Eigen::Index>(rhs.size()));

      // Backtracking on the Euclidean residual norm.
      const double merit = res.norm();
      double t = 1.0;
      for (int bt = 0;; ++bt) {
        trial = z + t * step;
        sys.evaluate(trial, eps, trial_res, nullptr);
        if (trial_res.allFinite() && trial_res.norm() <= (1.0 - 1e-4 * t) * merit) break;
        if (bt == 30) break;
        t *= 0.5;
      }
      z = trial;
      sys.evaluate(z, eps, res, &jac);
      rnorm = res.lpNorm<Eigen::Infinity>();
      ++iter;
      ++total_iters;
      if (opts.trace) opts.trace->push_back({eps, iter, rnorm, t});
      history.push_back(rnorm);
      if (history.size() > 10 && history[history.size() - 11] - rnorm < 1e-12 && rnorm > tol)
        throw NonConvergence("solve_socp: Newton stalled at eps=" + csv::format(eps) + " (residual " +
                             csv::format(rnorm) + ")");
    }
    sys.unpack(z, sol);
    sol.stage_objectives.push_back(sys.objective(sol));
    sol.kkt_residual = rnorm;
  }
  sol.newton_iters = total_iters;
  sol.eps_final = sched.back();
  sol.objective = sol.stage_objectives.back();
  return sol;
}

}  // namespace vppha
