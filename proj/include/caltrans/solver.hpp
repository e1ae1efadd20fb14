#pragma once

// Exponential-tilting calibration. Every weighting problem in the library is
// an instance of
//
//   minimize_eta  f(eta) = sum_i base_i * exp(-a_i . eta) + b . eta
//
// whose stationarity condition sum_i a_i w_i = b, w_i = base_i exp(-a_i . eta),
// is exactly the set of primal moment constraints. The assemble_* functions
// build (a, b) for the sampling, transport, fusion and single-sample ATE
// problems; solve_entropy_dual runs damped Newton from eta = 0.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "caltrans/core.hpp"
#include "caltrans/error.hpp"

namespace caltrans {

struct EntropyProblem {
  MatrixXd a;             // n_active x k signed constraint features
  VectorXd b;             // k constraint targets
  IndexList active_rows;  // unit index of each row of `a`
  Index n_total = 0;      // units in the dataset; weights are zero elsewhere
  VectorXd base;          // base measure per active row; empty means all ones

  Index k() const { return a.cols(); }
  Index n_active() const { return a.rows(); }
};

struct SolverOptions {
  double tol = 1e-10;           // gradient max-norm, relative to 1 + |b|_inf
  double residual_tol = 1e-8;   // max_j |sum_i a_ij w_i - b_j| / (1 + |b_j|)
  int max_iter = 500;
  bool throw_on_failure = true;
};

struct DualSolution {
  VectorXd eta;
  VectorXd weights;  // length n_total, zero off the active rows
  bool converged = false;
  int iterations = 0;
  double grad_norm = std::numeric_limits<double>::infinity();
  double constraint_residual = std::numeric_limits<double>::infinity();
  Index worst_constraint = -1;
  std::vector<double> objective_trace;
};

namespace detail {

inline VectorXd log_base(const EntropyProblem& p) {
  if (p.base.size() == 0) return VectorXd::Zero(p.n_active());
  return p.base.array().log().matrix();
}

}  // namespace detail

// Active-row weights base_i * exp(-a_i . eta).
inline VectorXd active_weights(const EntropyProblem& p, const VectorXd& eta) {
  return (detail::log_base(p) - p.a * eta).array().exp().matrix();
}

// Evaluates f with the exponent shifted by its maximum so large tilts give
// +inf instead of NaN.
inline double dual_objective(const EntropyProblem& p, const VectorXd& eta) {
  const VectorXd u = detail::log_base(p) - p.a * eta;
  const double top = u.maxCoeff();
  const double mass = std::exp(top) * (u.array() - top).exp().sum();
  return mass + p.b.dot(eta);
}

inline VectorXd dual_gradient(const EntropyProblem& p, const VectorXd& eta) {
  return p.b - p.a.transpose() * active_weights(p, eta);
}

inline MatrixXd dual_hessian(const EntropyProblem& p, const VectorXd& eta) {
  const VectorXd w = active_weights(p, eta);
  return p.a.transpose() * w.asDiagonal() * p.a;
}

inline double constraint_residual(const EntropyProblem& p, const VectorXd& active_w,
                                  Index* worst = nullptr) {
  const VectorXd achieved = p.a.transpose() * active_w;
  double res = 0.0;
  Index arg = 0;
  for (Index j = 0; j < p.k(); ++j) {
    const double r = std::abs(achieved[j] - p.b[j]) / (1.0 + std::abs(p.b[j]));
    if (!(r <= res)) {
      res = r;
      arg = j;
    }
  }
  if (worst) *worst = arg;
  return res;
}

inline VectorXd scatter_weights(const EntropyProblem& p, const VectorXd& active_w) {
  VectorXd out = VectorXd::Zero(p.n_total);
  for (std::size_t r = 0; r < p.active_rows.size(); ++r) {
    out[p.active_rows[r]] = active_w[static_cast<Index>(r)];
  }
  return out;
}

inline DualSolution solve_entropy_dual(const EntropyProblem& p, const SolverOptions& options = {}) {
  if (p.n_active() == 0 || static_cast<Index>(p.active_rows.size()) != p.n_active()) {
    fail(ErrorCode::kInvalidArgument, "entropy problem has no active rows");
  }
  if (p.b.size() != p.k()) fail(ErrorCode::kDimensionMismatch, "b length differs from a columns");
  require_full_column_rank(p.a, "calibration constraint matrix");

  const Index k = p.k();
  const double grad_tol = options.tol * (1.0 + p.b.lpNorm<Eigen::Infinity>());
  DualSolution sol;
  sol.eta = VectorXd::Zero(k);
  double f = dual_objective(p, sol.eta);
  sol.objective_trace.push_back(f);

  VectorXd w;
  VectorXd g;
  for (int iter = 0;; ++iter) {
    w = active_weights(p, sol.eta);
    g = p.b - p.a.transpose() * w;
    sol.iterations = iter;
    sol.grad_norm = g.lpNorm<Eigen::Infinity>();
    sol.constraint_residual = constraint_residual(p, w, &sol.worst_constraint);
    // Aim 100x below the tolerances while Newton is still making progress;
    // anything within them counts as converged once it stalls.
    const bool within_tol = sol.grad_norm <= grad_tol && sol.constraint_residual <= options.residual_tol;
    sol.converged = within_tol;
    if (within_tol && sol.grad_norm <= 1e-2 * grad_tol && sol.constraint_residual <= 1e-2 * options.residual_tol) {
      break;
    }
    if (iter >= options.max_iter) break;

    const MatrixXd h = p.a.transpose() * w.asDiagonal() * p.a;
    Eigen::LDLT<MatrixXd> ldlt(h);
    VectorXd dir = ldlt.solve(-g);
    if (ldlt.info() != Eigen::Success || !dir.allFinite() || g.dot(dir) >= 0.0) dir = -g;

    // Armijo backtracking. Once the predicted decrease is at rounding level
    // relative to f, a non-increasing step is accepted as is.
    bool moved = false;
    for (int attempt = 0; attempt < 2 && !moved; ++attempt) {
      const double slope = g.dot(dir);
      const bool at_noise_floor = -slope <= 1e-13 * (1.0 + std::abs(f));
      double t = 1.0;
      while (t > 1e-14) {
        const VectorXd trial = sol.eta + t * dir;
        const double ft = dual_objective(p, trial);
        if (std::isfinite(ft) &&
            (ft <= f + 1e-4 * t * slope || (at_noise_floor && ft <= f + 1e-12 * (1.0 + std::abs(f))))) {
          sol.eta = trial;
          f = std::min(ft, f);
          moved = true;
          break;
        }
        t *= 0.5;
      }
      if (!moved) dir = -g;
    }
    sol.objective_trace.push_back(f);
    if (!moved) break;
  }

  sol.weights = scatter_weights(p, w);
  if (!sol.converged && options.throw_on_failure) {
    throw NotConvergedError("calibration dual did not converge after " + std::to_string(sol.iterations) +
                                " iterations (residual " + std::to_string(sol.constraint_residual) +
                                ", worst constraint " + std::to_string(sol.worst_constraint) +
                                "); the moment constraints may be infeasible",
                            sol.worst_constraint);
  }
  return sol;
}

namespace detail {

inline IndexList rows_where(const VectorXi& s, int value) {
  IndexList out;
  for (Index i = 0; i < s.size(); ++i) {
    if (s[i] == value) out.push_back(i);
  }
  return out;
}

// [(2z - 1) c_i, c_i] over `rows`.
inline MatrixXd signed_features(const BalanceMatrix& c, const OptionalColumn& z, const IndexList& rows) {
  const Index m = c.m();
  MatrixXd a(static_cast<Index>(rows.size()), 2 * m);
  Index treated = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Index i = rows[r];
    const double zi = z[i];
    treated += zi == 1.0 ? 1 : 0;
    a.row(static_cast<Index>(r)).head(m) = (2.0 * zi - 1.0) * c.c.row(i);
    a.row(static_cast<Index>(r)).tail(m) = c.c.row(i);
  }
  if (treated == 0 || treated == static_cast<Index>(rows.size())) {
    fail(ErrorCode::kEmptyArm, "calibration needs treated and control units in every sample");
  }
  return a;
}

inline void check_dims(const BalanceMatrix& c, const VectorXi& s, const TargetMoments& t) {
  if (s.size() != c.n()) fail(ErrorCode::kDimensionMismatch, "s length differs from balance rows");
  if (t.theta0.size() != c.m()) fail(ErrorCode::kDimensionMismatch, "theta0 length differs from m");
}

}  // namespace detail

// Inverse-odds-of-sampling weights q: study moments tilted onto theta0.
inline EntropyProblem assemble_sampling(const BalanceMatrix& c, const VectorXi& s, const TargetMoments& t) {
  detail::check_dims(c, s, t);
  EntropyProblem p;
  p.active_rows = detail::rows_where(s, 1);
  if (p.active_rows.empty()) fail(ErrorCode::kInvalidArgument, "study sample is empty");
  p.n_total = c.n();
  p.a = c.c(p.active_rows, Eigen::all);
  p.b = static_cast<double>(p.active_rows.size()) * t.theta0;
  return p;
}

// Joint balancing + sampling weights over the study sample: treated and
// control weighted moments each equal n1 * theta0 / 2.
inline EntropyProblem assemble_transport(const BalanceMatrix& c, const VectorXi& s, const OptionalColumn& z,
                                         const TargetMoments& t) {
  detail::check_dims(c, s, t);
  EntropyProblem p;
  p.active_rows = detail::rows_where(s, 1);
  if (p.active_rows.empty()) fail(ErrorCode::kInvalidArgument, "study sample is empty");
  p.n_total = c.n();
  p.a = detail::signed_features(c, z, p.active_rows);
  p.b = VectorXd::Zero(2 * c.m());
  p.b.tail(c.m()) = static_cast<double>(p.active_rows.size()) * t.theta0;
  return p;
}

// One problem per sample, indexed by s: arms balanced within the sample and
// both samples tilted onto the target moments.
inline std::array<EntropyProblem, 2> assemble_fusion(const BalanceMatrix& c, const VectorXi& s,
                                                     const OptionalColumn& z, const TargetMoments& t) {
  detail::check_dims(c, s, t);
  std::array<EntropyProblem, 2> out;
  for (int sv = 0; sv < 2; ++sv) {
    EntropyProblem& p = out[static_cast<std::size_t>(sv)];
    p.active_rows = detail::rows_where(s, sv);
    if (p.active_rows.empty()) fail(ErrorCode::kModeError, "fusion needs both samples");
    p.n_total = c.n();
    p.a = detail::signed_features(c, z, p.active_rows);
    p.b = VectorXd::Zero(2 * c.m());
    p.b.tail(c.m()) = static_cast<double>(p.active_rows.size()) * t.theta0;
  }
  return out;
}

// Single-sample ATE benchmark (entropy-balanced "improved CBPS" analogue):
// both arms of `rows` tilted onto the moments of `rows` itself.
inline EntropyProblem assemble_ate_benchmark(const BalanceMatrix& c, const OptionalColumn& z,
                                             const IndexList& rows) {
  if (z.size() != c.n()) fail(ErrorCode::kDimensionMismatch, "z length differs from balance rows");
  if (rows.empty()) fail(ErrorCode::kInvalidArgument, "benchmark sample is empty");
  EntropyProblem p;
  p.active_rows = rows;
  p.n_total = c.n();
  p.a = detail::signed_features(c, z, rows);
  const VectorXd full_mean = c.c(rows, Eigen::all).colwise().mean().transpose();
  p.b = VectorXd::Zero(2 * c.m());
  p.b.tail(c.m()) = static_cast<double>(rows.size()) * full_mean;
  return p;
}

inline EntropyProblem assemble_ate_benchmark(const BalanceMatrix& c, const OptionalColumn& z) {
  IndexList all(static_cast<std::size_t>(c.n()));
  for (Index i = 0; i < c.n(); ++i) all[static_cast<std::size_t>(i)] = i;
  return assemble_ate_benchmark(c, z, all);
}

struct IterativeOptions {
  double tol = 1e-10;  // max-norm change of successive weight vectors
  int max_outer = 20000;
  SolverOptions inner;
};

// Alternating form of the transport weights: re-solve the sampling tilt with
// the current balancing weights as base measure, then the treatment-balance
// tilt with the updated sampling weights as base, until the weights settle.
// The returned eta accumulates the tilts in the [lambda, gamma] layout of
// assemble_transport, and the residual is measured against that problem.
inline DualSolution iterative_calibration(const BalanceMatrix& c, const VectorXi& s, const OptionalColumn& z,
                                          const TargetMoments& t, const IterativeOptions& options = {}) {
  const EntropyProblem joint = assemble_transport(c, s, z, t);
  const Index m = c.m();
  const Index n1 = joint.n_active();

  EntropyProblem sampling;
  sampling.active_rows = joint.active_rows;
  sampling.n_total = joint.n_total;
  sampling.a = joint.a.rightCols(m);
  sampling.b = joint.b.tail(m);

  EntropyProblem balance;
  balance.active_rows = joint.active_rows;
  balance.n_total = joint.n_total;
  balance.a = joint.a.leftCols(m);
  balance.b = VectorXd::Zero(m);

  VectorXd p = VectorXd::Ones(n1);
  VectorXd lambda = VectorXd::Zero(m);
  VectorXd gamma = VectorXd::Zero(m);
  DualSolution out;
  for (int outer = 1; outer <= options.max_outer; ++outer) {
    sampling.base = p;
    const DualSolution step1 = solve_entropy_dual(sampling, options.inner);
    const VectorXd q = active_weights(sampling, step1.eta);

    balance.base = q;
    const DualSolution step2 = solve_entropy_dual(balance, options.inner);
    const VectorXd next = active_weights(balance, step2.eta);

    gamma += step1.eta;
    lambda += step2.eta;
    const double change = (next - p).lpNorm<Eigen::Infinity>();
    p = next;
    out.iterations = outer;
    if (change <= options.tol) {
      out.converged = true;
      break;
    }
  }
  out.eta.resize(2 * m);
  out.eta << lambda, gamma;
  out.weights = scatter_weights(joint, p);
  out.grad_norm = (joint.b - joint.a.transpose() * p).lpNorm<Eigen::Infinity>();
  out.constraint_residual = constraint_residual(joint, p, &out.worst_constraint);
  if (!out.converged && options.inner.throw_on_failure) {
    throw NotConvergedError("iterative calibration did not settle within " +
                                std::to_string(options.max_outer) + " outer iterations",
                            out.worst_constraint);
  }
  return out;
}

}  // namespace caltrans
