#pragma once

// Standard errors and normal confidence intervals. Calibration estimators use
// the M-estimation sandwich over the stacked system (target moments, the
// per-sample tilts, the effect); augmented and TMLE estimators use plug-in
// influence values.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "caltrans/core.hpp"
#include "caltrans/error.hpp"
#include "caltrans/estimators.hpp"
#include "caltrans/solver.hpp"

namespace caltrans {

// Inverse standard normal CDF: Acklam's rational approximation followed by
// one Halley step against erfc, good to about 1e-15.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) fail(ErrorCode::kInvalidArgument, "normal quantile needs p in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

inline std::pair<double, double> confidence_interval(double tau_hat, double se, double level) {
  if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::kInvalidLevel, "confidence level must lie in (0, 1)");
  if (!(se >= 0.0)) fail(ErrorCode::kInvalidArgument, "standard error must be nonnegative");
  const double half = normal_quantile(0.5 * (1.0 + level)) * se;
  return {tau_hat - half, tau_hat + half};
}

enum class VarianceMethod { kSandwich, kInfluence };

inline const char* variance_method_name(VarianceMethod m) {
  return m == VarianceMethod::kSandwich ? "sandwich" : "influence";
}

struct VarianceReport {
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  VarianceMethod method = VarianceMethod::kSandwich;
  double level = 0.95;
  std::optional<MatrixXd> covariance;  // full sandwich matrix over nu
};

// Stacked estimating functions for calibration weights in the
// (gamma, delta) parameterization, with weights
//   w_i = exp(-c_i . gamma_g - Z_i c_i . delta_g)   for unit i in group g.
// Parameter layout nu = (theta0, gamma_0..gamma_{G-1}, delta_0..delta_{G-1}, tau):
//   omega_i  = 1[target_i] (c_i - theta0)
//   zeta_g   = 1[i in g] (w_i c_i - theta0)
//   xi_g     = 1[i in g] (Z_i w_i c_i - theta0 / 2)
//   phi_i    = 1[i grouped] w_i (Z_i (Y_i - tau) - (1 - Z_i) Y_i)
struct CalibrationEstimatingSystem {
  MatrixXd c;
  VectorXd z;
  VectorXd y;
  std::vector<int> group;      // group of each unit, -1 if unweighted
  std::vector<bool> target;    // units entering omega
  int groups = 1;

  Index m() const { return c.cols(); }
  Index n() const { return c.rows(); }
  Index dim() const { return m() * (1 + 2 * groups) + 1; }
  Index gamma_offset(int g) const { return m() * (1 + g); }
  Index delta_offset(int g) const { return m() * (1 + groups + g); }

  double weight(Index i, const VectorXd& nu) const {
    const int g = group[static_cast<std::size_t>(i)];
    if (g < 0) return 0.0;
    const auto ci = c.row(i).transpose();
    return std::exp(-ci.dot(nu.segment(gamma_offset(g), m())) - z[i] * ci.dot(nu.segment(delta_offset(g), m())));
  }

  VectorXd psi(Index i, const VectorXd& nu) const {
    const Index k = m();
    VectorXd out = VectorXd::Zero(dim());
    const VectorXd ci = c.row(i).transpose();
    const auto theta0 = nu.head(k);
    if (target[static_cast<std::size_t>(i)]) out.head(k) = ci - theta0;
    const int g = group[static_cast<std::size_t>(i)];
    if (g >= 0) {
      const double w = weight(i, nu);
      out.segment(gamma_offset(g), k) = w * ci - theta0;
      out.segment(delta_offset(g), k) = z[i] * w * ci - 0.5 * theta0;
      const double tau = nu[dim() - 1];
      out[dim() - 1] = w * (z[i] * (y[i] - tau) - (1.0 - z[i]) * y[i]);
    }
    return out;
  }

  // d psi_i / d nu.
  MatrixXd jacobian(Index i, const VectorXd& nu) const {
    const Index k = m();
    MatrixXd j = MatrixXd::Zero(dim(), dim());
    const VectorXd ci = c.row(i).transpose();
    if (target[static_cast<std::size_t>(i)]) j.topLeftCorner(k, k) = -MatrixXd::Identity(k, k);
    const int g = group[static_cast<std::size_t>(i)];
    if (g < 0) return j;
    const double w = weight(i, nu);
    const double zi = z[i];
    const MatrixXd cc = ci * ci.transpose();
    const Index rg = gamma_offset(g);
    const Index rd = delta_offset(g);
    j.block(rg, 0, k, k) = -MatrixXd::Identity(k, k);
    j.block(rg, rg, k, k) = -w * cc;
    j.block(rg, rd, k, k) = -zi * w * cc;
    j.block(rd, 0, k, k) = -0.5 * MatrixXd::Identity(k, k);
    j.block(rd, rg, k, k) = -zi * w * cc;
    j.block(rd, rd, k, k) = -zi * w * cc;
    const double tau = nu[dim() - 1];
    const double r = zi * (y[i] - tau) - (1.0 - zi) * y[i];
    j.block(dim() - 1, rg, 1, k) = -w * r * ci.transpose();
    j.block(dim() - 1, rd, 1, k) = -zi * w * r * ci.transpose();
    j(dim() - 1, dim() - 1) = -zi * w;
    return j;
  }

  VectorXd psi_sum(const VectorXd& nu) const {
    VectorXd out = VectorXd::Zero(dim());
    for (Index i = 0; i < n(); ++i) out += psi(i, nu);
    return out;
  }

  MatrixXd jacobian_sum(const VectorXd& nu) const {
    MatrixXd out = MatrixXd::Zero(dim(), dim());
    for (Index i = 0; i < n(); ++i) out += jacobian(i, nu);
    return out;
  }

  MatrixXd meat(const VectorXd& nu) const {
    MatrixXd out = MatrixXd::Zero(dim(), dim());
    for (Index i = 0; i < n(); ++i) {
      const VectorXd p = psi(i, nu);
      out.selfadjointView<Eigen::Lower>().rankUpdate(p);
    }
    return out.selfadjointView<Eigen::Lower>();
  }
};

// Converts a solver eta = [lambda, gamma] (features [(2z - 1) c, c]) to the
// system's (gamma, delta) = (gamma - lambda, 2 lambda). Weights are unchanged.
inline std::pair<VectorXd, VectorXd> convert_dual(const VectorXd& eta) {
  const Index m = eta.size() / 2;
  if (eta.size() != 2 * m) fail(ErrorCode::kDimensionMismatch, "dual vector must have even length");
  return {eta.tail(m) - eta.head(m), 2.0 * eta.head(m)};
}

struct FittedSystem {
  CalibrationEstimatingSystem system;
  VectorXd nu;
};

// Generic assembly: one dual solution (main parameterization) per group.
inline FittedSystem build_calibration_system(const Dataset& data, const BalanceMatrix& c,
                                             const std::vector<int>& group, const std::vector<bool>& target,
                                             const std::vector<VectorXd>& etas, double tau_hat) {
  const Index n = data.n();
  const Index m = c.m();
  FittedSystem out;
  CalibrationEstimatingSystem& sys = out.system;
  sys.c = c.c;
  sys.groups = static_cast<int>(etas.size());
  sys.group = group;
  sys.target = target;
  sys.z = VectorXd::Zero(n);
  sys.y = VectorXd::Zero(n);
  Index n_target = 0;
  VectorXd theta0 = VectorXd::Zero(m);
  for (Index i = 0; i < n; ++i) {
    if (group[static_cast<std::size_t>(i)] >= 0) {
      sys.z[i] = data.z()[i];
      sys.y[i] = data.y()[i];
    }
    if (target[static_cast<std::size_t>(i)]) {
      theta0 += c.c.row(i).transpose();
      ++n_target;
    }
  }
  if (n_target == 0) fail(ErrorCode::kEmptyTarget, "estimating system has no target units");
  theta0 /= static_cast<double>(n_target);
  out.nu = VectorXd::Zero(sys.dim());
  out.nu.head(m) = theta0;
  for (int g = 0; g < sys.groups; ++g) {
    if (etas[static_cast<std::size_t>(g)].size() != 2 * m) {
      fail(ErrorCode::kDimensionMismatch, "dual solution length differs from 2m");
    }
    const auto [gamma, delta] = convert_dual(etas[static_cast<std::size_t>(g)]);
    out.nu.segment(sys.gamma_offset(g), m) = gamma;
    out.nu.segment(sys.delta_offset(g), m) = delta;
  }
  out.nu[sys.dim() - 1] = tau_hat;
  return out;
}

inline FittedSystem transport_system(const Dataset& data, const BalanceMatrix& c, const DualSolution& sol,
                                     double tau_hat) {
  std::vector<int> group(static_cast<std::size_t>(data.n()));
  std::vector<bool> target(static_cast<std::size_t>(data.n()));
  for (Index i = 0; i < data.n(); ++i) {
    group[static_cast<std::size_t>(i)] = data.s()[i] == 1 ? 0 : -1;
    target[static_cast<std::size_t>(i)] = data.s()[i] == 0;
  }
  return build_calibration_system(data, c, group, target, {sol.eta}, tau_hat);
}

// Groups are indexed by s, so nu = (theta0, gamma_0, gamma_1, delta_0, delta_1, tau).
inline FittedSystem fusion_system(const Dataset& data, const BalanceMatrix& c, const std::vector<DualSolution>& sols,
                                  double tau_hat) {
  if (sols.size() != 2) fail(ErrorCode::kMissingComponents, "fusion variance needs one dual per sample");
  if (data.mode() != DataMode::kFusion) fail(ErrorCode::kModeError, "fusion variance needs a fusion dataset");
  std::vector<int> group(static_cast<std::size_t>(data.n()));
  std::vector<bool> target(static_cast<std::size_t>(data.n()));
  for (Index i = 0; i < data.n(); ++i) {
    group[static_cast<std::size_t>(i)] = data.s()[i];
    target[static_cast<std::size_t>(i)] = data.s()[i] == 0;
  }
  return build_calibration_system(data, c, group, target, {sols[0].eta, sols[1].eta}, tau_hat);
}

// Single-sample benchmark: one group whose own moments are the target.
inline FittedSystem benchmark_system(const Dataset& data, const BalanceMatrix& c, const IndexList& rows,
                                     const DualSolution& sol, double tau_hat) {
  std::vector<int> group(static_cast<std::size_t>(data.n()), -1);
  std::vector<bool> target(static_cast<std::size_t>(data.n()), false);
  for (Index i : rows) {
    group[static_cast<std::size_t>(i)] = 0;
    target[static_cast<std::size_t>(i)] = true;
  }
  return build_calibration_system(data, c, group, target, {sol.eta}, tau_hat);
}

// A^-1 B A^-T with A and B summed over units; the tau variance is the last
// diagonal entry.
inline VarianceReport sandwich_variance(const FittedSystem& fitted, double level = 0.95) {
  const MatrixXd a = fitted.system.jacobian_sum(fitted.nu);
  const MatrixXd b = fitted.system.meat(fitted.nu);
  Eigen::FullPivLU<MatrixXd> lu(a);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible() || !a.allFinite()) {
    fail(ErrorCode::kSingularJacobian, "estimating-equation Jacobian is singular");
  }
  const MatrixXd a_inv = lu.inverse();
  MatrixXd cov = a_inv * b * a_inv.transpose();
  cov = 0.5 * (cov + cov.transpose()).eval();
  if (!cov.allFinite()) fail(ErrorCode::kNonFinite, "sandwich covariance is not finite");
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
  const double top = eig.eigenvalues().cwiseAbs().maxCoeff();
  if (eig.eigenvalues().minCoeff() < -1e-8 * top) {
    fail(ErrorCode::kSingularJacobian, "sandwich covariance is not positive semi-definite");
  }
  VarianceReport out;
  out.method = VarianceMethod::kSandwich;
  out.level = level;
  const Index last = cov.rows() - 1;
  out.se = std::sqrt(std::max(0.0, cov(last, last)));
  const double tau = fitted.nu[last];
  std::tie(out.ci_low, out.ci_high) = confidence_interval(tau, out.se, level);
  out.covariance = std::move(cov);
  return out;
}

inline VarianceReport sandwich_variance_transport(const Dataset& data, const BalanceMatrix& c,
                                                  const DualSolution& sol, double tau_hat, double level = 0.95) {
  if (!sol.converged) fail(ErrorCode::kNotConverged, "sandwich variance needs a converged calibration");
  return sandwich_variance(transport_system(data, c, sol, tau_hat), level);
}

inline VarianceReport sandwich_variance_fusion(const Dataset& data, const BalanceMatrix& c,
                                               const std::vector<DualSolution>& sols, double tau_hat,
                                               double level = 0.95) {
  for (const auto& sol : sols) {
    if (!sol.converged) fail(ErrorCode::kNotConverged, "sandwich variance needs a converged calibration");
  }
  return sandwich_variance(fusion_system(data, c, sols, tau_hat), level);
}

// SE = sqrt(sum IF_i^2) / n_eff from the influence values kept on the estimate.
inline VarianceReport influence_variance(const TauEstimate& est, double level = 0.95) {
  switch (est.kind) {
    case EstimatorKind::kAugT:
    case EstimatorKind::kAugF:
    case EstimatorKind::kTmle:
    case EstimatorKind::kUnadj: break;
    default:
      fail(ErrorCode::kInvalidArgument,
           std::string("no influence-function variance for ") + estimator_name(est.kind));
  }
  if (!est.influence || est.influence_n <= 0) {
    fail(ErrorCode::kMissingComponents, "estimate was computed without its influence values");
  }
  VarianceReport out;
  out.method = VarianceMethod::kInfluence;
  out.level = level;
  out.se = std::sqrt(est.influence->squaredNorm()) / static_cast<double>(est.influence_n);
  std::tie(out.ci_low, out.ci_high) = confidence_interval(est.tau_hat, out.se, level);
  return out;
}

// Default variance route for each estimator; G-computation has none.
inline std::optional<VarianceReport> estimate_variance(const TauEstimate& est, const Dataset& data,
                                                       const BalanceMatrix& c, double level = 0.95,
                                                       Sample benchmark_sample = Sample::kStudy) {
  switch (est.kind) {
    case EstimatorKind::kGcomp: return std::nullopt;
    case EstimatorKind::kCalT:
      if (est.nuisance.duals.size() != 1) fail(ErrorCode::kMissingComponents, "CAL_T dual missing");
      return sandwich_variance_transport(data, c, est.nuisance.duals[0], est.tau_hat, level);
    case EstimatorKind::kCalF: return sandwich_variance_fusion(data, c, est.nuisance.duals, est.tau_hat, level);
    case EstimatorKind::kCbps:
      if (est.nuisance.duals.size() != 1) fail(ErrorCode::kMissingComponents, "CBPS dual missing");
      return sandwich_variance(
          benchmark_system(data, c, data.units(benchmark_sample), est.nuisance.duals[0], est.tau_hat), level);
    default: return influence_variance(est, level);
  }
}

}  // namespace caltrans
