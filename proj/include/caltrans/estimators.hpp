#pragma once

// Target-population ATE estimators: crude difference, G-computation, TMLE,
// augmented (transport and fusion), full-calibration Hajek (transport and
// fusion) and the single-sample entropy-balancing benchmark.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "caltrans/core.hpp"
#include "caltrans/error.hpp"
#include "caltrans/glm.hpp"
#include "caltrans/solver.hpp"

namespace caltrans {

enum class EstimatorKind { kUnadj, kGcomp, kTmle, kAugT, kAugF, kCalT, kCalF, kCbps };

inline constexpr std::array<EstimatorKind, 8> kAllEstimators = {
    EstimatorKind::kUnadj, EstimatorKind::kGcomp, EstimatorKind::kTmle, EstimatorKind::kAugT,
    EstimatorKind::kAugF,  EstimatorKind::kCalT,  EstimatorKind::kCalF, EstimatorKind::kCbps};

inline const char* estimator_name(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::kUnadj: return "UNADJ";
    case EstimatorKind::kGcomp: return "GCOMP";
    case EstimatorKind::kTmle: return "TMLE";
    case EstimatorKind::kAugT: return "AUG_T";
    case EstimatorKind::kAugF: return "AUG_F";
    case EstimatorKind::kCalT: return "CAL_T";
    case EstimatorKind::kCalF: return "CAL_F";
    case EstimatorKind::kCbps: return "CBPS";
  }
  return "?";
}

inline std::optional<EstimatorKind> parse_estimator(const std::string& name) {
  for (EstimatorKind k : kAllEstimators) {
    if (name == estimator_name(k)) return k;
  }
  return std::nullopt;
}

inline bool requires_fusion(EstimatorKind kind) {
  return kind == EstimatorKind::kAugF || kind == EstimatorKind::kCalF;
}

struct NuisanceFits {
  std::optional<GlmFit> outcome0;     // mu_0 (linear) or mu*_0 (fractional logistic, TMLE)
  std::optional<GlmFit> outcome1;
  std::optional<GlmFit> propensity;   // pi_1 on the study sample
  std::optional<GlmFit> sampling;     // rho on all units
  std::optional<GlmFit> fluctuation;  // TMLE epsilon on [h0, h1]
  std::vector<DualSolution> duals;    // one per calibration problem (fusion: indexed by s)
};

struct EstimateDiagnostics {
  double ess = 0.0;
  double max_weight = 0.0;
  VectorXd smd_after;  // per balance column, worst of the treatment and sample contrasts
};

struct TauEstimate {
  double tau_hat = 0.0;
  EstimatorKind kind = EstimatorKind::kUnadj;
  std::optional<VectorXd> weights_used;  // one entry per unit
  NuisanceFits nuisance;
  std::optional<EstimateDiagnostics> diagnostics;
  // Per-unit influence values (zero outside the estimating sample) and the
  // count they are averaged over; SE = sqrt(sum IF^2) / influence_n.
  std::optional<VectorXd> influence;
  Index influence_n = 0;
};

namespace detail {

inline IndexList select_rows(const Dataset& data, const IndexList& rows, int arm) {
  IndexList out;
  for (Index i : rows) {
    if (data.z()[i] == static_cast<double>(arm)) out.push_back(i);
  }
  return out;
}

inline void require_arms(const Dataset& data, const IndexList& rows, const std::string& what) {
  if (select_rows(data, rows, 1).empty() || select_rows(data, rows, 0).empty()) {
    fail(ErrorCode::kEmptyArm, what + ": both treatment arms must be nonempty");
  }
}

inline void require_fusion(const Dataset& data, const std::string& what) {
  if (data.mode() != DataMode::kFusion) {
    fail(ErrorCode::kModeError, what + " needs Z and Y in both samples (fusion mode)");
  }
}

inline MatrixXd rows_of(const BalanceMatrix& c, const IndexList& rows) { return c.c(rows, Eigen::all); }

// Difference of weighted arm means over `rows`. Scaling all weights leaves it
// unchanged.
inline double hajek_contrast(const Dataset& data, const VectorXd& w, const IndexList& rows) {
  double sw[2] = {0.0, 0.0};
  double swy[2] = {0.0, 0.0};
  for (Index i : rows) {
    const int arm = data.z()[i] == 1.0 ? 1 : 0;
    sw[arm] += w[i];
    swy[arm] += w[i] * data.y()[i];
  }
  if (!(sw[0] > 0.0) || !(sw[1] > 0.0)) fail(ErrorCode::kAllZero, "an arm has zero total weight");
  return swy[1] / sw[1] - swy[0] / sw[0];
}

// Group 1/0 from z over `rows`, -1 elsewhere.
inline VectorXi arm_groups(const Dataset& data, const IndexList& rows) {
  VectorXi g = VectorXi::Constant(data.n(), -1);
  for (Index i : rows) g[i] = data.z()[i] == 1.0 ? 1 : 0;
  return g;
}

inline EstimateDiagnostics weight_diagnostics(const VectorXd& w, const IndexList& rows,
                                              const VectorXd& smd) {
  VectorXd active(static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) active[static_cast<Index>(k)] = w[rows[k]];
  EstimateDiagnostics d;
  d.ess = effective_sample_size(active);
  d.max_weight = active.maxCoeff();
  d.smd_after = smd;
  return d;
}

inline void check_finite(const TauEstimate& est) {
  if (!std::isfinite(est.tau_hat)) {
    fail(ErrorCode::kNonFinite, std::string(estimator_name(est.kind)) + " produced a non-finite estimate");
  }
}

}  // namespace detail

// Logistic sampling score rho(X) = Pr(S = 1 | X) on all units.
inline GlmFit fit_sampling_score(const Dataset& data, const BalanceMatrix& c) {
  return fit_logistic(c.c, data.s().cast<double>());
}

// Logistic propensity score Pr(Z = 1 | X) within one sample.
inline GlmFit fit_propensity_score(const Dataset& data, const BalanceMatrix& c, Sample sample) {
  const IndexList rows = data.units(sample);
  detail::require_arms(data, rows, "propensity model");
  return fit_logistic(detail::rows_of(c, rows), data.z().gather(rows));
}

inline TauEstimate tau_unadjusted(const Dataset& data, Sample sample) {
  const IndexList rows = data.units(sample);
  detail::require_arms(data, rows, "unadjusted contrast");
  const VectorXd ones = VectorXd::Ones(data.n());
  TauEstimate est;
  est.kind = EstimatorKind::kUnadj;
  est.tau_hat = detail::hajek_contrast(data, ones, rows);

  // Arm means and counts for the Welch-type influence values.
  double mean[2] = {0.0, 0.0};
  double count[2] = {0.0, 0.0};
  for (Index i : rows) {
    const int arm = data.z()[i] == 1.0 ? 1 : 0;
    mean[arm] += data.y()[i];
    count[arm] += 1.0;
  }
  mean[0] /= count[0];
  mean[1] /= count[1];
  const double n_sel = static_cast<double>(rows.size());
  VectorXd inf = VectorXd::Zero(data.n());
  for (Index i : rows) {
    const int arm = data.z()[i] == 1.0 ? 1 : 0;
    const double sign = arm == 1 ? 1.0 : -1.0;
    inf[i] = sign * n_sel / count[arm] * (data.y()[i] - mean[arm]);
  }
  est.influence = inf;
  est.influence_n = static_cast<Index>(rows.size());
  detail::check_finite(est);
  return est;
}

inline TauEstimate tau_gcomp(const Dataset& data, const BalanceMatrix& c) {
  const IndexList study = data.units(Sample::kStudy);
  const IndexList target = data.units(Sample::kTarget);
  const IndexList r1 = detail::select_rows(data, study, 1);
  const IndexList r0 = detail::select_rows(data, study, 0);
  if (r1.empty() || r0.empty()) fail(ErrorCode::kEmptyArm, "G-computation needs both study arms");
  TauEstimate est;
  est.kind = EstimatorKind::kGcomp;
  est.nuisance.outcome1 = fit_linear(detail::rows_of(c, r1), data.y().gather(r1));
  est.nuisance.outcome0 = fit_linear(detail::rows_of(c, r0), data.y().gather(r0));
  const MatrixXd ct = detail::rows_of(c, target);
  est.tau_hat = (predict(*est.nuisance.outcome1, ct) - predict(*est.nuisance.outcome0, ct)).mean();
  detail::check_finite(est);
  return est;
}

// Targeted maximum likelihood on the [0, 1]-scaled outcome: fractional-logistic
// initial fits, a two-covariate fluctuation with the initial fit as offset,
// and the updated predictions averaged over the target sample.
inline TauEstimate tau_tmle(const Dataset& data, const BalanceMatrix& c) {
  const IndexList study = data.units(Sample::kStudy);
  const IndexList target = data.units(Sample::kTarget);
  const IndexList r1 = detail::select_rows(data, study, 1);
  const IndexList r0 = detail::select_rows(data, study, 0);
  if (r1.empty() || r0.empty()) fail(ErrorCode::kEmptyArm, "TMLE needs both study arms");

  const VectorXd y_study = data.y().gather(study);
  const double y_lo = y_study.minCoeff();
  const double y_hi = y_study.maxCoeff();
  if (!(y_hi > y_lo)) fail(ErrorCode::kDegenerateOutcome, "study outcomes are constant");
  const double range = y_hi - y_lo;
  auto scaled = [&](const IndexList& rows) {
    return ((data.y().gather(rows).array() - y_lo) / range).matrix().eval();
  };

  TauEstimate est;
  est.kind = EstimatorKind::kTmle;
  NuisanceFits& nf = est.nuisance;
  nf.outcome1 = fit_logistic(detail::rows_of(c, r1), scaled(r1));
  nf.outcome0 = fit_logistic(detail::rows_of(c, r0), scaled(r0));
  nf.sampling = fit_sampling_score(data, c);
  nf.propensity = fit_propensity_score(data, c, Sample::kStudy);

  const VectorXd mu1 = predict(*nf.outcome1, c.c);
  const VectorXd mu0 = predict(*nf.outcome0, c.c);
  const VectorXd rho = predict(*nf.sampling, c.c);
  const VectorXd pi = predict(*nf.propensity, c.c);

  // Clever covariates: odds of target membership over the arm probability.
  auto h0 = [&](Index i) { return (1.0 - rho[i]) / (rho[i] * (1.0 - pi[i])); };
  auto h1 = [&](Index i) { return (1.0 - rho[i]) / (rho[i] * pi[i]); };

  const Index n1 = static_cast<Index>(study.size());
  MatrixXd h(n1, 2);
  VectorXd offset(n1);
  for (Index k = 0; k < n1; ++k) {
    const Index i = study[static_cast<std::size_t>(k)];
    const double zi = data.z()[i];
    h(k, 0) = (1.0 - zi) * h0(i);
    h(k, 1) = zi * h1(i);
    offset[k] = zi * logit(mu1[i]) + (1.0 - zi) * logit(mu0[i]);
  }
  nf.fluctuation = fit_logistic(h, scaled(study), std::nullopt, offset);
  const double eps0 = nf.fluctuation->coefficients[0];
  const double eps1 = nf.fluctuation->coefficients[1];

  VectorXd eta1(data.n());
  VectorXd eta0(data.n());
  for (Index i = 0; i < data.n(); ++i) {
    eta1[i] = y_lo + range * expit(logit(mu1[i]) + eps1 * h1(i));
    eta0[i] = y_lo + range * expit(logit(mu0[i]) + eps0 * h0(i));
  }
  double total = 0.0;
  for (Index i : target) total += eta1[i] - eta0[i];
  est.tau_hat = total / static_cast<double>(target.size());

  const double n = static_cast<double>(data.n());
  const double n0 = static_cast<double>(target.size());
  VectorXd inf(data.n());
  for (Index i = 0; i < data.n(); ++i) {
    if (data.s()[i] == 1) {
      const double zi = data.z()[i];
      const double yi = data.y()[i];
      const double odds = (1.0 - rho[i]) / rho[i];
      inf[i] = (n / n0) * odds * (zi / pi[i] * (yi - eta1[i]) - (1.0 - zi) / (1.0 - pi[i]) * (yi - eta0[i]));
    } else {
      inf[i] = (n / n0) * (eta1[i] - eta0[i] - est.tau_hat);
    }
  }
  est.influence = inf;
  est.influence_n = data.n();
  detail::check_finite(est);
  return est;
}

namespace detail {

// Shared body of the augmented estimators; the outcome models are fit on
// `outcome_sample` and de-biased with q-weighted study residuals.
inline TauEstimate augmented(const Dataset& data, const BalanceMatrix& c, const TargetMoments& theta0,
                             Sample outcome_sample, EstimatorKind kind) {
  const IndexList study = data.units(Sample::kStudy);
  const IndexList target = data.units(Sample::kTarget);
  const IndexList fit_rows = data.units(outcome_sample);
  const IndexList r1 = select_rows(data, fit_rows, 1);
  const IndexList r0 = select_rows(data, fit_rows, 0);
  if (r1.empty() || r0.empty()) fail(ErrorCode::kEmptyArm, "augmented estimator needs both arms");

  TauEstimate est;
  est.kind = kind;
  NuisanceFits& nf = est.nuisance;
  const DualSolution q_sol = solve_entropy_dual(assemble_sampling(c, data.s(), theta0));
  const VectorXd& q = q_sol.weights;
  nf.duals.push_back(q_sol);
  nf.propensity = fit_propensity_score(data, c, Sample::kStudy);
  nf.outcome1 = fit_linear(rows_of(c, r1), data.y().gather(r1));
  nf.outcome0 = fit_linear(rows_of(c, r0), data.y().gather(r0));

  const VectorXd pi = predict(*nf.propensity, c.c);
  const VectorXd mu1 = predict(*nf.outcome1, c.c);
  const VectorXd mu0 = predict(*nf.outcome0, c.c);

  VectorXd resid = VectorXd::Zero(data.n());
  double resid_sum = 0.0;
  for (Index i : study) {
    const double zi = data.z()[i];
    const double yi = data.y()[i];
    resid[i] = q[i] * (zi * (yi - mu1[i]) / pi[i] - (1.0 - zi) * (yi - mu0[i]) / (1.0 - pi[i]));
    resid_sum += resid[i];
  }
  double contrast_sum = 0.0;
  for (Index i : target) contrast_sum += mu1[i] - mu0[i];
  const double n1 = static_cast<double>(study.size());
  const double n0 = static_cast<double>(target.size());
  est.tau_hat = resid_sum / n1 + contrast_sum / n0;

  const double n = static_cast<double>(data.n());
  VectorXd inf(data.n());
  for (Index i = 0; i < data.n(); ++i) {
    inf[i] = data.s()[i] == 1 ? (n / n1) * resid[i] : (n / n0) * (mu1[i] - mu0[i] - est.tau_hat);
  }
  est.influence = inf;
  est.influence_n = data.n();

  est.weights_used = q;
  VectorXi sample_group = VectorXi::Constant(data.n(), 0);
  for (Index i : study) sample_group[i] = 1;
  VectorXd w_sample = q;
  for (Index i : target) w_sample[i] = 1.0;
  est.diagnostics = weight_diagnostics(q, study, standardized_mean_differences(c, sample_group, w_sample));
  check_finite(est);
  return est;
}

}  // namespace detail

inline TauEstimate tau_aug_transport(const Dataset& data, const BalanceMatrix& c, const TargetMoments& theta0) {
  return detail::augmented(data, c, theta0, Sample::kStudy, EstimatorKind::kAugT);
}

inline TauEstimate tau_aug_fusion(const Dataset& data, const BalanceMatrix& c, const TargetMoments& theta0) {
  detail::require_fusion(data, "AUG_F");
  return detail::augmented(data, c, theta0, Sample::kTarget, EstimatorKind::kAugF);
}

inline TauEstimate tau_cal_transport(const Dataset& data, const BalanceMatrix& c, const TargetMoments& theta0,
                                     const SolverOptions& options = {}) {
  const IndexList study = data.units(Sample::kStudy);
  detail::require_arms(data, study, "CAL_T");
  TauEstimate est;
  est.kind = EstimatorKind::kCalT;
  const DualSolution sol = solve_entropy_dual(assemble_transport(c, data.s(), data.z(), theta0), options);
  est.nuisance.duals.push_back(sol);
  est.weights_used = sol.weights;
  est.tau_hat = detail::hajek_contrast(data, sol.weights, study);

  // Balance achieved: treatment arms within the study sample, and the
  // weighted study sample against the unweighted target sample.
  VectorXi sample_group = VectorXi::Zero(data.n());
  for (Index i : study) sample_group[i] = 1;
  VectorXd w_sample = sol.weights;
  for (Index i = 0; i < data.n(); ++i) {
    if (data.s()[i] == 0) w_sample[i] = 1.0;
  }
  const VectorXd smd = standardized_mean_differences(c, detail::arm_groups(data, study), sol.weights)
                           .cwiseMax(standardized_mean_differences(c, sample_group, w_sample));
  est.diagnostics = detail::weight_diagnostics(sol.weights, study, smd);
  detail::check_finite(est);
  return est;
}

inline TauEstimate tau_cal_fusion(const Dataset& data, const BalanceMatrix& c, const TargetMoments& theta0,
                                  const SolverOptions& options = {}) {
  detail::require_fusion(data, "CAL_F");
  const IndexList all = data.units(Sample::kAll);
  TauEstimate est;
  est.kind = EstimatorKind::kCalF;
  const auto problems = assemble_fusion(c, data.s(), data.z(), theta0);
  VectorXd w = VectorXd::Zero(data.n());
  for (const EntropyProblem& p : problems) {
    const DualSolution sol = solve_entropy_dual(p, options);
    w += sol.weights;
    est.nuisance.duals.push_back(sol);
  }
  est.weights_used = w;
  est.tau_hat = detail::hajek_contrast(data, w, all);

  VectorXd smd = VectorXd::Zero(c.m());
  for (int sv = 0; sv < 2; ++sv) {
    const IndexList rows = data.units(sv == 1 ? Sample::kStudy : Sample::kTarget);
    smd = smd.cwiseMax(standardized_mean_differences(c, detail::arm_groups(data, rows), w));
  }
  smd = smd.cwiseMax(standardized_mean_differences(c, data.s(), w));
  est.diagnostics = detail::weight_diagnostics(w, all, smd);
  detail::check_finite(est);
  return est;
}

inline TauEstimate tau_cbps_benchmark(const Dataset& data, const BalanceMatrix& c, Sample sample,
                                      const SolverOptions& options = {}) {
  const IndexList rows = data.units(sample);
  detail::require_arms(data, rows, "CBPS benchmark");
  TauEstimate est;
  est.kind = EstimatorKind::kCbps;
  const DualSolution sol = solve_entropy_dual(assemble_ate_benchmark(c, data.z(), rows), options);
  est.nuisance.duals.push_back(sol);
  est.weights_used = sol.weights;
  est.tau_hat = detail::hajek_contrast(data, sol.weights, rows);
  est.diagnostics = detail::weight_diagnostics(
      sol.weights, rows, standardized_mean_differences(c, detail::arm_groups(data, rows), sol.weights));
  detail::check_finite(est);
  return est;
}

// Runs one estimator with the conventional arguments: target moments from
// the s = 0 rows, unadjusted and CBPS contrasts on the study sample.
inline TauEstimate estimate(EstimatorKind kind, const Dataset& data, const BalanceMatrix& c,
                            Sample benchmark_sample = Sample::kStudy) {
  const TargetMoments theta0 = target_moments(c, data.s());
  switch (kind) {
    case EstimatorKind::kUnadj: return tau_unadjusted(data, benchmark_sample);
    case EstimatorKind::kGcomp: return tau_gcomp(data, c);
    case EstimatorKind::kTmle: return tau_tmle(data, c);
    case EstimatorKind::kAugT: return tau_aug_transport(data, c, theta0);
    case EstimatorKind::kAugF: return tau_aug_fusion(data, c, theta0);
    case EstimatorKind::kCalT: return tau_cal_transport(data, c, theta0);
    case EstimatorKind::kCalF: return tau_cal_fusion(data, c, theta0);
    case EstimatorKind::kCbps: return tau_cbps_benchmark(data, c, benchmark_sample);
  }
  fail(ErrorCode::kInvalidArgument, "unknown estimator");
}

}  // namespace caltrans
