#pragma once

// Nuisance models: logistic (Bernoulli quasi-likelihood, fractional responses
// allowed, optional fixed offset) and weighted linear least squares.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "caltrans/core.hpp"
#include "caltrans/error.hpp"

namespace caltrans {

inline constexpr double kProbabilityClip = 1e-6;
inline constexpr double kSeparationBound = 1e3;
inline constexpr double kSeparatedEta = 18.0;  // expit(18) is within 2e-8 of 1

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double expit(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline double clip_probability(double p) {
  return std::clamp(p, kProbabilityClip, 1.0 - kProbabilityClip);
}

enum class Family { kLogistic, kLinear };

struct GlmFit {
  VectorXd coefficients;
  Family family = Family::kLinear;
  bool converged = false;
  bool separated = false;  // fitted probabilities numerically 0 or 1, or coefficients past kSeparationBound
  int iterations = 0;
  VectorXd fitted;         // predict(fit, design, offset) at fit time
  std::vector<double> deviance_trace;
};

struct GlmOptions {
  int max_iter = 100;
  double score_tol = 1e-9;
};

namespace detail {

// log(1 + exp(v)) without overflow.
inline double log1pexp(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

inline double bernoulli_deviance(const VectorXd& y, const VectorXd& eta, const VectorXd& w) {
  double dev = 0.0;
  for (Index i = 0; i < y.size(); ++i) dev -= 2.0 * w[i] * (y[i] * eta[i] - log1pexp(eta[i]));
  return dev;
}

inline VectorXd resolve_weights(const std::optional<VectorXd>& weights, Index n) {
  if (!weights) return VectorXd::Ones(n);
  if (weights->size() != n) fail(ErrorCode::kDimensionMismatch, "weight length differs from rows");
  if ((weights->array() < 0.0).any()) fail(ErrorCode::kInvalidArgument, "negative regression weight");
  return *weights;
}

}  // namespace detail

inline VectorXd linear_predictor(const GlmFit& fit, const MatrixXd& design,
                                 const std::optional<VectorXd>& offset = std::nullopt) {
  if (design.cols() != fit.coefficients.size()) {
    fail(ErrorCode::kDimensionMismatch, "design has " + std::to_string(design.cols()) +
                                            " columns, fit has " + std::to_string(fit.coefficients.size()));
  }
  VectorXd eta = design * fit.coefficients;
  if (offset) {
    if (offset->size() != design.rows()) fail(ErrorCode::kDimensionMismatch, "offset length differs");
    eta += *offset;
  }
  return eta;
}

// Mean response; logistic predictions are clipped to [1e-6, 1 - 1e-6].
inline VectorXd predict(const GlmFit& fit, const MatrixXd& design,
                        const std::optional<VectorXd>& offset = std::nullopt) {
  VectorXd eta = linear_predictor(fit, design, offset);
  if (fit.family == Family::kLinear) return eta;
  return eta.unaryExpr([](double v) { return clip_probability(expit(v)); });
}

inline GlmFit fit_logistic(const MatrixXd& design, const VectorXd& y,
                           const std::optional<VectorXd>& weights = std::nullopt,
                           const std::optional<VectorXd>& offset = std::nullopt, const GlmOptions& options = {}) {
  const Index n = design.rows();
  const Index p = design.cols();
  if (y.size() != n) fail(ErrorCode::kDimensionMismatch, "response length differs from design rows");
  if (offset && offset->size() != n) fail(ErrorCode::kDimensionMismatch, "offset length differs");
  if ((y.array() < 0.0).any() || (y.array() > 1.0).any()) {
    fail(ErrorCode::kInvalidArgument, "logistic response must lie in [0, 1]");
  }
  require_full_column_rank(design, "logistic design");
  const VectorXd w = detail::resolve_weights(weights, n);
  const VectorXd off = offset ? *offset : VectorXd::Zero(n);

  GlmFit fit;
  fit.family = Family::kLogistic;
  fit.coefficients = VectorXd::Zero(p);
  VectorXd eta = off;
  double dev = detail::bernoulli_deviance(y, eta, w);
  fit.deviance_trace.push_back(dev);

  for (int iter = 0; iter < options.max_iter; ++iter) {
    const VectorXd mu = eta.unaryExpr([](double v) { return expit(v); });
    const VectorXd score = design.transpose() * (w.array() * (y - mu).array()).matrix();
    fit.iterations = iter;
    if (score.lpNorm<Eigen::Infinity>() <= options.score_tol) {
      fit.converged = true;
      break;
    }
    const VectorXd v = (w.array() * mu.array() * (1.0 - mu.array())).matrix();
    const MatrixXd info = design.transpose() * v.asDiagonal() * design;
    Eigen::LDLT<MatrixXd> ldlt(info);
    VectorXd step = ldlt.solve(score);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) step = score;

    // Step halving keeps the deviance non-increasing.
    double t = 1.0;
    bool moved = false;
    while (t > 1e-12) {
      const VectorXd beta = fit.coefficients + t * step;
      const VectorXd eta_t = design * beta + off;
      const double dev_t = detail::bernoulli_deviance(y, eta_t, w);
      if (std::isfinite(dev_t) && dev_t <= dev + 1e-12 * (1.0 + std::abs(dev))) {
        fit.coefficients = beta;
        eta = eta_t;
        dev = std::min(dev, dev_t);
        moved = true;
        break;
      }
      t *= 0.5;
    }
    fit.deviance_trace.push_back(dev);
    if (fit.coefficients.lpNorm<Eigen::Infinity>() > kSeparationBound) {
      fit.separated = true;
      break;
    }
    if (!moved) {
      const VectorXd mu_end = eta.unaryExpr([](double e) { return expit(e); });
      const VectorXd score_end = design.transpose() * (w.array() * (y - mu_end).array()).matrix();
      fit.converged = score_end.lpNorm<Eigen::Infinity>() <= 1e-8;
      break;
    }
  }
  // Score can vanish along a separating direction before the bound is hit.
  if ((eta.array().abs() > kSeparatedEta).any()) fit.separated = true;
  fit.fitted = predict(fit, design, offset);
  return fit;
}

inline GlmFit fit_linear(const MatrixXd& design, const VectorXd& y,
                         const std::optional<VectorXd>& weights = std::nullopt) {
  const Index n = design.rows();
  if (y.size() != n) fail(ErrorCode::kDimensionMismatch, "response length differs from design rows");
  require_full_column_rank(design, "linear design");
  const VectorXd w = detail::resolve_weights(weights, n);
  const VectorXd root = w.array().sqrt().matrix();
  const MatrixXd xw = root.asDiagonal() * design;
  const VectorXd yw = root.cwiseProduct(y);

  GlmFit fit;
  fit.family = Family::kLinear;
  fit.coefficients = xw.colPivHouseholderQr().solve(yw);
  fit.converged = fit.coefficients.allFinite();
  fit.fitted = design * fit.coefficients;
  return fit;
}

}  // namespace caltrans
