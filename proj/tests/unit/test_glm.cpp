#include <gtest/gtest.h>

#include "caltrans/caltrans.hpp"

using namespace caltrans;

TEST(Logistic, InterceptOnlyIsLogitOfMean) {
  VectorXd y(8);
  y << 1, 0, 0, 0, 1, 0, 0, 0;
  const GlmFit fit = fit_logistic(MatrixXd::Ones(8, 1), y);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.coefficients[0], std::log(0.25 / 0.75), 1e-10);
  EXPECT_NEAR(fit.coefficients[0], -1.0986, 1e-4);
}

TEST(Logistic, PerfectOffsetGivesZeroFluctuation) {
  SplitMix64 rng(3);
  const Index n = 50;
  VectorXd y(n), offset(n);
  MatrixXd h(n, 2);
  for (Index i = 0; i < n; ++i) {
    y[i] = 0.05 + 0.9 * rng.uniform();
    offset[i] = logit(y[i]);
    h(i, 0) = 1.0 + rng.uniform();
    h(i, 1) = rng.normal();
  }
  const GlmFit fit = fit_logistic(h, y, std::nullopt, offset);
  EXPECT_LE(fit.coefficients.lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(Logistic, RecoversPropensityCoefficients) {
  const Index n = 100000;
  SplitMix64 rng(99);
  MatrixXd design(n, 5);
  VectorXd y(n);
  const double beta[4] = {0.5, -0.5, 0.5, -0.5};
  for (Index i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    double lin = 0.0;
    for (int j = 0; j < 4; ++j) {
      design(i, j + 1) = rng.normal();
      lin += beta[j] * design(i, j + 1);
    }
    y[i] = rng.uniform() < expit(lin) ? 1.0 : 0.0;
  }
  const GlmFit fit = fit_logistic(design, y);
  ASSERT_TRUE(fit.converged);
  EXPECT_NEAR(fit.coefficients[0], 0.0, 0.02);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(fit.coefficients[j + 1], beta[j], 0.02);
}

TEST(Logistic, WeightedScoreEquationsHold) {
  SplitMix64 rng(5);
  const Index n = 400;
  MatrixXd design(n, 3);
  VectorXd y(n), w(n);
  for (Index i = 0; i < n; ++i) {
    design.row(i) << 1.0, rng.normal(), rng.normal();
    y[i] = rng.uniform() < expit(0.3 * design(i, 1) - design(i, 2)) ? 1.0 : 0.0;
    w[i] = 0.2 + 2.0 * rng.uniform();
  }
  const GlmFit fit = fit_logistic(design, y, w);
  ASSERT_TRUE(fit.converged);
  const VectorXd mu = linear_predictor(fit, design).unaryExpr([](double v) { return expit(v); });
  const VectorXd score = design.transpose() * (w.array() * (y - mu).array()).matrix();
  EXPECT_LE(score.lpNorm<Eigen::Infinity>(), 1e-8);
  EXPECT_TRUE((fit.fitted.array() > 0.0).all() && (fit.fitted.array() < 1.0).all());
}

TEST(Logistic, IntegerWeightsEqualDuplicatedRows) {
  MatrixXd design(6, 2);
  design << 1, -1.0, 1, -0.5, 1, 0.0, 1, 0.4, 1, 1.0, 1, 2.0;
  VectorXd y(6);
  y << 0, 1, 0, 1, 1, 0;
  VectorXd w(6);
  w << 1, 2, 1, 3, 1, 2;
  MatrixXd dup(10, 2);
  VectorXd ydup(10);
  Index r = 0;
  for (Index i = 0; i < 6; ++i) {
    for (int k = 0; k < static_cast<int>(w[i]); ++k, ++r) {
      dup.row(r) = design.row(i);
      ydup[r] = y[i];
    }
  }
  const GlmFit a = fit_logistic(design, y, w);
  const GlmFit b = fit_logistic(dup, ydup);
  EXPECT_LE((a.coefficients - b.coefficients).lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(Logistic, SeparationIsFlagged) {
  MatrixXd design(6, 2);
  design << 1, -3, 1, -2, 1, -1, 1, 1, 1, 2, 1, 3;
  VectorXd y(6);
  y << 0, 0, 0, 1, 1, 1;
  const GlmFit fit = fit_logistic(design, y);
  EXPECT_TRUE(fit.separated);
  EXPECT_TRUE((fit.fitted.array() >= kProbabilityClip).all());
  EXPECT_TRUE((fit.fitted.array() <= 1.0 - kProbabilityClip).all());
}

TEST(Logistic, RejectsResponseOutsideUnitInterval) {
  VectorXd y(3);
  y << 0, 1, 2;
  EXPECT_THROW(fit_logistic(MatrixXd::Ones(3, 1), y), Error);
}

TEST(Linear, ExactFitHasZeroResiduals) {
  MatrixXd design(5, 3);
  design << 1, 0.1, 2, 1, -0.4, 1, 1, 1.3, 0, 1, 2.2, -1, 1, 0.7, 0.5;
  VectorXd beta(3);
  beta << 1.5, -2.0, 0.25;
  const VectorXd y = design * beta;
  const GlmFit fit = fit_linear(design, y);
  EXPECT_LE((fit.coefficients - beta).lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LE((y - fit.fitted).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(Linear, InterceptOnlyIsMean) {
  VectorXd y(4);
  y << 1, 2, 3, 10;
  EXPECT_NEAR(fit_linear(MatrixXd::Ones(4, 1), y).coefficients[0], 4.0, 1e-14);
  VectorXd w(4);
  w << 1, 1, 1, 0;
  EXPECT_NEAR(fit_linear(MatrixXd::Ones(4, 1), y, w).coefficients[0], 2.0, 1e-14);
}

TEST(Linear, RecoversScenarioAOutcomeModel) {
  const Dataset d = generate(scenario(ScenarioId::kA), 100000, 31);
  const Index n = d.n();
  MatrixXd design(n, 10);
  VectorXd y(n);
  for (Index i = 0; i < n; ++i) {
    const double zi = d.z()[i];
    design(i, 0) = 1.0;
    design.block(i, 1, 1, 4) = d.x().row(i);
    design(i, 5) = zi;
    design.block(i, 6, 1, 4) = zi * d.x().row(i);
    y[i] = d.y()[i];
  }
  const GlmFit fit = fit_linear(design, y);
  const double truth[10] = {2, -3, -1, 1, 3, -2, -1, 3, -3, 1};
  for (int j = 0; j < 10; ++j) EXPECT_NEAR(fit.coefficients[j], truth[j], 0.05) << "coefficient " << j;
}

TEST(Predict, ZeroCoefficients) {
  GlmFit fit;
  fit.coefficients = VectorXd::Zero(2);
  MatrixXd design(3, 2);
  design << 1, 5, 1, -2, 1, 0.3;
  fit.family = Family::kLogistic;
  EXPECT_TRUE(predict(fit, design).isApprox(VectorXd::Constant(3, 0.5)));
  fit.family = Family::kLinear;
  EXPECT_TRUE(predict(fit, design).isZero());
}

TEST(Predict, ReproducesStoredFittedValues) {
  const Dataset d = generate(scenario(ScenarioId::kA), 3000, 8);
  const BalanceMatrix c = build_balance_matrix(d, BalanceSpec::identity(4));
  const GlmFit fit = fit_sampling_score(d, c);
  EXPECT_LE((predict(fit, c.c) - fit.fitted).lpNorm<Eigen::Infinity>(), 1e-12);
  MatrixXd wrong(3, 2);
  wrong.setOnes();
  EXPECT_THROW(predict(fit, wrong), Error);
}
