#include <gtest/gtest.h>

#include <random>

#include "caltrans/caltrans.hpp"

using namespace caltrans;

namespace {

Dataset tiny(const MatrixXd& x, VectorXi s) {
  const Index n = x.rows();
  VectorXd z(n), y(n);
  for (Index i = 0; i < n; ++i) {
    z[i] = i % 2;
    y[i] = static_cast<double>(i);
  }
  return Dataset(std::move(s), OptionalColumn(z), OptionalColumn(y), x);
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no exception";
  return ErrorCode::kInvalidArgument;
}

}  // namespace

TEST(Dataset, ModeFollowsPresenceOfTargetOutcomes) {
  MatrixXd x(4, 1);
  x << 0.1, 0.2, 0.3, 0.4;
  VectorXi s(4);
  s << 1, 1, 0, 0;
  const Dataset fused = tiny(x, s);
  EXPECT_EQ(fused.mode(), DataMode::kFusion);
  const Dataset t = fused.as_transport();
  EXPECT_EQ(t.mode(), DataMode::kTransport);
  EXPECT_FALSE(t.y().has(2));
  EXPECT_EQ(code_of([&] { (void)t.y()[2]; }), ErrorCode::kModeError);
  EXPECT_EQ(t.n_study(), 2);
  EXPECT_EQ(t.n_target(), 2);
}

TEST(Dataset, SingleSampleInputIsModeError) {
  MatrixXd x(4, 1);
  x << 0.1, 0.2, 0.3, 0.4;
  VectorXi all_study = VectorXi::Ones(4);
  VectorXi all_target = VectorXi::Zero(4);
  EXPECT_EQ(code_of([&] { tiny(x, all_study); }), ErrorCode::kModeError);
  EXPECT_EQ(code_of([&] { tiny(x, all_target); }), ErrorCode::kModeError);
}

TEST(Dataset, StudyUnitsNeedOutcomesAndBothArms) {
  MatrixXd x(4, 1);
  x << 0.1, 0.2, 0.3, 0.4;
  VectorXi s(4);
  s << 1, 1, 0, 0;
  VectorXd z(4);
  z << 1, 1, 0, 1;
  VectorXd y = VectorXd::Ones(4);
  EXPECT_EQ(code_of([&] { Dataset(s, OptionalColumn(z), OptionalColumn(y), x); }), ErrorCode::kEmptyArm);
  z << 1, 0, 0, 1;
  EXPECT_EQ(code_of([&] { Dataset(s, OptionalColumn(z), OptionalColumn::absent(4), x); }), ErrorCode::kModeError);
  z << 1, 0, 2, 1;
  EXPECT_EQ(code_of([&] { Dataset(s, OptionalColumn(z), OptionalColumn(y), x); }), ErrorCode::kSchemaError);
}

TEST(BalanceMatrix, InterceptPrependedToIdentity) {
  // A valid dataset needs both study arms, so x = [2, 3] is repeated.
  MatrixXd x4(4, 1);
  x4 << 2, 3, 2, 3;
  VectorXi s4(4);
  s4 << 1, 1, 0, 0;
  const Dataset d = tiny(x4, s4);
  const BalanceMatrix c = build_balance_matrix(d, BalanceSpec::identity(1));
  ASSERT_EQ(c.m(), 2);
  EXPECT_DOUBLE_EQ(c.c(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(c.c(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(c.c(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(c.c(1, 1), 3.0);
  EXPECT_EQ(c.names[0], "(intercept)");
  EXPECT_EQ(c.names[1], "x1");
}

TEST(BalanceMatrix, DuplicatedColumnIsRankDeficient) {
  MatrixXd x(6, 2);
  x << 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 7, 7;
  VectorXi s(6);
  s << 1, 1, 1, 0, 0, 0;
  const Dataset d = tiny(x, s);
  EXPECT_EQ(code_of([&] { build_balance_matrix(d, BalanceSpec::identity(2)); }), ErrorCode::kRankDeficient);
}

TEST(BalanceMatrix, ConstantCovariateCollidesWithIntercept) {
  MatrixXd x(6, 1);
  x.setConstant(3.0);
  VectorXi s(6);
  s << 1, 1, 1, 0, 0, 0;
  const Dataset d = tiny(x, s);
  EXPECT_EQ(code_of([&] { build_balance_matrix(d, BalanceSpec::identity(1)); }), ErrorCode::kRankDeficient);
}

TEST(BalanceMatrix, TransformsAndNonFinite) {
  MatrixXd x(6, 1);
  x << 1, 2, 3, 4, 5, 6;
  VectorXi s(6);
  s << 1, 1, 1, 0, 0, 0;
  const Dataset d = tiny(x, s);
  BalanceSpec spec;
  spec.terms = {{0, Transform::kIdentity}, {0, Transform::kSquare}, {0, Transform::kLog}};
  const BalanceMatrix c = build_balance_matrix(d, spec);
  EXPECT_DOUBLE_EQ(c.c(3, 2), 16.0);
  EXPECT_NEAR(c.c(4, 3), std::log(5.0), 1e-15);
  EXPECT_EQ(c.names[2], "square(x1)");

  MatrixXd xneg = x;
  xneg(0, 0) = -1.0;
  const Dataset dn = tiny(xneg, s);
  BalanceSpec logspec;
  logspec.terms = {{0, Transform::kLog}};
  EXPECT_EQ(code_of([&] { build_balance_matrix(dn, logspec); }), ErrorCode::kNonFinite);
}

TEST(BalanceMatrix, ScenarioDesignHasFiveColumns) {
  const Dataset d = generate(scenario(ScenarioId::kA), 300, 11);
  const BalanceMatrix c = build_balance_matrix(d, BalanceSpec::identity(4));
  EXPECT_EQ(c.m(), 5);
  EXPECT_TRUE((c.c.col(0).array() == 1.0).all());
  EXPECT_TRUE(c.c.rightCols(4).isApprox(d.x()));
}

TEST(TargetMoments, PlainMeanOfTargetRows) {
  BalanceMatrix c;
  c.c.resize(2, 2);
  c.c << 1, 2, 1, 4;
  c.names = {"(intercept)", "x1"};
  VectorXi s(2);
  s << 0, 0;
  TargetMoments t = target_moments(c, s);
  EXPECT_DOUBLE_EQ(t.theta0[0], 1.0);
  EXPECT_DOUBLE_EQ(t.theta0[1], 3.0);
  s << 0, 1;
  t = target_moments(c, s);
  EXPECT_DOUBLE_EQ(t.theta0[1], 2.0);
  s << 1, 1;
  EXPECT_EQ(code_of([&] { target_moments(c, s); }), ErrorCode::kEmptyTarget);
}

TEST(TargetMoments, ScenarioAMatchesDirectSimulation) {
  // Oracle: E[X_j | S = 0] from an independent std::mt19937_64 simulation
  // of the row-A sampling model.
  std::mt19937_64 gen(987654321);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  const long oracle_n = 2'000'000;
  std::array<double, 4> sum{};
  long count = 0;
  for (long i = 0; i < oracle_n; ++i) {
    double x[4];
    for (double& v : x) v = normal(gen);
    const double lin = 0.5 - 0.5 * x[0] + 0.5 * x[1] - 0.5 * x[2] + 0.5 * x[3];
    if (unif(gen) >= 1.0 / (1.0 + std::exp(-lin))) {
      for (int j = 0; j < 4; ++j) sum[static_cast<std::size_t>(j)] += x[j];
      ++count;
    }
  }
  const Dataset d = generate(scenario(ScenarioId::kA), 1'000'000, 4242);
  const TargetMoments t = target_moments(build_balance_matrix(d, BalanceSpec::identity(4)), d.s());
  EXPECT_DOUBLE_EQ(t.theta0[0], 1.0);
  for (int j = 0; j < 4; ++j) {
    const double oracle = sum[static_cast<std::size_t>(j)] / static_cast<double>(count);
    EXPECT_NEAR(t.theta0[j + 1], oracle, 0.01) << "covariate " << j + 1;
  }
}

TEST(Smd, IdenticalGroupsGiveZero) {
  BalanceMatrix c;
  c.c.resize(6, 2);
  c.c << 1, 0.5, 1, 1.5, 1, 3.0, 1, 0.5, 1, 1.5, 1, 3.0;
  c.names = {"(intercept)", "x1"};
  VectorXi g(6);
  g << 0, 0, 0, 1, 1, 1;
  const VectorXd smd = standardized_mean_differences(c, g);
  EXPECT_DOUBLE_EQ(smd[0], 0.0);
  EXPECT_DOUBLE_EQ(smd[1], 0.0);
}

TEST(Smd, UnitShiftWithUnitPooledSd) {
  BalanceMatrix c;
  c.c.resize(6, 2);
  c.c << 1, -1, 1, 0, 1, 1, 1, 0, 1, 1, 1, 2;
  c.names = {"(intercept)", "x1"};
  VectorXi g(6);
  g << 0, 0, 0, 1, 1, 1;
  EXPECT_NEAR(standardized_mean_differences(c, g)[1], 1.0, 1e-15);
  // Weighted means move the numerator only; the pooled SD stays unweighted.
  VectorXd w(6);
  w << 1, 1, 1, 3, 1, 0;  // treated weighted mean 0.25
  EXPECT_NEAR(standardized_mean_differences(c, g, w)[1], 0.25, 1e-15);
  VectorXi gm(6);
  gm << 0, 0, 0, -1, -1, 1;
  // group 1 is the single unit at 2 (variance 0), group 0 has variance 1
  EXPECT_NEAR(standardized_mean_differences(c, gm)[1], 2.0 / std::sqrt(0.5), 1e-14);
}

TEST(Smd, ZeroPooledSdWithDifferenceIsAnError) {
  BalanceMatrix c;
  c.c.resize(4, 2);
  c.c << 1, 0, 1, 0, 1, 1, 1, 1;
  c.names = {"(intercept)", "x1"};
  VectorXi g(4);
  g << 0, 0, 1, 1;
  EXPECT_EQ(code_of([&] { standardized_mean_differences(c, g); }), ErrorCode::kZeroVariance);
}

TEST(Ess, DirectFormula) {
  EXPECT_DOUBLE_EQ(effective_sample_size(VectorXd::Constant(7, 0.3)), 7.0);
  VectorXd one(4);
  one << 1, 0, 0, 0;
  EXPECT_DOUBLE_EQ(effective_sample_size(one), 1.0);
  VectorXd w(3);
  w << 2, 1, 1;
  EXPECT_NEAR(effective_sample_size(w), 16.0 / 6.0, 1e-15);
  EXPECT_EQ(code_of([] { effective_sample_size(VectorXd::Zero(3)); }), ErrorCode::kAllZero);
  w << 1, -1, 1;
  EXPECT_EQ(code_of([&] { effective_sample_size(w); }), ErrorCode::kInvalidArgument);
}
