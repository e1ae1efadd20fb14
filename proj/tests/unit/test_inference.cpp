#include <gtest/gtest.h>

#include "caltrans/caltrans.hpp"
#include "support/oracles.hpp"

using namespace caltrans;
using caltrans::testing::central_difference_jacobian;
using caltrans::testing::max_relative_error;
using caltrans::testing::random_instance;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no exception";
  return ErrorCode::kInvalidArgument;
}

// Welch variance with n-denominators, written out directly.
double welch_se(const Dataset& d, const IndexList& rows) {
  double sum[2] = {0, 0}, sq[2] = {0, 0}, cnt[2] = {0, 0};
  for (Index i : rows) {
    const int a = d.z()[i] == 1.0 ? 1 : 0;
    sum[a] += d.y()[i];
    sq[a] += d.y()[i] * d.y()[i];
    cnt[a] += 1;
  }
  double v = 0.0;
  for (int a = 0; a < 2; ++a) {
    const double mean = sum[a] / cnt[a];
    v += (sq[a] / cnt[a] - mean * mean) / cnt[a];
  }
  return std::sqrt(v);
}

}  // namespace

TEST(Interval, NormalQuantileAndSymmetricInterval) {
  EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-12);
  EXPECT_NEAR(normal_quantile(0.5), 0.0, 1e-15);
  EXPECT_NEAR(normal_quantile(0.001), -3.090232306167813, 1e-11);
  const auto [lo, hi] = confidence_interval(0.0, 1.0, 0.95);
  EXPECT_NEAR(lo, -1.95996, 1e-5);
  EXPECT_NEAR(hi, 1.95996, 1e-5);
  const auto [a, b] = confidence_interval(-2.5, 0.0, 0.9);
  EXPECT_EQ(a, -2.5);
  EXPECT_EQ(b, -2.5);
}

TEST(Interval, InvalidLevels) {
  for (double level : {0.0, 1.0, -0.2, 1.5}) {
    EXPECT_EQ(code_of([&] { confidence_interval(0.0, 1.0, level); }), ErrorCode::kInvalidLevel);
  }
}

TEST(EstimatingSystem, ConvertedParametersReproduceWeights) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto inst = random_instance(seed, 300, 3);
    const Dataset t = inst.data.as_transport();
    const TauEstimate cal = tau_cal_transport(t, inst.c, inst.theta0);
    const FittedSystem fs = transport_system(t, inst.c, cal.nuisance.duals[0], cal.tau_hat);
    for (Index i = 0; i < t.n(); ++i) {
      EXPECT_NEAR(fs.system.weight(i, fs.nu), (*cal.weights_used)[i], 1e-10 * (1.0 + (*cal.weights_used)[i]));
    }
    const TauEstimate fused = tau_cal_fusion(inst.data, inst.c, inst.theta0);
    const FittedSystem ff = fusion_system(inst.data, inst.c, fused.nuisance.duals, fused.tau_hat);
    for (Index i = 0; i < t.n(); ++i) {
      EXPECT_NEAR(ff.system.weight(i, ff.nu), (*fused.weights_used)[i], 1e-10 * (1.0 + (*fused.weights_used)[i]));
    }
  }
}

TEST(EstimatingSystem, EquationsVanishAtFittedParameters) {
  const auto inst = random_instance(77, 800, 4);
  const Dataset t = inst.data.as_transport();
  const TauEstimate cal_t = tau_cal_transport(t, inst.c, inst.theta0);
  const FittedSystem ft = transport_system(t, inst.c, cal_t.nuisance.duals[0], cal_t.tau_hat);
  EXPECT_LE(ft.system.psi_sum(ft.nu).lpNorm<Eigen::Infinity>(), 1e-6);

  const TauEstimate cal_f = tau_cal_fusion(inst.data, inst.c, inst.theta0);
  const FittedSystem ff = fusion_system(inst.data, inst.c, cal_f.nuisance.duals, cal_f.tau_hat);
  EXPECT_LE(ff.system.psi_sum(ff.nu).lpNorm<Eigen::Infinity>(), 1e-6);

  const TauEstimate cbps = tau_cbps_benchmark(inst.data, inst.c, Sample::kAll);
  const FittedSystem fb = benchmark_system(inst.data, inst.c, inst.data.units(Sample::kAll), cbps.nuisance.duals[0],
                                           cbps.tau_hat);
  EXPECT_LE(fb.system.psi_sum(fb.nu).lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(EstimatingSystem, JacobianMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto inst = random_instance(seed + 50, 200, 2);
    const TauEstimate cal_f = tau_cal_fusion(inst.data, inst.c, inst.theta0);
    const FittedSystem ff = fusion_system(inst.data, inst.c, cal_f.nuisance.duals, cal_f.tau_hat);
    SplitMix64 rng(seed);
    VectorXd nu = ff.nu;
    for (Index k = 0; k < nu.size(); ++k) nu[k] += 0.05 * rng.normal();
    const auto g = [&](const VectorXd& v) { return ff.system.psi_sum(v); };
    EXPECT_LE(max_relative_error(ff.system.jacobian_sum(nu), central_difference_jacobian(g, nu)), 1e-5);
  }
}

TEST(EstimatingSystem, TargetMomentBlockIsMinusTargetCount) {
  const auto inst = random_instance(5, 400, 3);
  const Dataset t = inst.data.as_transport();
  const TauEstimate cal = tau_cal_transport(t, inst.c, inst.theta0);
  const FittedSystem fs = transport_system(t, inst.c, cal.nuisance.duals[0], cal.tau_hat);
  const Index m = inst.c.m();
  const MatrixXd a = fs.system.jacobian_sum(fs.nu);
  EXPECT_TRUE(a.topLeftCorner(m, m).isApprox(-static_cast<double>(t.n_target()) * MatrixXd::Identity(m, m)));
  EXPECT_TRUE(a.block(0, m, m, a.cols() - m).isZero());
}

TEST(Sandwich, InterceptOnlyBenchmarkEqualsWelchVariance) {
  const auto inst = random_instance(14, 500, 2);
  const Dataset& d = inst.data;
  const BalanceMatrix c1 = build_balance_matrix(d, BalanceSpec{});
  const IndexList rows = d.units(Sample::kStudy);
  const TauEstimate est = tau_cbps_benchmark(d, c1, Sample::kStudy);
  EXPECT_NEAR(est.tau_hat, tau_unadjusted(d, Sample::kStudy).tau_hat, 1e-10);
  const VarianceReport var = sandwich_variance(benchmark_system(d, c1, rows, est.nuisance.duals[0], est.tau_hat));
  const double oracle = welch_se(d, rows);
  EXPECT_NEAR(var.se, oracle, 1e-8 * oracle);
  EXPECT_NEAR(influence_variance(tau_unadjusted(d, Sample::kStudy)).se, oracle, 1e-10 * oracle);
}

TEST(Sandwich, CovarianceIsPsdAndIntervalBracketsEstimate) {
  const Dataset fused = generate(scenario(ScenarioId::kA), 2000, 3);
  const Dataset t = fused.as_transport();
  const BalanceMatrix c = build_balance_matrix(fused, BalanceSpec::identity(4));
  for (const auto& [data, kind] : {std::pair{&t, EstimatorKind::kCalT}, std::pair{&fused, EstimatorKind::kCalF}}) {
    const TauEstimate est = estimate(kind, *data, c);
    const auto var = estimate_variance(est, *data, c, 0.95);
    ASSERT_TRUE(var && var->covariance);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(*var->covariance);
    EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-8 * eig.eigenvalues().cwiseAbs().maxCoeff());
    EXPECT_LE(var->ci_low, est.tau_hat);
    EXPECT_GE(var->ci_high, est.tau_hat);
    EXPECT_GT(var->se, 0.05);
    EXPECT_LT(var->se, 1.0);
  }
}

TEST(Sandwich, NeedsConvergedAndCompleteDuals) {
  const auto inst = random_instance(6, 300, 2);
  const TauEstimate cal_f = tau_cal_fusion(inst.data, inst.c, inst.theta0);
  std::vector<DualSolution> one{cal_f.nuisance.duals[0]};
  EXPECT_EQ(code_of([&] { fusion_system(inst.data, inst.c, one, cal_f.tau_hat); }), ErrorCode::kMissingComponents);
  EXPECT_EQ(code_of([&] { fusion_system(inst.data.as_transport(), inst.c, cal_f.nuisance.duals, cal_f.tau_hat); }),
            ErrorCode::kModeError);
  DualSolution stale = cal_f.nuisance.duals[0];
  stale.converged = false;
  EXPECT_EQ(code_of([&] { sandwich_variance_transport(inst.data, inst.c, stale, 0.0); }), ErrorCode::kNotConverged);
}

TEST(Influence, ZeroResidualConstantEffectGivesZeroSe) {
  const SimulatedSample sim = generate_sample(scenario(ScenarioId::kA), 1500, 9);
  const Dataset& raw = sim.data;
  VectorXd y(raw.n());
  for (Index i = 0; i < raw.n(); ++i) y[i] = sim.mu0[i] + (raw.z()[i] == 1.0 ? 1.5 : 0.0);
  const Dataset fused(raw.s(), raw.z(), OptionalColumn(y), raw.x());
  const BalanceMatrix c = build_balance_matrix(fused, BalanceSpec::identity(4));
  const TargetMoments t = target_moments(c, fused.s());
  const TauEstimate aug_t = tau_aug_transport(fused.as_transport(), c, t);
  const TauEstimate aug_f = tau_aug_fusion(fused, c, t);
  EXPECT_NEAR(aug_t.tau_hat, 1.5, 1e-9);
  EXPECT_LE(influence_variance(aug_t).se, 1e-9);
  EXPECT_LE(influence_variance(aug_f).se, 1e-9);
}

TEST(Influence, KindAndComponentChecks) {
  const auto inst = random_instance(7, 300, 2);
  TauEstimate cal = tau_cal_transport(inst.data, inst.c, inst.theta0);
  EXPECT_EQ(code_of([&] { influence_variance(cal); }), ErrorCode::kInvalidArgument);
  TauEstimate aug = tau_aug_transport(inst.data, inst.c, inst.theta0);
  aug.influence.reset();
  EXPECT_EQ(code_of([&] { influence_variance(aug); }), ErrorCode::kMissingComponents);
  EXPECT_FALSE(estimate_variance(tau_gcomp(inst.data, inst.c), inst.data, inst.c).has_value());
  const auto tmle = estimate_variance(tau_tmle(inst.data, inst.c), inst.data, inst.c);
  ASSERT_TRUE(tmle);
  EXPECT_EQ(tmle->method, VarianceMethod::kInfluence);
}
