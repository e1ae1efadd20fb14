#pragma once

// Simulation scenarios A-H, data generation, the Monte Carlo tau_0 oracle and
// the replicate runner with bias / RMSE / coverage summaries.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <exception>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "caltrans/core.hpp"
#include "caltrans/error.hpp"
#include "caltrans/estimators.hpp"
#include "caltrans/glm.hpp"
#include "caltrans/inference.hpp"
#include "caltrans/rng.hpp"

namespace caltrans {

enum class ScenarioId { kA, kB, kC, kD, kE, kF, kG, kH };

inline constexpr std::array<ScenarioId, 8> kAllScenarios = {ScenarioId::kA, ScenarioId::kB, ScenarioId::kC,
                                                            ScenarioId::kD, ScenarioId::kE, ScenarioId::kF,
                                                            ScenarioId::kG, ScenarioId::kH};

inline char scenario_letter(ScenarioId id) { return static_cast<char>('A' + static_cast<int>(id)); }

inline std::optional<ScenarioId> parse_scenario(const std::string& s) {
  if (s.size() != 1) return std::nullopt;
  const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  if (ch < 'A' || ch > 'H') return std::nullopt;
  return static_cast<ScenarioId>(ch - 'A');
}

// intercept + x . X + u . U
struct LinearPredictor {
  double intercept = 0.0;
  std::array<double, 4> x{};
  std::array<double, 4> u{};

  template <typename XRow, typename URow>
  double operator()(const XRow& xi, const URow& ui) const {
    double v = intercept;
    for (int j = 0; j < 4; ++j) v += x[static_cast<std::size_t>(j)] * xi[j] + u[static_cast<std::size_t>(j)] * ui[j];
    return v;
  }
};

// Logit-scale sampling and propensity predictors and outcome means per
// sample; mu_1 = mu_0 + effect in both samples.
struct ScenarioSpec {
  ScenarioId id = ScenarioId::kA;
  LinearPredictor sampling;
  LinearPredictor propensity_study;
  LinearPredictor propensity_target;
  LinearPredictor outcome0_study;
  LinearPredictor outcome0_target;
  LinearPredictor effect;
  double noise_sd = 2.0;
};

inline constexpr int kCovariateDim = 4;

inline ScenarioSpec scenario(ScenarioId id) {
  using P = LinearPredictor;
  const P rho_x{0.5, {-0.5, 0.5, -0.5, 0.5}, {}};
  const P rho_u{0.5, {}, {-0.5, 0.5, -0.5, 0.5}};
  const P pi_x{0.0, {0.5, -0.5, 0.5, -0.5}, {}};
  const P pi_u{0.0, {}, {0.5, -0.5, 0.5, -0.5}};
  const P pi_target{-0.5, {}, {}};
  const P mu0_x{2.0, {-3.0, -1.0, 1.0, 3.0}, {}};
  const P mu0_u{2.0, {}, {-3.0, -1.0, 1.0, 3.0}};
  const P mu0_target_x{0.0, {2.0, -2.0, -2.0, 2.0}, {}};
  const P mu0_target_u{0.0, {}, {2.0, -2.0, -2.0, 2.0}};
  const P eff_x{-2.0, {-1.0, 3.0, -3.0, 1.0}, {}};
  const P eff_u{-2.0, {}, {-1.0, 3.0, -3.0, 1.0}};

  ScenarioSpec s;
  s.id = id;
  switch (id) {
    case ScenarioId::kA:
      s.sampling = rho_x, s.propensity_study = s.propensity_target = pi_x;
      s.outcome0_study = s.outcome0_target = mu0_x, s.effect = eff_x;
      break;
    case ScenarioId::kB:
      s.sampling = P{2.0, {-2.0, 2.0, -2.0, 2.0}, {}};
      s.propensity_study = s.propensity_target = pi_x;
      s.outcome0_study = s.outcome0_target = mu0_u, s.effect = eff_u;
      break;
    case ScenarioId::kC:
      s.sampling = rho_x;
      s.propensity_study = s.propensity_target = P{0.0, {2.0, -2.0, 2.0, -2.0}, {}};
      s.outcome0_study = s.outcome0_target = mu0_u, s.effect = eff_u;
      break;
    case ScenarioId::kD:
      s.sampling = rho_u, s.propensity_study = s.propensity_target = pi_u;
      s.outcome0_study = mu0_x, s.outcome0_target = mu0_target_x, s.effect = eff_x;
      break;
    case ScenarioId::kE:
      s.sampling = rho_x, s.propensity_study = P{0.0, {0.5, -0.5, 2.0, -2.0}, {}};
      s.propensity_target = pi_target;
      s.outcome0_study = s.outcome0_target = mu0_u, s.effect = eff_u;
      break;
    case ScenarioId::kF:
      s.sampling = rho_x, s.propensity_study = pi_x, s.propensity_target = pi_target;
      s.outcome0_study = mu0_x, s.outcome0_target = mu0_target_x, s.effect = eff_x;
      break;
    case ScenarioId::kG:
      s.sampling = rho_u, s.propensity_study = pi_u, s.propensity_target = pi_target;
      s.outcome0_study = mu0_x, s.outcome0_target = mu0_target_x, s.effect = eff_x;
      break;
    case ScenarioId::kH:
      s.sampling = rho_x, s.propensity_study = pi_x, s.propensity_target = pi_target;
      s.outcome0_study = mu0_u, s.outcome0_target = mu0_target_u, s.effect = eff_u;
      break;
  }
  return s;
}

enum class UStandardization { kEmpirical, kAnalytic };

inline MatrixXd raw_u(const MatrixXd& x) {
  if (x.cols() != kCovariateDim) fail(ErrorCode::kDimensionMismatch, "U needs 4 covariates");
  if (!x.allFinite()) fail(ErrorCode::kNonFinite, "non-finite covariate");
  MatrixXd u(x.rows(), 4);
  for (Index i = 0; i < x.rows(); ++i) {
    const double prod = x(i, 1) * x(i, 2);
    if (prod == 0.0) fail(ErrorCode::kNonFinite, "log|X2 X3| undefined at X2 X3 = 0");
    u(i, 0) = std::exp(0.5 * (x(i, 0) + x(i, 3)));
    u(i, 1) = x(i, 1) / (1.0 + std::exp(x(i, 0)));
    u(i, 2) = std::log(std::abs(prod));
    u(i, 3) = (x(i, 2) + x(i, 3)) * (x(i, 2) + x(i, 3));
  }
  return u;
}

struct UMoments {
  std::array<double, 4> mean{};
  std::array<double, 4> sd{};
};

// Population mean and SD of the raw U columns.
inline UMoments analytic_u_moments() {
  constexpr double kEulerGamma = 0.57721566490153286061;
  // E[(1 + e^X)^-2] for X ~ N(0, 1), composite Simpson on [-12, 12].
  const int steps = 4800;
  const double lo = -12.0;
  const double h = 24.0 / steps;
  double acc = 0.0;
  for (int k = 0; k <= steps; ++k) {
    const double x = lo + h * k;
    const double f = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI) / ((1.0 + std::exp(x)) * (1.0 + std::exp(x)));
    acc += f * (k == 0 || k == steps ? 1.0 : (k % 2 == 1 ? 4.0 : 2.0));
  }
  const double u2_var = acc * h / 3.0;
  UMoments m;
  m.mean = {std::exp(0.25), 0.0, -(kEulerGamma + std::log(2.0)), 2.0};
  m.sd = {std::sqrt((std::exp(0.5) - 1.0) * std::exp(0.5)), std::sqrt(u2_var), M_PI / 2.0, std::sqrt(8.0)};
  return m;
}

inline UMoments empirical_u_moments(const MatrixXd& u) {
  UMoments m;
  const double n = static_cast<double>(u.rows());
  for (int j = 0; j < 4; ++j) {
    const double mean = u.col(j).mean();
    const double var = (u.col(j).array() - mean).square().sum() / n;
    m.mean[static_cast<std::size_t>(j)] = mean;
    m.sd[static_cast<std::size_t>(j)] = std::sqrt(var);
  }
  return m;
}

inline MatrixXd standardize_u(const MatrixXd& u, const UMoments& m) {
  MatrixXd out(u.rows(), 4);
  for (int j = 0; j < 4; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    if (!(m.sd[jj] > 0.0)) fail(ErrorCode::kZeroVariance, "U column has zero variance");
    out.col(j) = (u.col(j).array() - m.mean[jj]) / m.sd[jj];
  }
  return out;
}

// U_1..U_4 standardized to mean 0 and variance 1, either within `x` or with
// the population constants.
inline MatrixXd transform_u(const MatrixXd& x, UStandardization mode = UStandardization::kEmpirical) {
  const MatrixXd u = raw_u(x);
  return standardize_u(u, mode == UStandardization::kEmpirical ? empirical_u_moments(u) : analytic_u_moments());
}

struct SimulatedSample {
  Dataset data;
  MatrixXd u;
  VectorXd mu0;  // outcome means at each unit's own sample
  VectorXd mu1;
};

namespace detail {

struct UnitDraw {
  std::array<double, 4> x;
  double u_s;
  double u_z;
  double e0;
  double e1;
};

// Every unit has its own stream, so unit i's draws do not depend on n.
inline UnitDraw draw_unit(std::uint64_t seed, Index i) {
  SplitMix64 rng(derive_seed({seed, static_cast<std::uint64_t>(i)}));
  UnitDraw d{};
  for (double& v : d.x) v = rng.normal();
  d.u_s = rng.uniform();
  d.u_z = rng.uniform();
  d.e0 = rng.normal();
  d.e1 = rng.normal();
  return d;
}

}  // namespace detail

// Draws X ~ N(0, I_4), S ~ Bern(rho), Z ~ Bern(pi_S), Y(z) ~ N(mu_z, noise_sd^2). Both
// samples keep Z and Y; as_transport() masks the target sample.
inline SimulatedSample generate_sample(const ScenarioSpec& spec, Index n, std::uint64_t seed,
                                       UStandardization mode = UStandardization::kEmpirical) {
  if (n < 2) fail(ErrorCode::kInvalidArgument, "n must be at least 2");
  MatrixXd x(n, kCovariateDim);
  std::vector<detail::UnitDraw> draws(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    draws[static_cast<std::size_t>(i)] = detail::draw_unit(seed, i);
    for (int j = 0; j < kCovariateDim; ++j) x(i, j) = draws[static_cast<std::size_t>(i)].x[static_cast<std::size_t>(j)];
  }
  const MatrixXd u = transform_u(x, mode);
  VectorXi s(n);
  VectorXd z(n), y(n), mu0(n), mu1(n);
  Index cell[2][2] = {{0, 0}, {0, 0}};
  for (Index i = 0; i < n; ++i) {
    const auto& d = draws[static_cast<std::size_t>(i)];
    const auto xi = x.row(i);
    const auto ui = u.row(i);
    s[i] = d.u_s < expit(spec.sampling(xi, ui)) ? 1 : 0;
    const LinearPredictor& ps = s[i] == 1 ? spec.propensity_study : spec.propensity_target;
    z[i] = d.u_z < expit(ps(xi, ui)) ? 1.0 : 0.0;
    mu0[i] = (s[i] == 1 ? spec.outcome0_study : spec.outcome0_target)(xi, ui);
    mu1[i] = mu0[i] + spec.effect(xi, ui);
    y[i] = z[i] == 1.0 ? mu1[i] + spec.noise_sd * d.e1 : mu0[i] + spec.noise_sd * d.e0;
    ++cell[s[i]][z[i] == 1.0 ? 1 : 0];
  }
  for (int sv = 0; sv < 2; ++sv) {
    for (int zv = 0; zv < 2; ++zv) {
      if (cell[sv][zv] == 0) {
        fail(ErrorCode::kDegenerateDraw, std::string("empty cell s=") + std::to_string(sv) + " z=" +
                                             std::to_string(zv) + " in scenario " + scenario_letter(spec.id));
      }
    }
  }
  return SimulatedSample{Dataset(s, OptionalColumn(z), OptionalColumn(y), x), u, mu0, mu1};
}

inline Dataset generate(const ScenarioSpec& spec, Index n, std::uint64_t seed,
                        UStandardization mode = UStandardization::kEmpirical) {
  return generate_sample(spec, n, seed, mode).data;
}

enum class OracleMethod { kPlain, kRaoBlackwell };

// tau_0 = E[mu_1 - mu_0 | S = 0] by simulation over oracle_n units. The
// plain method averages over drawn S = 0 units; the default instead weights
// every unit by 1 - rho(X) and uses the known zero means of X_j, X_j^2 - 1 and
// X_j X_k as control variates, which cuts the Monte Carlo error about
// fourfold for the same draws. U is standardized with the empirical moments
// of the whole oracle sample (two streaming passes, no n x 4 storage).
inline double true_tau(const ScenarioSpec& spec, Index oracle_n, std::uint64_t seed,
                       OracleMethod method = OracleMethod::kRaoBlackwell,
                       UStandardization mode = UStandardization::kEmpirical) {
  if (oracle_n < 2) fail(ErrorCode::kInvalidArgument, "oracle sample too small");
  auto raw_row = [](const std::array<double, 4>& x, std::array<double, 4>& u) {
    const double prod = x[1] * x[2];
    if (prod == 0.0) fail(ErrorCode::kNonFinite, "log|X2 X3| undefined at X2 X3 = 0");
    u[0] = std::exp(0.5 * (x[0] + x[3]));
    u[1] = x[1] / (1.0 + std::exp(x[0]));
    u[2] = std::log(std::abs(prod));
    u[3] = (x[2] + x[3]) * (x[2] + x[3]);
  };

  UMoments mom;
  if (mode == UStandardization::kAnalytic) {
    mom = analytic_u_moments();
  } else {
    std::array<double, 4> sum{}, sumsq{};
    std::array<double, 4> u{};
    for (Index i = 0; i < oracle_n; ++i) {
      raw_row(detail::draw_unit(seed, i).x, u);
      for (std::size_t j = 0; j < 4; ++j) {
        sum[j] += u[j];
        sumsq[j] += u[j] * u[j];
      }
    }
    const double n = static_cast<double>(oracle_n);
    for (std::size_t j = 0; j < 4; ++j) {
      mom.mean[j] = sum[j] / n;
      mom.sd[j] = std::sqrt(std::max(0.0, sumsq[j] / n - mom.mean[j] * mom.mean[j]));
    }
  }

  constexpr int kControls = 14;
  Eigen::Matrix<double, kControls, 1> h_sum = Eigen::Matrix<double, kControls, 1>::Zero();
  Eigen::Matrix<double, kControls, kControls> hh = Eigen::Matrix<double, kControls, kControls>::Zero();
  Eigen::Matrix<double, kControls, 2> hv = Eigen::Matrix<double, kControls, 2>::Zero();
  double num = 0.0, den = 0.0, plain_sum = 0.0;
  Index plain_count = 0;
  Eigen::Matrix<double, kControls, 1> h;
  std::array<double, 4> u{};
  for (Index i = 0; i < oracle_n; ++i) {
    const auto d = detail::draw_unit(seed, i);
    raw_row(d.x, u);
    for (std::size_t j = 0; j < 4; ++j) u[j] = (u[j] - mom.mean[j]) / mom.sd[j];
    const double rho = expit(spec.sampling(d.x, u));
    const double effect = spec.effect(d.x, u);
    if (method == OracleMethod::kPlain) {
      if (d.u_s >= rho) {
        plain_sum += effect;
        ++plain_count;
      }
      continue;
    }
    const double w = 1.0 - rho;
    num += w * effect;
    den += w;
    int k = 0;
    for (std::size_t j = 0; j < 4; ++j) h[k++] = d.x[j];
    for (std::size_t j = 0; j < 4; ++j) h[k++] = d.x[j] * d.x[j] - 1.0;
    for (std::size_t a = 0; a < 4; ++a) {
      for (std::size_t b = a + 1; b < 4; ++b) h[k++] = d.x[a] * d.x[b];
    }
    h_sum += h;
    hh.selfadjointView<Eigen::Lower>().rankUpdate(h);
    hv.col(0) += w * effect * h;
    hv.col(1) += w * h;
  }
  const double n = static_cast<double>(oracle_n);
  if (method == OracleMethod::kPlain) {
    if (plain_count == 0) fail(ErrorCode::kDegenerateDraw, "oracle drew no target units");
    return plain_sum / static_cast<double>(plain_count);
  }
  // Regression-adjusted means of numerator and denominator.
  const Eigen::Matrix<double, kControls, 1> h_mean = h_sum / n;
  Eigen::Matrix<double, kControls, kControls> cov = hh.selfadjointView<Eigen::Lower>();
  cov = cov / n - h_mean * h_mean.transpose();
  Eigen::Matrix<double, kControls, 2> cross = hv / n;
  cross.col(0) -= h_mean * (num / n);
  cross.col(1) -= h_mean * (den / n);
  const Eigen::Matrix<double, kControls, 2> beta = cov.ldlt().solve(cross);
  const double num_adj = num / n - beta.col(0).dot(h_mean);
  const double den_adj = den / n - beta.col(1).dot(h_mean);
  return num_adj / den_adj;
}

struct ExperimentConfig {
  std::vector<ScenarioId> scenarios{kAllScenarios.begin(), kAllScenarios.end()};
  std::vector<Index> ns{500, 2000};
  int reps = 100;
  std::vector<EstimatorKind> estimators{EstimatorKind::kTmle, EstimatorKind::kAugT, EstimatorKind::kCalT,
                                        EstimatorKind::kAugF, EstimatorKind::kCalF};
  std::uint64_t seed = 20240601;
  int workers = 1;
  double level = 0.95;
  Index oracle_n = 1'000'000;
  UStandardization u_standardization = UStandardization::kEmpirical;
  double noise_sd = 2.0;  // outcome noise SD for every scenario
  int max_redraws = 10;
  bool keep_replicates = false;
  std::map<ScenarioId, double> tau0_override;  // skips the oracle for listed scenarios

  void validate() const {
    if (scenarios.empty()) fail(ErrorCode::kConfigError, "no scenarios requested");
    if (ns.empty()) fail(ErrorCode::kConfigError, "no sample sizes requested");
    for (Index n : ns) {
      if (n < 10) fail(ErrorCode::kConfigError, "sample size must be at least 10");
    }
    if (reps < 1) fail(ErrorCode::kConfigError, "reps must be positive");
    if (estimators.empty()) fail(ErrorCode::kConfigError, "no estimators requested");
    if (workers < 1) fail(ErrorCode::kConfigError, "workers must be positive");
    if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::kConfigError, "level must lie in (0, 1)");
    if (oracle_n < 1'000'000) fail(ErrorCode::kConfigError, "oracle_n must be at least 1e6");
    if (max_redraws < 0) fail(ErrorCode::kConfigError, "max_redraws must be nonnegative");
    if (!(noise_sd >= 0.0) || !std::isfinite(noise_sd)) fail(ErrorCode::kConfigError, "noise_sd must be >= 0");
  }
};

struct ReplicateResult {
  ScenarioId scenario = ScenarioId::kA;
  Index n = 0;
  EstimatorKind kind = EstimatorKind::kCalT;
  int rep = 0;
  std::uint64_t seed = 0;
  int redraws = 0;
  double tau_hat = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  bool has_ci = false;
  bool failed = false;
  std::string error;
};

struct MetricsRow {
  ScenarioId scenario = ScenarioId::kA;
  Index n = 0;
  EstimatorKind kind = EstimatorKind::kCalT;
  double tau0 = 0.0;
  double mean_estimate = 0.0;
  double bias = 0.0;
  double rmse = 0.0;
  double variance = 0.0;  // population variance of tau_hat over replicates
  double mean_se = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  int n_ok = 0;
  int n_failed = 0;
};

struct MetricsTable {
  std::vector<MetricsRow> rows;
  std::vector<ReplicateResult> replicates;  // filled when keep_replicates
  std::map<ScenarioId, double> tau0;
  std::vector<std::string> log;

  const MetricsRow* find(ScenarioId id, Index n, EstimatorKind kind) const {
    for (const auto& r : rows) {
      if (r.scenario == id && r.n == n && r.kind == kind) return &r;
    }
    return nullptr;
  }
};

// bias = mean - tau0, rmse^2 = bias^2 + variance, coverage over replicates
// with an interval. Failed replicates are counted, not averaged.
inline MetricsRow summarize(const std::vector<ReplicateResult>& reps, double tau0) {
  MetricsRow row;
  row.tau0 = tau0;
  std::vector<double> ok;
  double se_sum = 0.0;
  int covered = 0;
  int with_ci = 0;
  for (const auto& r : reps) {
    if (r.failed) {
      ++row.n_failed;
      continue;
    }
    ok.push_back(r.tau_hat);
    if (r.has_ci) {
      ++with_ci;
      se_sum += r.se;
      covered += (r.ci_low <= tau0 && tau0 <= r.ci_high) ? 1 : 0;
    }
  }
  row.n_ok = static_cast<int>(ok.size());
  if (ok.empty()) {
    row.mean_estimate = row.bias = row.rmse = row.variance = std::numeric_limits<double>::quiet_NaN();
    return row;
  }
  double sum = 0.0;
  for (double v : ok) sum += v;
  row.mean_estimate = sum / static_cast<double>(ok.size());
  double ss = 0.0;
  for (double v : ok) ss += (v - row.mean_estimate) * (v - row.mean_estimate);
  row.variance = ss / static_cast<double>(ok.size());
  row.bias = row.mean_estimate - tau0;
  row.rmse = std::sqrt(row.bias * row.bias + row.variance);
  if (with_ci > 0) {
    row.mean_se = se_sum / with_ci;
    row.coverage = static_cast<double>(covered) / with_ci;
  }
  return row;
}

inline std::uint64_t replicate_seed(std::uint64_t master, ScenarioId id, Index n, int rep) {
  return derive_seed({master, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(n),
                      static_cast<std::uint64_t>(rep)});
}

// Oracle seed per scenario, independent of the replicate seeds.
inline std::uint64_t oracle_seed(std::uint64_t master, ScenarioId id) {
  return derive_seed({master, 0x6f7261636c65ULL, static_cast<std::uint64_t>(id)});
}

// One replicate: draw (with redraws on empty cells), then every estimator on
// the transport or fusion view of the same data.
inline std::vector<ReplicateResult> run_replicate(const ExperimentConfig& cfg, ScenarioId id, Index n, int rep,
                                                  std::string* note = nullptr) {
  ScenarioSpec spec = scenario(id);
  spec.noise_sd = cfg.noise_sd;
  const std::uint64_t base_seed = replicate_seed(cfg.seed, id, n, rep);
  std::vector<ReplicateResult> out;
  for (EstimatorKind kind : cfg.estimators) {
    ReplicateResult r;
    r.scenario = id;
    r.n = n;
    r.kind = kind;
    r.rep = rep;
    r.seed = base_seed;
    out.push_back(r);
  }
  auto fail_all = [&](const std::string& why) {
    for (auto& r : out) {
      r.failed = true;
      r.error = why;
    }
  };

  std::optional<Dataset> fused;
  std::uint64_t seed = base_seed;
  int attempt = 0;
  for (;; ++attempt) {
    seed = attempt == 0 ? base_seed : derive_seed({base_seed, static_cast<std::uint64_t>(attempt)});
    try {
      fused.emplace(generate(spec, n, seed, cfg.u_standardization));
      break;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDegenerateDraw || attempt >= cfg.max_redraws) {
        fail_all(e.what());
        return out;
      }
      if (note) {
        *note += std::string("scenario ") + scenario_letter(id) + " n=" + std::to_string(n) + " rep=" +
                 std::to_string(rep) + ": redraw " + std::to_string(attempt + 1) + " (" + e.what() + ")\n";
      }
    }
  }
  const Dataset transport = fused->as_transport();
  std::optional<BalanceMatrix> c;
  try {
    c.emplace(build_balance_matrix(*fused, BalanceSpec::identity(fused->d())));
  } catch (const Error& e) {
    fail_all(e.what());
    return out;
  }
  for (auto& r : out) {
    r.seed = seed;
    r.redraws = attempt;
    const Dataset& data = requires_fusion(r.kind) ? *fused : transport;
    try {
      const TauEstimate est = estimate(r.kind, data, *c);
      r.tau_hat = est.tau_hat;
      if (const auto var = estimate_variance(est, data, *c, cfg.level)) {
        r.se = var->se;
        r.ci_low = var->ci_low;
        r.ci_high = var->ci_high;
        r.has_ci = true;
      }
    } catch (const std::exception& e) {
      r.failed = true;
      r.error = e.what();
    }
  }
  return out;
}

// Replicate seeds depend only on (seed, scenario, n, rep), and results are
// collected by replicate index, so the table is independent of `workers`.
inline MetricsTable run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  MetricsTable table;
  for (ScenarioId id : cfg.scenarios) {
    const auto it = cfg.tau0_override.find(id);
    table.tau0[id] = it != cfg.tau0_override.end()
                         ? it->second
                         : true_tau(scenario(id), cfg.oracle_n, oracle_seed(cfg.seed, id),
                                    OracleMethod::kRaoBlackwell, cfg.u_standardization);
  }

  struct Task {
    ScenarioId id;
    Index n;
    int rep;
  };
  std::vector<Task> tasks;
  for (ScenarioId id : cfg.scenarios) {
    for (Index n : cfg.ns) {
      for (int rep = 0; rep < cfg.reps; ++rep) tasks.push_back({id, n, rep});
    }
  }
  std::vector<std::vector<ReplicateResult>> results(tasks.size());
  std::vector<std::string> notes(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks.size(); t = next++) {
      results[t] = run_replicate(cfg, tasks[t].id, tasks[t].n, tasks[t].rep, &notes[t]);
    }
  };
  const int threads = std::min<int>(cfg.workers, static_cast<int>(tasks.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& note : notes) {
    if (!note.empty()) table.log.push_back(note);
  }

  std::size_t t = 0;
  for (ScenarioId id : cfg.scenarios) {
    for (Index n : cfg.ns) {
      std::vector<std::vector<ReplicateResult>> per_kind(cfg.estimators.size());
      for (int rep = 0; rep < cfg.reps; ++rep, ++t) {
        for (std::size_t k = 0; k < cfg.estimators.size(); ++k) {
          per_kind[k].push_back(results[t][k]);
          if (cfg.keep_replicates) table.replicates.push_back(results[t][k]);
        }
      }
      for (std::size_t k = 0; k < cfg.estimators.size(); ++k) {
        MetricsRow row = summarize(per_kind[k], table.tau0[id]);
        row.scenario = id;
        row.n = n;
        row.kind = cfg.estimators[k];
        table.rows.push_back(row);
      }
    }
  }
  return table;
}

}  // namespace caltrans
