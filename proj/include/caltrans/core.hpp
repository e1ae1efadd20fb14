#pragma once

// Data model shared by every estimator: the unit-level dataset, balance
// functions c_j(X) with a leading intercept, target-sample moments, and the
// balance / overlap diagnostics (standardized mean differences, Kish ESS).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "caltrans/error.hpp"

namespace caltrans {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;
using IndexList = std::vector<Index>;

// A real column whose entries may be explicitly absent (target-sample Y and
// Z under transportability). Reading an absent entry is a ModeError.
class OptionalColumn {
 public:
  OptionalColumn() = default;

  explicit OptionalColumn(VectorXd values)
      : values_(std::move(values)), present_(values_.size(), true) {}

  OptionalColumn(VectorXd values, std::vector<bool> present)
      : values_(std::move(values)), present_(std::move(present)) {
    if (static_cast<Index>(present_.size()) != values_.size()) {
      fail(ErrorCode::kDimensionMismatch, "presence mask length differs from values");
    }
    for (Index i = 0; i < values_.size(); ++i) {
      if (!present_[i]) values_[i] = 0.0;
    }
  }

  static OptionalColumn absent(Index n) {
    return OptionalColumn(VectorXd::Zero(n), std::vector<bool>(n, false));
  }

  Index size() const { return values_.size(); }
  bool has(Index i) const { return present_[static_cast<std::size_t>(i)]; }

  double operator[](Index i) const {
    if (!has(i)) {
      fail(ErrorCode::kModeError, "read of absent entry at unit " + std::to_string(i));
    }
    return values_[i];
  }

  bool all_present() const {
    for (bool p : present_) {
      if (!p) return false;
    }
    return true;
  }

  // Copy with entries where keep[i] is false marked absent.
  OptionalColumn masked(const std::vector<bool>& keep) const {
    std::vector<bool> present(present_);
    for (std::size_t i = 0; i < present.size(); ++i) present[i] = present[i] && keep[i];
    return OptionalColumn(values_, std::move(present));
  }

  // Values over `rows`; every listed entry must be present.
  VectorXd gather(const IndexList& rows) const {
    VectorXd out(static_cast<Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) out[static_cast<Index>(k)] = (*this)[rows[k]];
    return out;
  }

 private:
  VectorXd values_;
  std::vector<bool> present_;
};

enum class DataMode { kTransport, kFusion };

enum class Sample { kStudy, kTarget, kAll };

inline const char* sample_name(Sample sample) {
  switch (sample) {
    case Sample::kStudy: return "study";
    case Sample::kTarget: return "target";
    case Sample::kAll: return "all";
  }
  return "?";
}

// Per-unit sample indicator S (1 = study, 0 = target), treatment Z, outcome Y
// and covariates X. Fusion mode iff Z and Y are present for every unit.
class Dataset {
 public:
  Dataset(VectorXi s, OptionalColumn z, OptionalColumn y, MatrixXd x,
          std::vector<std::string> covariate_names = {})
      : s_(std::move(s)),
        z_(std::move(z)),
        y_(std::move(y)),
        x_(std::move(x)),
        names_(std::move(covariate_names)) {
    validate();
  }

  Index n() const { return s_.size(); }
  Index d() const { return x_.cols(); }
  const VectorXi& s() const { return s_; }
  const OptionalColumn& z() const { return z_; }
  const OptionalColumn& y() const { return y_; }
  const MatrixXd& x() const { return x_; }
  const std::vector<std::string>& covariate_names() const { return names_; }

  DataMode mode() const {
    return z_.all_present() && y_.all_present() ? DataMode::kFusion : DataMode::kTransport;
  }

  Index n_study() const { return s_.sum(); }
  Index n_target() const { return n() - n_study(); }

  IndexList units(Sample sample) const {
    IndexList out;
    for (Index i = 0; i < n(); ++i) {
      if (sample == Sample::kAll || (sample == Sample::kStudy) == (s_[i] == 1)) out.push_back(i);
    }
    return out;
  }

  // Drops target-sample Z and Y, leaving only what transportability may use.
  Dataset as_transport() const {
    std::vector<bool> keep(static_cast<std::size_t>(n()));
    for (Index i = 0; i < n(); ++i) keep[static_cast<std::size_t>(i)] = s_[i] == 1;
    return Dataset(s_, z_.masked(keep), y_.masked(keep), x_, names_);
  }

 private:
  void validate() {
    const Index n = s_.size();
    if (n < 2) fail(ErrorCode::kSchemaError, "dataset needs at least 2 units");
    if (z_.size() != n || y_.size() != n || x_.rows() != n) {
      fail(ErrorCode::kDimensionMismatch, "s, z, y and x must have the same number of units");
    }
    if (!names_.empty() && static_cast<Index>(names_.size()) != x_.cols()) {
      fail(ErrorCode::kDimensionMismatch, "covariate name count differs from x columns");
    }
    if (names_.empty()) {
      for (Index j = 0; j < x_.cols(); ++j) names_.push_back("x" + std::to_string(j + 1));
    }
    Index study = 0;
    Index study_treated = 0;
    for (Index i = 0; i < n; ++i) {
      if (s_[i] != 0 && s_[i] != 1) fail(ErrorCode::kSchemaError, "s must be binary");
      if (z_.has(i) && z_[i] != 0.0 && z_[i] != 1.0) fail(ErrorCode::kSchemaError, "z must be binary");
      if (y_.has(i) && !std::isfinite(y_[i])) fail(ErrorCode::kNonFinite, "non-finite outcome");
      if (s_[i] == 1) {
        if (!z_.has(i) || !y_.has(i)) {
          fail(ErrorCode::kModeError, "study-sample units need z and y");
        }
        ++study;
        study_treated += z_[i] == 1.0 ? 1 : 0;
      }
    }
    if (!x_.allFinite()) fail(ErrorCode::kNonFinite, "non-finite covariate");
    if (study == n) fail(ErrorCode::kModeError, "single-sample input: no target-sample units (s = 0)");
    if (study == 0) fail(ErrorCode::kModeError, "single-sample input: no study-sample units (s = 1)");
    if (study_treated == 0 || study_treated == study) {
      fail(ErrorCode::kEmptyArm, "study sample needs both treated and control units");
    }
  }

  VectorXi s_;
  OptionalColumn z_;
  OptionalColumn y_;
  MatrixXd x_;
  std::vector<std::string> names_;
};

enum class Transform { kIdentity, kSquare, kCube, kLog, kExp, kSqrt, kAbs };

struct BalanceTerm {
  Index column = 0;
  Transform transform = Transform::kIdentity;
};

inline const char* transform_name(Transform t) {
  switch (t) {
    case Transform::kIdentity: return "identity";
    case Transform::kSquare: return "square";
    case Transform::kCube: return "cube";
    case Transform::kLog: return "log";
    case Transform::kExp: return "exp";
    case Transform::kSqrt: return "sqrt";
    case Transform::kAbs: return "abs";
  }
  return "?";
}

inline std::optional<Transform> parse_transform(const std::string& name) {
  for (Transform t : {Transform::kIdentity, Transform::kSquare, Transform::kCube, Transform::kLog,
                      Transform::kExp, Transform::kSqrt, Transform::kAbs}) {
    if (name == transform_name(t)) return t;
  }
  return std::nullopt;
}

inline double apply_transform(Transform t, double v) {
  switch (t) {
    case Transform::kIdentity: return v;
    case Transform::kSquare: return v * v;
    case Transform::kCube: return v * v * v;
    case Transform::kLog: return std::log(v);
    case Transform::kExp: return std::exp(v);
    case Transform::kSqrt: return std::sqrt(v);
    case Transform::kAbs: return std::abs(v);
  }
  return v;
}

// Ordered balance functions; the intercept c_1 = 1 is always generated first
// and is not listed in `terms`.
struct BalanceSpec {
  std::vector<BalanceTerm> terms;

  static BalanceSpec identity(Index d) {
    BalanceSpec spec;
    for (Index j = 0; j < d; ++j) spec.terms.push_back({j, Transform::kIdentity});
    return spec;
  }
};

struct BalanceMatrix {
  MatrixXd c;
  std::vector<std::string> names;

  Index m() const { return c.cols(); }
  Index n() const { return c.rows(); }
};

struct TargetMoments {
  VectorXd theta0;
};

// Ratio of extreme singular values of `a` after scaling each column to unit
// RMS. Columns that are identically zero give 0.
inline double standardized_condition_ratio(const MatrixXd& a) {
  const Index n = a.rows();
  const Index k = a.cols();
  if (k == 0) return 1.0;
  if (n < k) return 0.0;
  MatrixXd scaled = a;
  for (Index j = 0; j < k; ++j) {
    const double rms = std::sqrt(scaled.col(j).squaredNorm() / static_cast<double>(n));
    if (rms == 0.0 || !std::isfinite(rms)) return 0.0;
    scaled.col(j) /= rms;
  }
  Eigen::HouseholderQR<MatrixXd> qr(scaled);
  MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  Eigen::JacobiSVD<MatrixXd> svd(r);
  const VectorXd& sv = svd.singularValues();
  if (sv[0] == 0.0) return 0.0;
  return sv[k - 1] / sv[0];
}

inline constexpr double kCollinearityTolerance = 1e-10;

inline void require_full_column_rank(const MatrixXd& a, const std::string& what) {
  if (standardized_condition_ratio(a) < kCollinearityTolerance) {
    fail(ErrorCode::kRankDeficient, what + " is not of full column rank");
  }
}

inline BalanceMatrix build_balance_matrix(const Dataset& data, const BalanceSpec& spec) {
  const Index n = data.n();
  const Index m = static_cast<Index>(spec.terms.size()) + 1;
  BalanceMatrix out;
  out.c.resize(n, m);
  out.c.col(0).setOnes();
  out.names.push_back("(intercept)");
  for (Index j = 1; j < m; ++j) {
    const BalanceTerm& term = spec.terms[static_cast<std::size_t>(j - 1)];
    if (term.column < 0 || term.column >= data.d()) {
      fail(ErrorCode::kInvalidArgument, "balance term refers to a missing covariate column");
    }
    for (Index i = 0; i < n; ++i) {
      out.c(i, j) = apply_transform(term.transform, data.x()(i, term.column));
    }
    const std::string& base = data.covariate_names()[static_cast<std::size_t>(term.column)];
    out.names.push_back(term.transform == Transform::kIdentity
                            ? base
                            : std::string(transform_name(term.transform)) + "(" + base + ")");
  }
  if (!out.c.allFinite()) {
    fail(ErrorCode::kNonFinite, "balance transformation produced NaN or Inf");
  }
  require_full_column_rank(out.c, "balance matrix");
  return out;
}

inline TargetMoments target_moments(const BalanceMatrix& bm, const VectorXi& s) {
  if (s.size() != bm.n()) fail(ErrorCode::kDimensionMismatch, "s length differs from balance rows");
  TargetMoments out;
  out.theta0 = VectorXd::Zero(bm.m());
  Index count = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (s[i] == 0) {
      out.theta0 += bm.c.row(i).transpose();
      ++count;
    }
  }
  if (count == 0) fail(ErrorCode::kEmptyTarget, "no units with s = 0");
  out.theta0 /= static_cast<double>(count);
  return out;
}

// Per-column |weighted mean(group 1) - weighted mean(group 0)| divided by the
// pooled unweighted SD sqrt((var_1 + var_0) / 2). Column 0 (intercept) is 0.
// Units with group < 0 are excluded; `weights`, when given, has one entry
// per unit.
inline VectorXd standardized_mean_differences(const BalanceMatrix& bm, const VectorXi& group,
                                              const std::optional<VectorXd>& weights = std::nullopt) {
  const Index n = bm.n();
  const Index m = bm.m();
  if (group.size() != n) fail(ErrorCode::kDimensionMismatch, "group length differs from rows");
  if (weights && weights->size() != n) {
    fail(ErrorCode::kDimensionMismatch, "weight length differs from rows");
  }
  VectorXd out = VectorXd::Zero(m);
  for (Index j = 1; j < m; ++j) {
    double wsum[2] = {0.0, 0.0};
    double wmean[2] = {0.0, 0.0};
    double sum[2] = {0.0, 0.0};
    double sumsq[2] = {0.0, 0.0};
    Index count[2] = {0, 0};
    for (Index i = 0; i < n; ++i) {
      if (group[i] != 0 && group[i] != 1) continue;
      const int g = group[i];
      const double v = bm.c(i, j);
      const double w = weights ? (*weights)[i] : 1.0;
      wsum[g] += w;
      wmean[g] += w * v;
      sum[g] += v;
      ++count[g];
    }
    if (count[0] == 0 || count[1] == 0) fail(ErrorCode::kEmptyArm, "SMD comparison group is empty");
    for (int g = 0; g < 2; ++g) {
      if (wsum[g] <= 0.0) fail(ErrorCode::kAllZero, "SMD group has zero total weight");
      wmean[g] /= wsum[g];
      sum[g] /= static_cast<double>(count[g]);
    }
    for (Index i = 0; i < n; ++i) {
      if (group[i] != 0 && group[i] != 1) continue;
      const double dev = bm.c(i, j) - sum[group[i]];
      sumsq[group[i]] += dev * dev;
    }
    double var[2];
    for (int g = 0; g < 2; ++g) {
      var[g] = count[g] > 1 ? sumsq[g] / static_cast<double>(count[g] - 1) : 0.0;
    }
    const double pooled = std::sqrt(0.5 * (var[0] + var[1]));
    const double diff = std::abs(wmean[1] - wmean[0]);
    if (pooled == 0.0) {
      if (diff > 0.0) {
        fail(ErrorCode::kZeroVariance, "pooled SD is zero for column " + bm.names[static_cast<std::size_t>(j)]);
      }
      continue;
    }
    out[j] = diff / pooled;
  }
  return out;
}

// Kish effective sample size (sum w)^2 / sum w^2.
inline double effective_sample_size(const VectorXd& weights) {
  if ((weights.array() < 0.0).any()) fail(ErrorCode::kInvalidArgument, "negative weight");
  const double total = weights.sum();
  if (!(total > 0.0)) fail(ErrorCode::kAllZero, "weights sum to zero");
  return total * total / weights.squaredNorm();
}

}  // namespace caltrans
