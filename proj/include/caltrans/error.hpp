#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace caltrans {

enum class ErrorCode {
  kRankDeficient,
  kNonFinite,
  kEmptyTarget,
  kEmptyArm,
  kZeroVariance,
  kAllZero,
  kOutOfRange,
  kIoError,
  kNotConverged,
  kDimensionMismatch,
  kSeparation,
  kDegenerateOutcome,
  kModeError,
  kSingularJacobian,
  kMissingComponents,
  kInvalidLevel,
  kDegenerateDraw,
  kConfigError,
  kSchemaError,
  kInvalidArgument,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kRankDeficient: return "RankDeficient";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kEmptyTarget: return "EmptyTarget";
    case ErrorCode::kEmptyArm: return "EmptyArm";
    case ErrorCode::kZeroVariance: return "ZeroVariance";
    case ErrorCode::kAllZero: return "AllZero";
    case ErrorCode::kOutOfRange: return "OutOfRange";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kNotConverged: return "NotConverged";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kSeparation: return "Separation";
    case ErrorCode::kDegenerateOutcome: return "DegenerateOutcome";
    case ErrorCode::kModeError: return "ModeError";
    case ErrorCode::kSingularJacobian: return "SingularJacobian";
    case ErrorCode::kMissingComponents: return "MissingComponents";
    case ErrorCode::kInvalidLevel: return "InvalidLevel";
    case ErrorCode::kDegenerateDraw: return "DegenerateDraw";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kSchemaError: return "SchemaError";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

// All library failures are reported through this exception; `code()` lets
// callers (the simulation runner, the CLI) branch on the failure kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// NotConverged from the dual solver; carries the index of the constraint
// with the largest relative violation at exit.
class NotConvergedError : public Error {
 public:
  NotConvergedError(const std::string& what, long worst_constraint)
      : Error(ErrorCode::kNotConverged, what),
        worst_constraint_(worst_constraint) {}

  long worst_constraint() const noexcept { return worst_constraint_; }

 private:
  long worst_constraint_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace caltrans
