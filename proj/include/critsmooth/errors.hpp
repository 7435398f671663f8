#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace critsmooth {

enum class ErrorKind {
  ZeroImage,
  NotStrictlyPositive,
  NoConvergence,
  BadResolution,
  ValidationFailure,
  DegenerateSpectrum,
  CalibrationOutOfRange,
  SingularPoisson,
  CapExceeded,
  NonTermination,
  BadTransform,
  RejectionStall,
  EnumerationTooLarge,
  MinorizationFailure,
  ModeUnsupported,
  DepthInsufficient,
  ConfigError,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ZeroImage: return "ZeroImage";
    case ErrorKind::NotStrictlyPositive: return "NotStrictlyPositive";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::BadResolution: return "BadResolution";
    case ErrorKind::ValidationFailure: return "ValidationFailure";
    case ErrorKind::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorKind::CalibrationOutOfRange: return "CalibrationOutOfRange";
    case ErrorKind::SingularPoisson: return "SingularPoisson";
    case ErrorKind::CapExceeded: return "CapExceeded";
    case ErrorKind::NonTermination: return "NonTermination";
    case ErrorKind::BadTransform: return "BadTransform";
    case ErrorKind::RejectionStall: return "RejectionStall";
    case ErrorKind::EnumerationTooLarge: return "EnumerationTooLarge";
    case ErrorKind::MinorizationFailure: return "MinorizationFailure";
    case ErrorKind::ModeUnsupported: return "ModeUnsupported";
    case ErrorKind::DepthInsufficient: return "DepthInsufficient";
    case ErrorKind::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind; the
/// CLI maps kinds onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised by `grow`, population streaming and stopping lines; remembers where.
class CapExceeded : public Error {
 public:
  CapExceeded(int generation, double size, double cap)
      : Error(ErrorKind::CapExceeded,
              "generation " + std::to_string(generation) + " would hold " +
                  std::to_string(static_cast<long long>(size)) + " nodes (cap " +
                  std::to_string(static_cast<long long>(cap)) + ")"),
        generation_(generation) {}

  int generation() const noexcept { return generation_; }

 private:
  int generation_;
};

}  // namespace critsmooth
