#pragma once

#include <stdexcept>
#include <string>

namespace syncstab {

enum class ErrorCode {
  InvalidArgument,
  Config,
  MaxStepsExceeded,
  StepUnderflow,
  NoCrossing,
  QuadratureNotConverged,
  DiagonalVanishing,
  NonPeriodicUnbounded,
  HstabViolated,
  BetaOutOfRange,
  HNearZero,
  NotConverged,
  NotFound,
  PsiVanishing,
  CertificationFailed,
  NewtonDiverged,
  SingularShootingJacobian,
  KernelViolation,
  RadiusExceeded,
  OrbitMisaligned,
};

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace syncstab
