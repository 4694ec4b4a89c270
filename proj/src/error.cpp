#include "syncstab/error.hpp"

#include "syncstab/rng.hpp"

namespace syncstab {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Config: return "ConfigError";
    case ErrorCode::MaxStepsExceeded: return "MaxStepsExceeded";
    case ErrorCode::StepUnderflow: return "StepUnderflow";
    case ErrorCode::NoCrossing: return "NoCrossing";
    case ErrorCode::QuadratureNotConverged: return "QuadratureNotConverged";
    case ErrorCode::DiagonalVanishing: return "DiagonalVanishing";
    case ErrorCode::NonPeriodicUnbounded: return "NonPeriodicUnbounded";
    case ErrorCode::HstabViolated: return "HstabViolated";
    case ErrorCode::BetaOutOfRange: return "BetaOutOfRange";
    case ErrorCode::HNearZero: return "HNearZero";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::PsiVanishing: return "PsiVanishing";
    case ErrorCode::CertificationFailed: return "CertificationFailed";
    case ErrorCode::NewtonDiverged: return "NewtonDiverged";
    case ErrorCode::SingularShootingJacobian: return "SingularShootingJacobian";
    case ErrorCode::KernelViolation: return "KernelViolation";
    case ErrorCode::RadiusExceeded: return "RadiusExceeded";
    case ErrorCode::OrbitMisaligned: return "OrbitMisaligned";
  }
  return "Unknown";
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept {
  std::uint64_t z = seed ^ fnv1a64(tag);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace syncstab
