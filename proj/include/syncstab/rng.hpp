#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace syncstab {

// Portable uniform draws on top of mt19937_64. The standard distributions are
// implementation-defined, which would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

// Sub-seed for a named stream: splitmix64 of (seed XOR fnv1a(tag)).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept;

std::uint64_t fnv1a64(std::string_view bytes) noexcept;

}  // namespace syncstab
