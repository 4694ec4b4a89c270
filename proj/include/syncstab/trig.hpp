#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "json.hpp"

namespace syncstab {

// Finite Fourier series of period 1:
//   f(x) = c0 + sum_k [ a_k cos(2 pi k x) + b_k sin(2 pi k x) ].
class TrigSeries {
 public:
  struct Harmonic {
    int k = 1;
    double cos_amp = 0.0;
    double sin_amp = 0.0;
  };

  TrigSeries() = default;
  explicit TrigSeries(double constant) : c0_(constant) {}

  TrigSeries& add_cos(int k, double amp);
  TrigSeries& add_sin(int k, double amp);

  double constant() const noexcept { return c0_; }
  const std::vector<Harmonic>& harmonics() const noexcept { return harmonics_; }

  double operator()(double x) const noexcept { return derivative(x, 0); }
  // order 0..3
  double derivative(double x, int order) const noexcept;
  // Antiderivative with primitive(0) = 0 for the oscillating part.
  double primitive(double x) const noexcept;
  // Upper bound sum |amplitudes|, exact sup for single-harmonic series.
  double abs_bound() const noexcept;
  bool is_zero() const noexcept;

  // {"fourier": [["const", c], ["cos", k, amp], ["sin", k, amp]]}
  static TrigSeries from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

 private:
  double c0_ = 0.0;
  std::vector<Harmonic> harmonics_;
};

// Immutable 1-periodic scalar function with a primitive. Trig series carry an
// exact primitive; arbitrary callables get a tabulated one (Gauss-Kronrod per
// cell, cubic Hermite between nodes), so integral(s,t) is a difference of one
// function and the cocycle relations hold to rounding.
class PeriodicFunction {
 public:
  PeriodicFunction();  // zero function
  PeriodicFunction(TrigSeries series);  // NOLINT: implicit by design of configs
  static PeriodicFunction from_callable(std::function<double(double)> f, int nodes = 2048);
  static PeriodicFunction constant(double c) { return PeriodicFunction(TrigSeries(c)); }

  double operator()(double t) const;
  double integral(double s, double t) const { return primitive(t) - primitive(s); }
  // integral over one period
  double period_integral() const;
  const TrigSeries* series() const noexcept;

 private:
  struct Impl;
  explicit PeriodicFunction(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}
  double primitive(double t) const;

  std::shared_ptr<const Impl> impl_;
};

}  // namespace syncstab
