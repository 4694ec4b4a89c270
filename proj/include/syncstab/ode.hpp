#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "syncstab/types.hpp"

namespace syncstab {

// Right-hand sides write into a pre-sized output vector.
using VectorField = std::function<void(double t, const Vec& y, Vec& dydt)>;
using JacobianField = std::function<void(double t, const Vec& y, Mat& jac)>;

enum class Method { Rk4Fixed, Rk45Adaptive };

struct IntegratorConfig {
  Method method = Method::Rk45Adaptive;
  double step = 1e-2;      // fixed step (rk4)
  double abs_tol = 1e-10;  // adaptive
  double rel_tol = 1e-10;
  double max_step = 0.1;   // adaptive step cap, keeps Hermite output accurate
  long max_steps = 5'000'000;

  void validate() const;
  static IntegratorConfig fixed(double step);
  static IntegratorConfig adaptive(double tol);
};

// Knots of an integration plus the field at every knot; between knots the
// state is the cubic Hermite interpolant, which reproduces knots exactly.
// Adaptive runs also keep the Dormand-Prince quartic term per step, added as
// theta^2 (1-theta)^2 * corrections[k], which makes the interpolant as
// accurate as the steps themselves.
class Trajectory {
 public:
  std::vector<double> times;
  std::vector<Vec> states;
  std::vector<Vec> derivs;
  std::vector<Vec> corrections;  // empty, or one per step

  std::size_t size() const noexcept { return times.size(); }
  int dim() const noexcept { return states.empty() ? 0 : static_cast<int>(states.front().size()); }
  double t_begin() const { return times.front(); }
  double t_end() const { return times.back(); }
  const Vec& final_state() const { return states.back(); }

  // Index k with times[k] <= t <= times[k+1]; throws outside the span.
  std::size_t segment(double t) const;
  Vec dense(double t) const;
  double dense(double t, int component) const;
  Vec dense_derivative(double t) const;

  // header "t,<prefix>1,...,<prefix>N"
  void write_csv(std::ostream& os, std::string_view prefix = "x") const;
};

struct MatrixTrajectory {
  std::vector<double> times;
  std::vector<Mat> matrices;

  // one row per time: t followed by the matrix entries in row-major order
  void write_csv(std::ostream& os) const;
};

// Integrates y' = f(t,y) on [t0, t1]. Steps never straddle an entry of
// `stops`, so every stop inside the span is a knot of the result.
Trajectory integrate(const VectorField& field, const Vec& y0, double t0, double t1,
                     const IntegratorConfig& cfg, std::span<const double> stops = {});

// Flow together with the fundamental matrix S(t;t0) of the variational
// equation S' = J(t, y(t)) S, S(t0;t0) = I.
std::pair<Trajectory, MatrixTrajectory> integrate_variational(const VectorField& field,
                                                              const JacobianField& jacobian,
                                                              const Vec& y0, double t0, double t1,
                                                              const IntegratorConfig& cfg);

using EventFunction = std::function<double(double t, const Vec& y)>;

// First root of g along the dense output with the requested sign change
// (+1 rising, -1 falling, 0 either).
double event_crossing(const Trajectory& traj, const EventFunction& g, int direction);

// Composite Simpson rule with n (even) subintervals.
double simpson(const std::function<double(double)>& f, double a, double b, int n);

// Least-squares line through (x, y); returns slope, intercept and r^2.
struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
LinearFit fit_line(std::span<const double> x, std::span<const double> y);

// Locale-independent shortest round-trip formatting with 17 significant digits.
std::string format_double(double v);

}  // namespace syncstab
