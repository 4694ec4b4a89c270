#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "json.hpp"
#include "syncstab/model.hpp"
#include "syncstab/ode.hpp"

namespace syncstab {

Trajectory flow(const MeanFieldModel& model, const Vec& X0, double t0, double t1,
                const IntegratorConfig& cfg = {}, std::span<const double> stops = {});

struct SyncRunReport {
  double dispersion_max = 0.0;
  double velocity_min = 0.0;
  double horizon = 0.0;
  double D_bound = 0.0;
  bool within_bounds = false;

  nlohmann::json to_json() const;
};

double dispersion(const Vec& X);

// Sup of max_ij |x_i - x_j| and inf of min_i x_i' over the run; the knot
// extremes are refined on the neighbouring steps of the dense output.
SyncRunReport dispersion_monitor(const Trajectory& traj, double D_bound);

struct MeanPhase {
  Trajectory mu;  // one component
  double mu0 = 0.0;
};

// mu' = F(Phi^t(X), mu) driven by the interpolated trajectory.
MeanPhase mean_phase(const MeanFieldModel& model, const Trajectory& traj, double mu0,
                     const IntegratorConfig& cfg = {});

// First time x_i reaches `level` (x_i increasing along the run).
double crossing_time(const Trajectory& traj, int i, double level);

struct RotationEstimate {
  double rho = 0.0;        // oscillator 1, second half of the run
  double rho_early = 0.0;  // oscillator 1 over [T/4, T/2]
  double richardson_diff = 0.0;
  std::vector<double> per_oscillator;
  double consensus_spread = 0.0;  // max_i |rho_i - rho_1|
  double horizon = 0.0;
};

// rho from lap times: x_i(t_k) = x_i(0) + k, rho = (k2 - k1) / (t_k2 - t_k1).
RotationEstimate rotation_number(const MeanFieldModel& model, const Vec& X0, double T,
                                 const IntegratorConfig& cfg = {});

struct LockedOrbit {
  Vec X_star;
  double rho = 0.0;
  double period = 0.0;
  double residual = 0.0;
  int newton_iterations = 0;
  std::vector<double> profile_times;
  std::vector<Vec> psi_profile;  // Psi_i(t) = Phi^t_i(X_star) - rho t
  double psi_periodicity_residual = 0.0;

  nlohmann::json to_json() const;
  void write_profile_csv(std::ostream& os) const;  // "t,psi_1,...,psi_N"
};

struct ShootingOptions {
  double preintegrate_periods = 50.0;
  double tol = 1e-10;
  int max_iterations = 20;
  int max_halvings = 8;
  int profile_samples = 64;
  double period_guess = 0.0;  // > 0 skips the first-return estimate
};

// Newton on Phi^T(X) - X - 1 = 0 with the phase condition mean(X) = mean(X_guess).
LockedOrbit find_locked_orbit(const MeanFieldModel& model, const Vec& X_guess,
                              const IntegratorConfig& cfg = {}, const ShootingOptions& opts = {});

// max_i max_t |Psi_i(t + period) - Psi_i(t)| over one period
double psi_profile_check(const MeanFieldModel& model, const LockedOrbit& orbit,
                         const IntegratorConfig& cfg = {}, int samples = 64);

}  // namespace syncstab
