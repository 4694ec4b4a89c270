#include "syncstab/sync.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/roots.hpp>

#include "syncstab/error.hpp"

namespace syncstab {

using nlohmann::json;

Trajectory flow(const MeanFieldModel& model, const Vec& X0, double t0, double t1,
                const IntegratorConfig& cfg, std::span<const double> stops) {
  if (X0.size() != model.N()) throw Error(ErrorCode::InvalidArgument, "flow: dimension mismatch");
  VectorField f = [&model](double, const Vec& X, Vec& dX) { model.field(X, dX); };
  return integrate(f, X0, t0, t1, cfg, stops);
}

double dispersion(const Vec& X) { return X.maxCoeff() - X.minCoeff(); }

json SyncRunReport::to_json() const {
  return {{"dispersion_max", dispersion_max}, {"velocity_min", velocity_min}, {"horizon", horizon},
          {"D_bound", D_bound},               {"within_bounds", within_bounds}};
}

SyncRunReport dispersion_monitor(const Trajectory& traj, double D_bound) {
  if (traj.size() == 0) throw Error(ErrorCode::InvalidArgument, "empty trajectory");
  SyncRunReport rep;
  rep.D_bound = D_bound;
  rep.horizon = traj.t_end() - traj.t_begin();
  std::size_t kd = 0, kv = 0;
  rep.dispersion_max = -1.0;
  rep.velocity_min = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double d = dispersion(traj.states[k]);
    if (d > rep.dispersion_max) {
      rep.dispersion_max = d;
      kd = k;
    }
    const double v = traj.derivs[k].minCoeff();
    if (v < rep.velocity_min) {
      rep.velocity_min = v;
      kv = k;
    }
  }
  if (traj.size() > 1) {
    auto refine = [&](std::size_t k, auto&& value) {
      const std::size_t lo = k == 0 ? 0 : k - 1;
      const std::size_t hi = std::min(k + 1, traj.size() - 1);
      auto [t, v] = boost::math::tools::brent_find_minima(value, traj.times[lo], traj.times[hi], 40);
      (void)t;
      return v;
    };
    rep.dispersion_max = std::max(
        rep.dispersion_max, -refine(kd, [&](double t) { return -dispersion(traj.dense(t)); }));
    rep.velocity_min = std::min(
        rep.velocity_min, refine(kv, [&](double t) { return traj.dense_derivative(t).minCoeff(); }));
  }
  rep.within_bounds = rep.dispersion_max < D_bound && rep.velocity_min > 0.0;
  return rep;
}

MeanPhase mean_phase(const MeanFieldModel& model, const Trajectory& traj, double mu0,
                     const IntegratorConfig& cfg) {
  Vec X(model.N());
  VectorField f = [&](double t, const Vec& mu, Vec& dmu) {
    X = traj.dense(t);
    dmu[0] = model.eval_field(X, mu[0]);
  };
  Vec m0(1);
  m0[0] = mu0;
  return {integrate(f, m0, traj.t_begin(), traj.t_end(), cfg, traj.times), mu0};
}

double crossing_time(const Trajectory& traj, int i, double level) {
  const auto above = std::find_if(traj.states.begin(), traj.states.end(),
                                  [&](const Vec& s) { return s[i] >= level; });
  if (above == traj.states.end() || above == traj.states.begin()) {
    if (above == traj.states.begin() && traj.states.front()[i] == level) return traj.t_begin();
    throw Error(ErrorCode::NoCrossing, "component never reaches the requested level");
  }
  const auto k = static_cast<std::size_t>(above - traj.states.begin());
  if (traj.states[k][i] == level) return traj.times[k];
  auto g = [&](double t) { return traj.dense(t, i) - level; };
  boost::uintmax_t iters = 200;
  boost::math::tools::eps_tolerance<double> tol(52);
  auto [a, b] = boost::math::tools::toms748_solve(g, traj.times[k - 1], traj.times[k],
                                                  traj.states[k - 1][i] - level,
                                                  traj.states[k][i] - level, tol, iters);
  return std::abs(g(a)) <= std::abs(g(b)) ? a : b;
}

RotationEstimate rotation_number(const MeanFieldModel& model, const Vec& X0, double T,
                                 const IntegratorConfig& cfg) {
  if (!(T >= 100.0)) throw Error(ErrorCode::InvalidArgument, "rotation_number needs T >= 100");
  auto traj = flow(model, X0, 0.0, T, cfg);
  for (const auto& d : traj.derivs)
    if (!(d.minCoeff() > 0.0))
      throw Error(ErrorCode::NotConverged, "oscillator velocity not positive; no rotation number");
  RotationEstimate est;
  est.horizon = T;
  auto estimate = [&](int i, double t_from, double t_to) {
    const double x0 = traj.states.front()[i];
    const double lap_lo = std::ceil(traj.dense(t_from, i) - x0);
    const double lap_hi = std::floor(traj.dense(t_to, i) - x0);
    if (lap_hi - lap_lo < 1.0)
      throw Error(ErrorCode::NotConverged, "too few laps for a rotation estimate");
    const double t1 = crossing_time(traj, i, x0 + lap_lo);
    const double t2 = crossing_time(traj, i, x0 + lap_hi);
    return (lap_hi - lap_lo) / (t2 - t1);
  };
  for (int i = 0; i < model.N(); ++i) est.per_oscillator.push_back(estimate(i, 0.5 * T, T));
  est.rho = est.per_oscillator.front();
  est.rho_early = estimate(0, 0.25 * T, 0.5 * T);
  est.richardson_diff = std::abs(est.rho - est.rho_early);
  for (double r : est.per_oscillator)
    est.consensus_spread = std::max(est.consensus_spread, std::abs(r - est.rho));
  if (est.richardson_diff > 1e-6)
    throw Error(ErrorCode::NotConverged,
                "rotation estimates differ by " + format_double(est.richardson_diff));
  return est;
}

json LockedOrbit::to_json() const {
  return {{"X_star", std::vector<double>(X_star.data(), X_star.data() + X_star.size())},
          {"rho", rho},
          {"period", period},
          {"residual", residual},
          {"newton_iterations", newton_iterations},
          {"psi_periodicity_residual", psi_periodicity_residual}};
}

void LockedOrbit::write_profile_csv(std::ostream& os) const {
  os << "t";
  for (Eigen::Index i = 0; i < X_star.size(); ++i) os << ",psi_" << (i + 1);
  os << '\n';
  for (std::size_t k = 0; k < profile_times.size(); ++k) {
    os << format_double(profile_times[k]);
    for (Eigen::Index i = 0; i < X_star.size(); ++i) os << ',' << format_double(psi_profile[k][i]);
    os << '\n';
  }
}

namespace {

struct ShootResidual {
  Vec G;
  Mat S;
  Vec f_end;
};

ShootResidual shoot(const MeanFieldModel& model, const Vec& X, double T, double m0,
                    const IntegratorConfig& cfg, bool with_jacobian) {
  const int n = model.N();
  ShootResidual r;
  r.G.resize(n + 1);
  Vec end;
  if (with_jacobian) {
    VectorField f = [&model](double, const Vec& x, Vec& dx) { model.field(x, dx); };
    JacobianField J = [&model](double, const Vec& x, Mat& j) { model.jacobian(x, j); };
    auto [tr, S] = integrate_variational(f, J, X, 0.0, T, cfg);
    end = tr.final_state();
    r.S = S.matrices.back();
    r.f_end = tr.derivs.back();
  } else {
    end = flow(model, X, 0.0, T, cfg).final_state();
  }
  r.G.head(n) = end - X;
  r.G.head(n).array() -= 1.0;
  r.G[n] = X.mean() - m0;
  return r;
}

}  // namespace

LockedOrbit find_locked_orbit(const MeanFieldModel& model, const Vec& X_guess,
                              const IntegratorConfig& cfg, const ShootingOptions& opts) {
  const int n = model.N();
  if (X_guess.size() != n) throw Error(ErrorCode::InvalidArgument, "locked orbit: dimension mismatch");
  if (!model.one_periodic())
    throw Error(ErrorCode::InvalidArgument, "locked orbit needs a 1-periodic perturbation");
  const double m0 = X_guess.mean();
  Vec f0(n);
  model.field(X_guess, f0);
  const double speed = f0.mean();
  if (!(speed > 0.0)) throw Error(ErrorCode::InvalidArgument, "mean velocity must be positive");

  // relax onto the attracting cycle, then return to the section mean(X) = m0
  Vec X = X_guess;
  if (opts.preintegrate_periods > 0.0) {
    auto pre = flow(model, X_guess, 0.0, opts.preintegrate_periods / speed, cfg);
    const double laps = std::floor(pre.final_state().mean() - m0);
    if (laps >= 1.0) {
      const double tc = event_crossing(
          pre, [&](double, const Vec& s) { return s.mean() - (m0 + laps); }, +1);
      X = pre.dense(tc);
      X.array() -= laps;
      X.array() += m0 - X.mean();
    }
  }
  // first return time to mean = m0 + 1
  double T = opts.period_guess;
  if (!(T > 0.0)) {
    auto probe = flow(model, X, 0.0, 2.5 / speed, cfg);
    T = event_crossing(probe, [&](double, const Vec& s) { return s.mean() - (m0 + 1.0); }, +1);
  }

  auto r = shoot(model, X, T, m0, cfg, true);
  double norm = r.G.norm();
  double best_norm = norm;
  int it = 0;
  for (; it < opts.max_iterations && norm >= opts.tol; ++it) {
    Mat Jac = Mat::Zero(n + 1, n + 1);
    Jac.topLeftCorner(n, n) = r.S - Mat::Identity(n, n);
    Jac.topRightCorner(n, 1) = r.f_end;
    Jac.bottomLeftCorner(1, n).setConstant(1.0 / n);
    Eigen::CompleteOrthogonalDecomposition<Mat> cod(Jac);
    const Vec step = cod.solve(-r.G);
    if (!step.allFinite() || (Jac * step + r.G).norm() > 1e-6 * std::max(1.0, norm))
      throw Error(ErrorCode::SingularShootingJacobian,
                  "shooting Jacobian is singular and the residual is not in its range");
    double lambda = 1.0;
    bool accepted = false;
    for (int h = 0; h <= opts.max_halvings; ++h, lambda *= 0.5) {
      const Vec Xn = X + lambda * step.head(n);
      const double Tn = T + lambda * step[n];
      if (!(Tn > 0.0)) continue;
      ShootResidual rn;
      try {
        rn = shoot(model, Xn, Tn, m0, cfg, true);
      } catch (const Error&) {
        continue;
      }
      const double nn = rn.G.norm();
      if (nn < norm) {
        X = Xn;
        T = Tn;
        r = std::move(rn);
        norm = nn;
        accepted = true;
        break;
      }
    }
    best_norm = std::min(best_norm, norm);
    if (!accepted) {
      if (norm < 1e-9) break;  // stalled at rounding level
      throw Error(ErrorCode::NewtonDiverged, "no damped step reduced the residual " +
                                                 format_double(norm) + " (T=" + format_double(T) + ")");
    }
  }
  if (!(norm < std::max(opts.tol, 1e-9)))
    throw Error(ErrorCode::NewtonDiverged,
                "shooting stopped at residual " + format_double(best_norm) + " after " +
                    std::to_string(it) + " iterations");

  LockedOrbit orbit;
  orbit.X_star = X;
  orbit.period = T;
  orbit.rho = 1.0 / T;
  orbit.newton_iterations = it;
  orbit.residual = shoot(model, X, T, m0, cfg, false).G.head(n).norm();
  const int m = std::max(2, opts.profile_samples);
  std::vector<double> stops;
  for (int k = 1; k < m; ++k) stops.push_back(T * k / m);
  auto tr = flow(model, X, 0.0, T, cfg, stops);
  std::size_t knot = 0;
  auto sample = [&](double t) {
    while (tr.times[knot] != t) ++knot;
    orbit.profile_times.push_back(t);
    orbit.psi_profile.push_back(tr.states[knot].array() - orbit.rho * t);
  };
  sample(0.0);
  for (double s : stops) sample(s);
  orbit.psi_periodicity_residual = psi_profile_check(model, orbit, cfg, m);
  return orbit;
}

double psi_profile_check(const MeanFieldModel& model, const LockedOrbit& orbit,
                         const IntegratorConfig& cfg, int samples) {
  const double T = orbit.period;
  std::vector<double> stops;
  for (int k = 0; k <= samples; ++k) {
    stops.push_back(T * k / samples);
    stops.push_back(T + T * k / samples);
  }
  std::sort(stops.begin(), stops.end());
  stops.erase(std::unique(stops.begin(), stops.end()), stops.end());
  auto tr = flow(model, orbit.X_star, 0.0, 2.0 * T, cfg, stops);
  auto at = [&](double t) -> const Vec& {
    auto it = std::lower_bound(tr.times.begin(), tr.times.end(), t);
    return tr.states[static_cast<std::size_t>(it - tr.times.begin())];
  };
  double worst = 0.0;
  for (int k = 0; k <= samples; ++k) {
    const double t = T * k / samples;
    // Psi(t + T) - Psi(t) = x(t + T) - x(t) - rho T
    const Vec diff = at(T + t) - at(t);
    worst = std::max(worst, (diff.array() - orbit.rho * T).abs().maxCoeff());
  }
  return worst;
}

}  // namespace syncstab
