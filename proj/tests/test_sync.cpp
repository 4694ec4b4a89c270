#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "syncstab/error.hpp"
#include "syncstab/sync.hpp"

using namespace syncstab;

namespace {
Vec spread_start(int N, double step, double base = 0.0) {
  Vec X(N);
  for (int i = 0; i < N; ++i) X[i] = base + step * i;
  return X;
}
const PerturbationSpec kDiagH{PerturbationKind::TrigDiagPeriodic, 0.01, 0, true};
}  // namespace

TEST_CASE("flow basics") {
  const auto free = MeanFieldModel::winfree(4, 1.0, 0.0);
  const Vec X0 = spread_start(4, 0.13);
  auto tr = flow(free, X0, 0.0, 7.5);
  CHECK((tr.final_state() - (X0.array() + 7.5).matrix()).norm() < 1e-12);

  // diagonal start reduces to the scalar ODE x' = F(x 1, x)
  const auto w = MeanFieldModel::winfree(2, 1.0, 0.05);
  auto diag = flow(w, Vec::Constant(2, 0.3), 0.0, 10.0);
  VectorField scalar = [&](double, const Vec& x, Vec& dx) { dx[0] = w.F_diag(x[0]); };
  auto ref = integrate(scalar, Vec::Constant(1, 0.3), 0.0, 10.0, {});
  CHECK(std::abs(diag.final_state()[0] - ref.final_state()[0]) < 1e-9);
  CHECK(std::abs(diag.final_state()[1] - ref.final_state()[0]) < 1e-9);

  // 1-translation equivariance
  const auto m = MeanFieldModel::winfree(5, 1.0, 0.05, kDiagH);
  const Vec Y0 = spread_start(5, 0.01);
  auto a = flow(m, Y0, 0.0, 20.0);
  auto b = flow(m, Vec(Y0.array() + 1.0), 0.0, 20.0);
  CHECK((b.final_state() - a.final_state()).array().abs().maxCoeff() - 0.0 <= 1.0 + 1e-9);
  CHECK(((b.final_state() - a.final_state()).array() - 1.0).abs().maxCoeff() < 1e-9);

  // the diagonal is invariant for identical perturbation components
  auto d = flow(m, Vec::Constant(5, 0.2), 0.0, 50.0);
  double spread = 0.0;
  for (const auto& s : d.states) spread = std::max(spread, dispersion(s));
  CHECK(spread < 1e-10);
}

TEST_CASE("dispersion monitor") {
  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  auto same = flow(w, Vec::Constant(5, 0.4), 0.0, 20.0);
  CHECK(dispersion_monitor(same, 0.1).dispersion_max == 0.0);

  const auto free = MeanFieldModel::winfree(3, 1.0, 0.0);
  auto rigid = flow(free, spread_start(3, 0.02), 0.0, 20.0);
  CHECK(std::abs(dispersion_monitor(rigid, 0.1).dispersion_max - 0.04) < 1e-12);
  CHECK(dispersion_monitor(rigid, 0.1).velocity_min == doctest::Approx(1.0));

  auto run = flow(w, spread_start(5, 0.01), 0.0, 100.0);
  auto rep = dispersion_monitor(run, 0.1);
  CHECK(rep.within_bounds);
  CHECK(rep.dispersion_max < 0.1);
  CHECK(rep.velocity_min > 0.9);
  CHECK(rep.horizon == 100.0);
}

TEST_CASE("mean phase") {
  const auto free = MeanFieldModel::winfree(3, 1.0, 0.0);
  auto tr = flow(free, spread_start(3, 0.05), 0.0, 5.0);
  auto mp = mean_phase(free, tr, 0.0);
  CHECK(std::abs(mp.mu.final_state()[0] - 5.0) < 1e-12);

  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  auto diag = flow(w, Vec::Constant(5, 0.3), 0.0, 10.0);
  auto md = mean_phase(w, diag, 0.3);
  double worst = 0.0;
  for (std::size_t k = 0; k < md.mu.size(); ++k)
    worst = std::max(worst, std::abs(md.mu.states[k][0] - diag.dense(md.mu.times[k], 0)));
  CHECK(worst < 1e-8);

  auto run = flow(w, spread_start(5, 0.01), 0.0, 100.0);
  const double mu0 = run.states.front().mean();
  auto mr = mean_phase(w, run, mu0);
  const double dmax = dispersion_monitor(run, 0.1).dispersion_max;
  for (std::size_t k = 0; k < mr.mu.size(); k += 10)
    CHECK(std::abs(mr.mu.states[k][0] - run.dense(mr.mu.times[k]).mean()) < dmax);

  // the mean phase laps once in about one rotation period
  const double tstar = event_crossing(mr.mu, [&](double, const Vec& m) { return m[0] - (mu0 + 1.0); }, +1);
  const auto rot = rotation_number(w, spread_start(5, 0.01), 300.0);
  CHECK(std::abs(tstar - 1.0 / rot.rho) < 0.05);
}

TEST_CASE("rotation number") {
  const auto free = MeanFieldModel::winfree(3, 1.0, 0.0);
  auto r0 = rotation_number(free, spread_start(3, 0.03), 100.0);
  CHECK(std::abs(r0.rho - 1.0) < 1e-12);

  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  auto r = rotation_number(w, spread_start(5, 0.01), 300.0);
  CHECK(r.rho > 0.9);
  CHECK(r.rho < 1.1);
  CHECK(r.consensus_spread < 1e-8);
  CHECK(r.richardson_diff < 1e-6);
  CHECK_THROWS_AS(rotation_number(w, spread_start(5, 0.01), 50.0), Error);
}

TEST_CASE("locked orbit") {
  const auto free = MeanFieldModel::winfree(3, 1.0, 0.0);
  auto o0 = find_locked_orbit(free, spread_start(3, 0.02));
  CHECK(std::abs(o0.period - 1.0) < 1e-12);
  CHECK(std::abs(o0.rho - 1.0) < 1e-12);
  CHECK(o0.newton_iterations <= 1);
  CHECK(o0.psi_periodicity_residual < 1e-12);

  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  auto od = find_locked_orbit(w, Vec::Constant(5, 0.1));
  CHECK(dispersion(od.X_star) < 1e-10);
  for (const auto& p : od.psi_profile) CHECK(dispersion(p) < 1e-10);

  for (const auto& m : {w, MeanFieldModel::winfree(5, 1.0, 0.05, kDiagH),
                        MeanFieldModel::winfree(5, 1.0, 0.05, {PerturbationKind::RandomTrig, 0.01, 3, true})}) {
    auto o = find_locked_orbit(m, spread_start(5, 0.01));
    CHECK(o.residual < 1e-9);
    CHECK(o.newton_iterations <= 10);
    CHECK(o.rho > 0.9);
    CHECK(o.rho < 1.1);
    CHECK(o.psi_periodicity_residual < 1e-7);
    CHECK(std::abs(o.X_star.mean() - spread_start(5, 0.01).mean()) < 1e-9);
    // a fixed point: Newton makes no further progress
    ShootingOptions again;
    again.preintegrate_periods = 0.0;
    again.period_guess = o.period;
    auto o2 = find_locked_orbit(m, o.X_star, {}, again);
    CHECK(o2.newton_iterations == 0);
    CHECK((o2.X_star - o.X_star).norm() == 0.0);
    // profile closes up and agrees with the rotation-number estimate
    CHECK((o.psi_profile.front() - o.X_star).norm() == 0.0);
    auto rot = rotation_number(m, o.X_star, 120.0);
    CHECK(std::abs(rot.rho - o.rho) < 1e-8);
  }

  std::ostringstream os;
  od.write_profile_csv(os);
  CHECK(os.str().rfind("t,psi_1,psi_2,psi_3,psi_4,psi_5\n", 0) == 0);

  const auto nonperiodic = MeanFieldModel::winfree(3, 1.0, 0.05, {PerturbationKind::RandomTrig, 0.01, 3, false});
  CHECK_THROWS_AS(find_locked_orbit(nonperiodic, spread_start(3, 0.01)), Error);
}
