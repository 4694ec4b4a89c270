#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "syncstab/error.hpp"
#include "syncstab/ode.hpp"
#include "syncstab/rng.hpp"

using namespace syncstab;

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}
}  // namespace

TEST_CASE("trivial fields") {
  for (auto cfg : {IntegratorConfig{}, IntegratorConfig::fixed(0.01)}) {
    auto zero = [](double, const Vec&, Vec& d) { d.setZero(); };
    auto tr = integrate(zero, vec({3.5, -1.0}), 0.0, 2.0, cfg);
    CHECK(tr.final_state()[0] == 3.5);
    CHECK(tr.final_state()[1] == -1.0);

    auto decay = [](double, const Vec& y, Vec& d) { d = -y; };
    auto e = integrate(decay, vec({1.0}), 0.0, 1.0, cfg);
    CHECK(std::abs(e.final_state()[0] - std::exp(-1.0)) < 1e-9);

    auto periodic = [](double t, const Vec&, Vec& d) { d[0] = kTwoPi * std::cos(kTwoPi * t); };
    auto p = integrate(periodic, vec({0.0}), 0.0, 1.0, cfg);
    CHECK(std::abs(p.final_state()[0]) < 1e-9);
  }
}

TEST_CASE("rk4 is fourth order") {
  auto decay = [](double, const Vec& y, Vec& d) { d = -y; };
  const double exact = std::exp(-2.0);
  const double e1 =
      std::abs(integrate(decay, vec({1.0}), 0.0, 2.0, IntegratorConfig::fixed(0.2)).final_state()[0] - exact);
  const double e2 =
      std::abs(integrate(decay, vec({1.0}), 0.0, 2.0, IntegratorConfig::fixed(0.1)).final_state()[0] - exact);
  CHECK(e1 / e2 >= 14.0);
}

TEST_CASE("dense output reproduces knots and is continuous") {
  auto osc = [](double, const Vec& y, Vec& d) {
    d[0] = y[1];
    d[1] = -y[0];
  };
  auto tr = integrate(osc, vec({1.0, 0.0}), 0.0, 5.0, IntegratorConfig{});
  for (std::size_t k = 0; k < tr.size(); ++k) CHECK((tr.dense(tr.times[k]) - tr.states[k]).norm() == 0.0);
  for (std::size_t k = 1; k + 1 < tr.size(); k += 7) {
    const double t = tr.times[k];
    const double left = std::nextafter(t, -1e9);
    const double right = std::nextafter(t, 1e9);
    CHECK((tr.dense(left) - tr.dense(right)).norm() < 1e-12);
  }
  // interpolation accuracy between knots
  double worst = 0.0;
  for (int k = 0; k <= 400; ++k) {
    const double t = 5.0 * k / 400;
    worst = std::max(worst, std::abs(tr.dense(t, 0) - std::cos(t)));
  }
  CHECK(worst < 1e-7);
  CHECK_THROWS_AS(tr.dense(5.5), Error);
}

TEST_CASE("stops become knots") {
  auto decay = [](double, const Vec& y, Vec& d) { d = -y; };
  std::vector<double> stops{0.3, 1.0, 1.7, 2.0};
  for (auto cfg : {IntegratorConfig{}, IntegratorConfig::fixed(0.25)}) {
    auto tr = integrate(decay, vec({1.0}), 0.0, 2.0, cfg, stops);
    for (double s : stops) CHECK(std::find(tr.times.begin(), tr.times.end(), s) != tr.times.end());
    CHECK(tr.t_end() == 2.0);
  }
}

TEST_CASE("variational: constant symmetric A against eigendecomposition") {
  Mat A(2, 2);
  A << -0.5, 0.5, 0.5, -0.5;
  auto lin = [&](double, const Vec& y, Vec& d) { d = A * y; };
  auto jac = [&](double, const Vec&, Mat& J) { J = A; };
  auto [flow, S] = integrate_variational(lin, jac, vec({1.0, 2.0}), 0.0, 1.0, IntegratorConfig{});
  CHECK((S.matrices.front() - Mat::Identity(2, 2)).norm() == 0.0);

  Eigen::SelfAdjointEigenSolver<Mat> es(A);
  const Mat expA = es.eigenvectors() * es.eigenvalues().array().exp().matrix().asDiagonal() *
                   es.eigenvectors().transpose();
  CHECK((S.matrices.back() - expA).norm() < 1e-9);
  const Vec img = S.matrices.back() * vec({-1.0, 1.0});
  CHECK((img - std::exp(-1.0) * vec({-1.0, 1.0})).norm() < 1e-9);
}

TEST_CASE("variational: A = 0 keeps identity") {
  auto zero = [](double, const Vec&, Vec& d) { d.setZero(); };
  auto jac = [](double, const Vec&, Mat& J) { J.setZero(); };
  auto [flow, S] = integrate_variational(zero, jac, vec({0.0, 0.0, 0.0}), 0.0, 3.0, IntegratorConfig{});
  for (const auto& m : S.matrices) CHECK((m - Mat::Identity(3, 3)).norm() == 0.0);
}

TEST_CASE("variational: Liouville and composition on random periodic systems") {
  Rng rng(derive_seed(11, "ode-liouville"));
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + trial % 3;
    Mat A0(n, n), A1(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        A0(i, j) = rng.uniform(-1, 1);
        A1(i, j) = rng.uniform(-1, 1);
      }
    auto A = [&](double t) -> Mat { return A0 + std::cos(kTwoPi * t) * A1; };
    auto lin = [&](double t, const Vec& y, Vec& d) { d = A(t) * y; };
    auto jac = [&](double t, const Vec&, Mat& J) { J = A(t); };
    const Vec y0 = Vec::Zero(n);
    auto [f02, S02] = integrate_variational(lin, jac, y0, 0.0, 2.0, IntegratorConfig{});
    auto [f01, S01] = integrate_variational(lin, jac, y0, 0.0, 0.7, IntegratorConfig{});
    auto [f12, S12] = integrate_variational(lin, jac, y0, 0.7, 2.0, IntegratorConfig{});
    CHECK((S02.matrices.back() - S12.matrices.back() * S01.matrices.back()).norm() < 1e-8);
    // trace integral: trace(A0)*2 + trace(A1) * int_0^2 cos = trace(A0)*2
    const double liouville = std::exp(2.0 * A0.trace());
    CHECK(std::abs(S02.matrices.back().determinant() - liouville) < 1e-7 * std::max(1.0, liouville));
  }
}

TEST_CASE("event crossing") {
  auto unit = [](double, const Vec&, Vec& d) { d[0] = 1.0; };
  auto tr = integrate(unit, vec({0.0}), 0.0, 1.0, IntegratorConfig{});
  CHECK(std::abs(event_crossing(tr, [](double t, const Vec&) { return t - 0.5; }, +1) - 0.5) < 1e-12);

  auto osc = [](double, const Vec& y, Vec& d) {
    d[0] = y[1];
    d[1] = -y[0];
  };
  auto h = integrate(osc, vec({1.0, 0.0}), 0.0, 3.0, IntegratorConfig{});
  const double t = event_crossing(h, [](double, const Vec& y) { return y[0]; }, -1);
  CHECK(std::abs(t - std::numbers::pi / 2) < 1e-9);
  CHECK(std::abs(h.dense(t, 0)) < 1e-12);
  CHECK_THROWS_AS(event_crossing(h, [](double, const Vec& y) { return y[0] - 2.0; }, 0), Error);
  try {
    event_crossing(h, [](double, const Vec& y) { return y[0]; }, +1);
    FAIL("expected NoCrossing");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoCrossing);
  }
}

TEST_CASE("simpson quadrature") {
  CHECK(simpson([](double) { return 1.0; }, 0, 1, 2) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(simpson([](double s) { return std::sin(kTwoPi * s); }, 0, 1, 64)) < 1e-12);
  const double v =
      simpson([](double s) { return (1 + std::cos(kTwoPi * s)) * std::cos(kTwoPi * s); }, 0, 1, 64);
  CHECK(std::abs(v - 0.5) < 1e-10);
  CHECK_THROWS_AS(simpson([](double) { return 1.0; }, 0, 1, 3), Error);
}

TEST_CASE("integration errors") {
  auto blowup = [](double, const Vec& y, Vec& d) { d[0] = y[0] * y[0]; };
  try {
    integrate(blowup, vec({1.0}), 0.0, 2.0, IntegratorConfig{});
    FAIL("expected failure");
  } catch (const Error& e) {
    CHECK((e.code() == ErrorCode::StepUnderflow || e.code() == ErrorCode::MaxStepsExceeded));
  }
  IntegratorConfig few = IntegratorConfig::fixed(0.01);
  few.max_steps = 10;
  auto decay = [](double, const Vec& y, Vec& d) { d = -y; };
  try {
    integrate(decay, vec({1.0}), 0.0, 1.0, few);
    FAIL("expected MaxStepsExceeded");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MaxStepsExceeded);
  }
  CHECK_THROWS_AS(integrate(decay, vec({1.0}), 1.0, 0.0, IntegratorConfig{}), Error);
}

TEST_CASE("csv export") {
  auto decay = [](double, const Vec& y, Vec& d) { d = -y; };
  auto tr = integrate(decay, vec({1.0, 2.0}), 0.0, 0.1, IntegratorConfig::fixed(0.05));
  std::ostringstream os;
  tr.write_csv(os);
  CHECK(os.str().rfind("t,x1,x2\n0,1,2\n", 0) == 0);
  CHECK(format_double(0.1) == "0.10000000000000001");
}

TEST_CASE("line fit") {
  std::vector<double> x{0, 1, 2, 3}, y{1, 3, 5, 7};
  auto f = fit_line(x, y);
  CHECK(f.slope == doctest::Approx(2.0));
  CHECK(f.intercept == doctest::Approx(1.0));
  CHECK(f.r2 == doctest::Approx(1.0));
}
