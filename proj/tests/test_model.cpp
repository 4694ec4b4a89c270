#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "syncstab/error.hpp"
#include "syncstab/model.hpp"
#include "syncstab/ode.hpp"
#include "syncstab/rng.hpp"

using namespace syncstab;
using nlohmann::json;

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;

Vec random_point(Rng& rng, int n, double spread = 0.5) {
  const double base = rng.uniform(-3, 3);
  Vec X(n);
  for (int i = 0; i < n; ++i) X[i] = base + rng.uniform(-spread, spread);
  return X;
}

// fourth-order central difference
template <class F>
double fd(F&& f, double h = 1e-3) {
  return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
}

bool close_rel(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

std::vector<MeanFieldModel> zoo() {
  std::vector<MeanFieldModel> out;
  out.push_back(MeanFieldModel::winfree(5, 1.0, 0.05));
  out.push_back(MeanFieldModel::winfree(3, 1.2, 0.3, {PerturbationKind::TrigDiagPeriodic, 0.05, 0, true}));
  out.push_back(MeanFieldModel::winfree(4, 1.0, 0.1, {PerturbationKind::RandomTrig, 0.02, 9, true}));
  out.push_back(MeanFieldModel::winfree(4, 1.0, 0.1, {PerturbationKind::RandomTrig, 0.02, 9, false}));
  out.push_back(MeanFieldModel::custom_trig(
      3, 0.9, 0.2, TrigSeries(0.5).add_cos(1, 0.7).add_sin(2, 0.2),
      TrigSeries(0.1).add_sin(1, -1.0).add_cos(3, 0.25), {PerturbationKind::RandomTrig, 0.03, 4, true}));
  return out;
}
}  // namespace

TEST_CASE("eval_field examples") {
  const auto free = MeanFieldModel::winfree(5, 1.0, 0.0);
  Rng rng(1);
  for (int k = 0; k < 20; ++k) CHECK(free.eval_field(random_point(rng, 5), rng.uniform()) == 1.0);
  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  CHECK(w.eval_field(Vec::Zero(5), 0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(w.eval_field(Vec::Constant(5, 0.25), 0.25) - 0.95) < 1e-14);
  // against the written-out Winfree formula
  for (int k = 0; k < 50; ++k) {
    const Vec X = random_point(rng, 5);
    const double x = rng.uniform(-1, 2);
    double sig = 0;
    for (int j = 0; j < 5; ++j) sig += 1 + std::cos(kTwoPi * X[j]);
    sig /= 5;
    CHECK(std::abs(w.eval_field(X, x) - (1.0 - 0.05 * sig * std::sin(kTwoPi * x))) < 1e-14);
  }
}

TEST_CASE("diagonal_profile") {
  const auto free = MeanFieldModel::winfree(4, 1.0, 0.0);
  auto p0 = free.diagonal_profile(0.3);
  CHECK(p0.dN1 == 0.0);
  CHECK(p0.dj.cwiseAbs().maxCoeff() == 0.0);
  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  CHECK(std::abs(w.diagonal_profile(0.0).dN1 - (-kTwoPi * 0.05 * 2.0)) < 1e-14);
  CHECK(std::abs(w.diagonal_profile(0.0).dN1 - fd([&](double h) { return w.eval_field(Vec::Zero(5), h); })) < 1e-9);
  for (double s : {0.0, 0.13, 0.5, 0.77}) {
    auto a = w.diagonal_profile(s), b = w.diagonal_profile(s + 1);
    CHECK(std::abs(a.F_diag - b.F_diag) < 1e-13);
    CHECK(std::abs(a.dN1 - b.dN1) < 1e-13);
    CHECK((a.dj - b.dj).norm() < 1e-13);
  }
}

TEST_CASE("analytic partials match finite differences") {
  Rng rng(derive_seed(3, "partials"));
  for (const auto& m : zoo()) {
    const int n = m.N();
    for (int k = 0; k < 100; ++k) {
      const Vec X = random_point(rng, n);
      const double x = rng.uniform(-2, 2);
      // F partials
      const Vec g = m.grad_X(X, x);
      for (int j = 0; j < n; ++j) {
        const double num = fd([&](double h) {
          Vec Y = X;
          Y[j] += h;
          return m.eval_field(Y, x);
        });
        CHECK(close_rel(g[j], num, 1e-6));
      }
      CHECK(close_rel(m.d_x(X, x), fd([&](double h) { return m.eval_field(X, x + h); }), 1e-6));
      // Hessian from differences of the gradient
      const Mat Hs = m.hessian(X, x);
      for (int j = 0; j < n; ++j) {
        const double djj = fd([&](double h) {
          Vec Y = X;
          Y[j] += h;
          return m.grad_X(Y, x)[j];
        });
        CHECK(close_rel(Hs(j, j), djj, 1e-6));
        CHECK(close_rel(Hs(j, n), fd([&](double h) { return m.grad_X(X, x + h)[j]; }), 1e-6));
      }
      CHECK(close_rel(Hs(n, n), fd([&](double h) { return m.d_x(X, x + h); }), 1e-6));
      // full field Jacobian
      Mat J(n, n);
      m.jacobian(X, J);
      Vec fp(n), fm(n), fp2(n), fm2(n);
      for (int j = 0; j < n; ++j) {
        const double h = 1e-3;
        Vec Y = X;
        Y[j] = X[j] + h;
        m.field(Y, fp);
        Y[j] = X[j] - h;
        m.field(Y, fm);
        Y[j] = X[j] + 2 * h;
        m.field(Y, fp2);
        Y[j] = X[j] - 2 * h;
        m.field(Y, fm2);
        const Vec col = (-fp2 + 8 * fp - 8 * fm + fm2) / (12 * h);
        for (int i = 0; i < n; ++i) CHECK(close_rel(J(i, j), col[i], 1e-6));
      }
    }
  }
}

TEST_CASE("field is 1-periodic") {
  Rng rng(5);
  for (const auto& m : zoo()) {
    const int n = m.N();
    Vec f0(n), f1(n);
    for (int k = 0; k < 50; ++k) {
      const Vec X = random_point(rng, n);
      const double x = rng.uniform();
      CHECK(std::abs(m.eval_field(X.array() + 1.0, x + 1) - m.eval_field(X, x)) < 1e-12);
      m.field(X, f0);
      m.field(X.array() + 1.0, f1);
      if (m.one_periodic())
        CHECK((f0 - f1).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("coefficients_ab identities") {
  for (const auto& m : zoo()) {
    double worst = 0.0;
    for (int k = 0; k < 256; ++k) {
      const double mu = k / 256.0;
      const auto c = m.coefficients_ab(mu);
      const double dlog = fd([&](double h) { return std::log(m.F_diag(mu + h)); }, 2e-4);
      worst = std::max(worst, std::abs(c.b + c.a.sum() - dlog));
    }
    CHECK(worst < 1e-8);
    const double integral = simpson(
        [&](double s) {
          const auto c = m.coefficients_ab(s);
          return c.b + c.a.sum();
        },
        0, 1, 256);
    CHECK(std::abs(integral) < 1e-8);
  }
  const auto free = MeanFieldModel::winfree(3, 1.0, 0.0);
  CHECK(free.coefficients_ab(0.4).b == 0.0);
  CHECK(free.coefficients_ab(0.4).a.norm() == 0.0);
  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  CHECK(std::abs(w.coefficients_ab(0.0).b - (-0.1 * kTwoPi)) < 1e-14);
  const auto vanishing = MeanFieldModel::winfree(2, 0.05, 1.0);
  try {
    vanishing.coefficients_ab(0.25);
    FAIL("expected DiagonalVanishing");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DiagonalVanishing);
  }
}

TEST_CASE("check_hypotheses") {
  const auto free = MeanFieldModel::winfree(5, 1.0, 0.0);
  auto r0 = free.check_hypotheses(128);
  CHECK(r0.h_star_integral == 0.0);
  CHECK_FALSE(r0.H_star);
  CHECK(r0.H);

  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  auto r = w.check_hypotheses(128);
  // closed form: max over u of (1+cos u) sin u is 3 sqrt(3)/4 at u = pi/3
  const double min_exact = 1.0 - 0.05 * 3.0 * std::sqrt(3.0) / 4.0;
  CHECK(std::abs(r.min_F_diag - min_exact) < 1e-10);
  CHECK(r.h_star_integral < 0.0);
  CHECK(r.H_star);
  CHECK(r.H);
  auto integrand = [](double s) {
    const double k = 0.05;
    const double F = 1 - k * (1 + std::cos(kTwoPi * s)) * std::sin(kTwoPi * s);
    return -k * (1 + std::cos(kTwoPi * s)) * kTwoPi * std::cos(kTwoPi * s) / F;
  };
  const double oracle = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(integrand, 0.0, 1.0, 15, 1e-14);
  CHECK(std::abs(r.h_star_integral - oracle) < 1e-10);
  CHECK(std::abs(r.alpha + oracle) < 1e-10);
  CHECK(std::abs(r.alpha - std::numbers::pi * 0.05) < 0.2 * std::numbers::pi * 0.05);
  CHECK(r.zero_sum_residual < 1e-8);
  // doubling stability
  auto r2 = w.check_hypotheses(256);
  CHECK(std::abs(r2.h_star_integral - r.h_star_integral) < 1e-8);
  CHECK(std::abs(r2.zero_sum_residual - r.zero_sum_residual) < 1e-8);
  // sampled norms against analytic sups: |F| <= 1.1, |dF| <= 4 pi kappa, |d2F| <= 8 pi^2 kappa
  CHECK(r.norm_F <= 1.1 + 1e-12);
  CHECK(r.norm_F > 1.06);
  CHECK(r.norm_dF <= 4 * std::numbers::pi * 0.05 + 1e-12);
  CHECK(r.norm_d2F <= 8 * std::numbers::pi * std::numbers::pi * 0.05 + 1e-12);
  CHECK(r.norm_d2F > 0.98 * 8 * std::numbers::pi * std::numbers::pi * 0.05);
  CHECK(r.lipschitz_L == doctest::Approx(r.norm_F + r.norm_dF + r.norm_d2F));

  const auto vanishing = MeanFieldModel::winfree(2, 0.05, 1.0);
  auto rv = vanishing.check_hypotheses(64);
  CHECK_FALSE(rv.H);
  CHECK_FALSE(rv.H_star);
  CHECK(rv.min_F_diag < 0.0);
  CHECK_THROWS_AS(w.check_hypotheses(32), Error);
}

TEST_CASE("seminorm_B") {
  auto zero = [](const Vec&) { return 0.0; };
  CHECK(seminorm_B(zero, 3, 1000, 1).value == 0.0);
  auto s1 = [](const Vec& y) { return std::sin(kTwoPi * y[0]); };
  CHECK(std::abs(seminorm_B(s1, 1, 1000, 1).value - 1.0) < 1e-3);
  const auto w = MeanFieldModel::winfree(5, 1.0, 0.05);
  auto F = [&](const Vec& y) { return w.eval_field(y.head(5), y[5]); };
  auto est = seminorm_B(F, 6, 2000, 3);
  CHECK(est.value <= 1.0 + 0.1);
  CHECK(est.one_periodic);
  // monotone in samples, deterministic in seed
  auto g = [](const Vec& y) { return std::sin(kTwoPi * y[0]) * std::cos(kTwoPi * (y[1] - y[2])) + y[2] - y[0]; };
  double prev = 0.0;
  for (int n : {1000, 2000, 4000, 8000}) {
    const double v = seminorm_B(g, 3, n, 17).value;
    CHECK(v >= prev);
    prev = v;
  }
  CHECK(seminorm_B(g, 3, 3000, 17).value == seminorm_B(g, 3, 3000, 17).value);
  // not 1-periodic
  auto bounded = [](const Vec& y) { return std::sin(std::numbers::pi * y[0]); };
  auto b = seminorm_B(bounded, 2, 1000, 1);
  CHECK_FALSE(b.one_periodic);
  CHECK(b.lower_bound_only);
  auto growing = [](const Vec& y) { return y[0]; };
  try {
    seminorm_B(growing, 2, 1000, 1);
    FAIL("expected NonPeriodicUnbounded");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonPeriodicUnbounded);
  }
}

TEST_CASE("perturbation stays within r") {
  for (auto kind : {PerturbationKind::TrigDiagPeriodic, PerturbationKind::RandomTrig}) {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
      const double r = 0.01;
      const auto m = MeanFieldModel::winfree(4, 1.0, 0.05, {kind, r, seed, true});
      const auto rep = m.check_hypotheses(64);
      CHECK(std::max(rep.norm_H, rep.norm_dH) <= r * (1 + 1e-9));
      CHECK(rep.norm_dH > 0.0);
    }
  }
}

TEST_CASE("model json") {
  auto m = MeanFieldModel::from_json(
      json::parse(R"({"N":5,"family":"winfree","omega":1.0,"kappa":0.05,"perturbation":{"kind":"zero"}})"));
  CHECK(m.N() == 5);
  CHECK(m.kappa() == 0.05);
  CHECK(m.perturbation_is_zero());
  auto back = MeanFieldModel::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());

  auto c = MeanFieldModel::from_json(json::parse(R"({"N":3,"family":"custom-trig","omega":1.0,"kappa":0.1,
    "influence":{"fourier":[["const",1.0],["cos",1,1.0]]},"response":{"fourier":[["sin",1,-1.0]]},
    "perturbation":{"kind":"random-trig","r":0.01,"seed":5,"one_periodic":true}})"));
  const auto w = MeanFieldModel::winfree(3, 1.0, 0.1, {PerturbationKind::RandomTrig, 0.01, 5, true});
  Vec X(3);
  X << 0.1, 0.4, -0.2;
  Vec a(3), b(3);
  c.field(X, a);
  w.field(X, b);
  CHECK((a - b).norm() < 1e-15);

  auto expect_config_error = [](const char* text) {
    try {
      MeanFieldModel::from_json(json::parse(text));
      FAIL("expected config error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Config);
    }
  };
  expect_config_error(R"({"N":5,"family":"winfree","kapa":0.05})");
  expect_config_error(R"({"N":1,"family":"winfree"})");
  expect_config_error(R"({"N":3,"family":"kuramoto"})");
  expect_config_error(R"({"N":3,"perturbation":{"kind":"zero","extra":1}})");
  expect_config_error(R"({"N":"three"})");
  expect_config_error(R"({"N":3,"perturbation":{"kind":"random-trig","r":-1}})");
}
