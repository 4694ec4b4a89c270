#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "generators.hpp"
#include "syncstab/error.hpp"
#include "syncstab/linform.hpp"
#include "syncstab/model.hpp"

using namespace syncstab;
using namespace syncstab::testgen;

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

// exp(M t) for symmetric M
Mat sym_expm(const Mat& M, double t) {
  Eigen::SelfAdjointEigenSolver<Mat> es(M);
  return es.eigenvectors() * (es.eigenvalues().array() * t).exp().matrix().asDiagonal() *
         es.eigenvectors().transpose();
}

// psi from the monodromy matrix: left eigenvector of the dominant eigenvalue,
// normalized against 1.
double psi_oracle(const PerturbedLinearSystem& sys, const Vec& Y) {
  const Mat M = fundamental_R(sys, sys.t_prime(), sys.t_prime() + 1.0);
  Eigen::EigenSolver<Mat> es(M.transpose());
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < es.eigenvalues().size(); ++k)
    if (std::abs(es.eigenvalues()[k]) > std::abs(es.eigenvalues()[best])) best = k;
  const Vec w = es.eigenvectors().col(best).real();
  return w.dot(Y) / w.sum();
}

void expect_code(ErrorCode code, auto&& fn) {
  try {
    fn();
    FAIL("expected " << to_string(code));
  } catch (const Error& e) {
    CHECK(e.code() == code);
  }
}
}  // namespace

TEST_CASE("e and P factors") {
  auto c = constant_system(2);
  CHECK(c.e_factor(0.7, 0.7) == 1.0);
  CHECK(std::abs(c.e_factor(1.0, 0.0) - std::exp(-1.0)) < 1e-15);
  CHECK(c.p_factor(0.4, 0.4) == 1.0);
  CHECK(std::abs(c.p_factor(3.0, 0.5) - 1.0) < 1e-14);

  auto bal = balanced_system(3);
  CHECK(std::abs(bal.e_factor(1.0, 0.0) - std::exp(-1.0)) < 1e-14);
  // exact primitive -t + sin(2 pi t)
  CHECK(std::abs(bal.e_factor(0.3, 0.0) - std::exp(-0.3 + std::sin(kTwoPi * 0.3))) < 1e-14);
  for (double t : {0.1, 0.9, 2.3}) CHECK(std::abs(bal.p_factor(t, 0.0) - 1.0) < 1e-14);

  Rng rng(derive_seed(1, "factors"));
  for (int k = 0; k < 20; ++k) {
    auto sys = random_periodic_system(rng, 3, 0.0, 1);
    const double t = rng.uniform(0, 3), s = rng.uniform(0, 3), u = rng.uniform(0, 3);
    CHECK(std::abs(sys.e_factor(t, s) * sys.e_factor(s, u) - sys.e_factor(t, u)) < 1e-10 * sys.e_factor(t, u));
    CHECK(std::abs(sys.p_factor(t + 1, s + 1) - sys.p_factor(t, s)) < 1e-12 * sys.p_factor(t, s));
    CHECK(std::abs(sys.p_factor(s + 1, s) - 1.0) < 1e-12);
  }
}

TEST_CASE("fundamental_R against the eigendecomposition oracle") {
  for (int N : {2, 3, 5}) {
    auto sys = constant_system(N);
    CHECK((fundamental_R(sys, 0.0, 0.0) - Mat::Identity(N, N)).norm() == 0.0);
    const Mat M = -Mat::Identity(N, N) + Mat::Constant(N, N, 1.0 / N);
    const Mat R = fundamental_R(sys, 0.0, 1.0);
    CHECK((R - sym_expm(M, 1.0)).norm() < 1e-9);
    CHECK((R * Vec::Ones(N) - Vec::Ones(N)).norm() < 1e-9);
  }
  auto sys = constant_system(2);
  const Vec img = fundamental_R(sys, 0.0, 1.0) * vec({1.0, 3.0});
  CHECK((img - (2.0 * Vec::Ones(2) + std::exp(-1.0) * vec({-1.0, 1.0}))).norm() < 1e-9);
  CHECK(std::abs(img[0] - 1.632) < 1e-3);

  Rng rng(derive_seed(2, "composition"));
  for (int k = 0; k < 5; ++k) {
    auto r = random_periodic_system(rng, 3, 0.05, k);
    const Mat R02 = fundamental_R(r, 0.0, 2.0);
    const Mat R01 = fundamental_R(r, 0.0, 0.8);
    const Mat R12 = fundamental_R(r, 0.8, 2.0);
    CHECK((R02 - R12 * R01).norm() < 1e-8);
  }
}

TEST_CASE("check_Hstab") {
  auto c = check_Hstab(constant_system(3));
  CHECK(std::abs(c.alpha - 1.0) < 1e-14);
  CHECK(c.zero_sum_residual < 1e-14);
  CHECK(c.c_b == doctest::Approx(1.0));
  CHECK(c.c_a == doctest::Approx(1.0));
  CHECK(c.beta == doctest::Approx(0.5));

  std::vector<PeriodicFunction> a(2, PeriodicFunction::constant(0.45));
  PerturbedLinearSystem bad(2, PeriodicFunction::constant(-1.0), a, Zeta::zero(2));
  expect_code(ErrorCode::HstabViolated, [&] { check_Hstab(bad); });
  std::vector<PeriodicFunction> z(2, PeriodicFunction::constant(0.0));
  PerturbedLinearSystem neutral(2, PeriodicFunction::constant(0.0), z, Zeta::zero(2));
  expect_code(ErrorCode::HstabViolated, [&] { check_Hstab(neutral); });

  // coefficients induced by a Winfree model along its diagonal
  const auto m = MeanFieldModel::winfree(5, 1.0, 0.05);
  auto b = PeriodicFunction::from_callable([&](double s) { return m.coefficients_ab(s).b; });
  std::vector<PeriodicFunction> aw(5, PeriodicFunction::from_callable([&](double s) { return m.coefficients_ab(s).a[0]; }));
  PerturbedLinearSystem induced(5, b, aw, Zeta::zero(5));
  auto ci = check_Hstab(induced);
  CHECK(ci.zero_sum_residual < 1e-8);
  CHECK(std::abs(ci.alpha - std::numbers::pi * 0.05) < 0.2 * std::numbers::pi * 0.05);
}

TEST_CASE("Delta closed form") {
  auto c = constant_system(2);
  CHECK(delta_periodic(c, 0.5, 0.0, 1.0, 0.3) == 0.0);
  CHECK(std::abs(delta_periodic(c, 0.5, 0.1, 1.0, 0.3) - 0.2) < 1e-12);
  expect_code(ErrorCode::BetaOutOfRange, [&] { delta_periodic(c, 1.5, 0.1, 1.0, 0.0); });
  expect_code(ErrorCode::BetaOutOfRange, [&] { delta_periodic(c, 0.0, 0.1, 1.0, 0.0); });
  Rng rng(derive_seed(3, "delta"));
  for (int k = 0; k < 5; ++k) {
    auto sys = random_periodic_system(rng, 2, 0.0, 0);
    const double alpha = check_Hstab(sys).alpha;
    auto d = analyze_delta(sys, 0.5 * alpha, 0.05, 2.0, 32);
    CHECK(d.positive);
    CHECK(d.periodicity_residual < 1e-10);
    CHECK(d.ode_residual < 1e-8);
    CHECK(std::abs(delta_periodic(sys, 0.5 * alpha, 0.05, 2.0, 0.3) -
                   delta_periodic(sys, 0.5 * alpha, 0.05, 2.0, 1.3)) < 1e-10);
  }
}

TEST_CASE("auxiliary system") {
  auto c = constant_system(2);
  auto z = solve_auxiliary(c, Vec::Zero(2), AuxiliaryState::zero(2), 3.0);
  for (const auto& s : z.traj.states) CHECK(s.norm() == 0.0);

  // Z0 = -psi W with psi = 2: the auxiliary state decays like e^{-t}
  const Vec Y = vec({1.0, 3.0});
  const std::vector<double> knots{1.0, 2.0, 4.0};
  auto aux = solve_auxiliary(c, Y, AuxiliaryState::along_W(2, -2.0), 8.0, {}, knots);
  for (double t : {1.0, 2.0, 4.0, 8.0}) {
    auto s = aux.at(t);
    Vec full(3);
    full << s.Z_star, s.z_last;
    // Z* = -2 e^{-t} 1 and z = 0 in closed form
    CHECK((full - vec({-2.0, -2.0, 0.0}) * std::exp(-t)).norm() < 1e-9);
    CHECK((reconstruct(c, Y, s, t) - std::exp(-t) * vec({-1.0, 1.0})).norm() < 1e-9);
  }

  // reconstruction against the fundamental matrix on random systems
  Rng rng(derive_seed(4, "aux"));
  for (int k = 0; k < 6; ++k) {
    const int N = 2 + k % 3;
    auto sys = random_periodic_system(rng, N, 0.05, 100 + k);
    const Vec Yr = random_vector(rng, N);
    const double p = rng.uniform(-1, 1);
    const std::vector<double> knots{0.5, 2.0};
    auto tr = solve_auxiliary(sys, Yr, AuxiliaryState::along_W(N, -p), 4.0, {}, knots);
    for (double t : {0.5, 2.0, 4.0}) {
      const Vec lhs = reconstruct(sys, Yr, tr.at(t), t);
      const Vec rhs = fundamental_R(sys, 0.0, t) * (Yr - p * Vec::Ones(N));
      CHECK((lhs - rhs).norm() < 1e-7);
    }
  }
}

TEST_CASE("H(t,t') integral") {
  auto c = constant_system(2);
  CHECK(h_integral(c, 0.0, 0.0).value == 0.0);
  auto h1 = h_integral(c, 0.0, 1.0);
  CHECK(std::abs(h1.value - (1.0 - std::exp(-1.0))) < 1e-9);
  CHECK(std::abs(h1.value - 0.6321) < 1e-4);
  CHECK(std::abs(h1.value_quadrature - h1.value) < 1e-9);
  double prev = 0.0;
  for (double t : {1.0, 5.0, 10.0, 20.0}) {
    const double v = h_integral(c, 0.0, t).value;
    CHECK(std::abs(v - (1.0 - std::exp(-t))) < 1e-9);
    CHECK(v > prev);
    prev = v;
  }
  Rng rng(derive_seed(5, "H"));
  for (int k = 0; k < 4; ++k) {
    auto sys = random_periodic_system(rng, 3, 0.03, k);
    auto h = h_integral(sys, 0.25, 6.0);
    CHECK(std::abs(h.value - h.value_quadrature) < 1e-8 * std::max(1.0, std::abs(h.value)));
    CHECK(h.T_W_hat >= 0.0);
  }
}

TEST_CASE("psi") {
  for (int N : {2, 3, 5}) {
    auto c = constant_system(N);
    Rng rng(N);
    const Vec Y = random_vector(rng, N);
    CHECK(std::abs(psi(c, Y).value - Y.mean()) < 1e-8);
    CHECK(std::abs(psi(c, Vec::Constant(N, 0.7)).value - 0.7) < 1e-10);
  }
  CHECK(std::abs(psi(constant_system(2), vec({1.0, 3.0})).value - 2.0) < 1e-8);
  expect_code(ErrorCode::InvalidArgument, [&] { psi(constant_system(2), vec({1.0, 3.0}), 5); });

  Rng rng(derive_seed(6, "psi"));
  for (int k = 0; k < 6; ++k) {
    const int N = 2 + k % 4;
    auto sys = random_periodic_system(rng, N, 0.05 * rng.uniform(), 200 + k);
    const Vec Y = random_vector(rng, N), Z = random_vector(rng, N);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    const double pY = psi(sys, Y).value, pZ = psi(sys, Z).value;
    const double pc = psi(sys, Vec(a * Y + b * Z)).value;
    CHECK(std::abs(pc - a * pY - b * pZ) < 1e-7 * (std::abs(a) * Y.norm() + std::abs(b) * Z.norm()));
    // against the monodromy eigenvector
    CHECK(std::abs(pY - psi_oracle(sys, Y)) < 1e-7);
    // covector route
    auto cov = psi_covector(sys, default_psi_periods(check_Hstab(sys).alpha));
    CHECK(std::abs(cov.ell.dot(Y) - pY) < 1e-8);
  }
}

TEST_CASE("normalizing solution and the linear form") {
  auto c = constant_system(3);
  auto ns = normalizing_solution(c, {Vec::Ones(3)}, 20.0);
  CHECK(std::abs(ns.inf_norm - 1.0) < 1e-12);
  CHECK(std::abs(ns.sup_norm - 1.0) < 1e-12);
  expect_code(ErrorCode::NotFound, [&] { normalizing_solution(c, {vec({-1.0, 1.0, 0.0})}, 20.0); });
  expect_code(ErrorCode::InvalidArgument, [&] { normalizing_solution(c, {Vec::Ones(3)}, 5.0); });

  auto c2 = constant_system(2);
  CHECK(linear_form_L(c2, vec({1.0, 3.0}), Vec::Ones(2), 24) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(linear_form_L(c2, Vec::Ones(2), Vec::Ones(2), 24) == 1.0);

  Rng rng(derive_seed(7, "L"));
  auto sys = random_periodic_system(rng, 3, 0.04, 9, true);
  auto ns2 = normalizing_solution(sys, {Vec::Ones(3)}, 20.0 / check_Hstab(sys).alpha);
  CHECK(ns2.inf_norm > 0.0);
  const Vec V0 = ns2.V0;
  const int periods = default_psi_periods(check_Hstab(sys).alpha);
  const auto form = make_linear_form(sys, V0, periods);
  CHECK(form(V0) == 1.0);
  const Vec Y = random_vector(rng, 3);
  CHECK(std::abs(form(3.5 * Y) - 3.5 * form(Y)) < 1e-8);
  CHECK(std::abs(linear_form_L(sys, Y, V0, periods) - form(Y)) < 1e-8);
  CHECK(std::isfinite(form.K_hat()));
  const auto form2 = make_linear_form(sys, V0, 2 * periods);
  CHECK(std::abs(form2.K_hat() - form.K_hat()) < 1e-6);
  CHECK(linear_form_invariance(sys, Y, V0, 0.0) == 0.0);
  CHECK(linear_form_invariance(sys, Y, V0, 1.7) < 1e-6 * Y.norm());
}

TEST_CASE("decompose") {
  auto c = constant_system(3);
  auto r0 = decompose(c, Vec::Constant(3, 0.4));
  CHECK(r0.stable_vanishes);
  CHECK(r0.certified);
  for (double v : r0.stable_norms) CHECK(v < 1e-10);

  for (int N : {2, 3, 5}) {
    auto cs = constant_system(N);
    Rng rng(derive_seed(N, "decompose"));
    const Vec Y = random_vector(rng, N);
    auto r = decompose(cs, Y);
    CHECK(r.certified);
    CHECK(std::abs(r.fitted_beta - 1.0) < 0.01);
    CHECK(r.identity_residual < 1e-8);
    CHECK(r.fit_r2 > 0.99);
  }

  Rng rng(derive_seed(8, "decompose-random"));
  for (int k = 0; k < 4; ++k) {
    auto sys = random_periodic_system(rng, 3, 0.02, 300 + k);
    const Vec Y = random_vector(rng, 3);
    auto r = decompose(sys, Y);
    CHECK(r.identity_residual < 1e-7);
    CHECK(r.fitted_beta > 0.0);
    std::ostringstream os;
    r.write_stable_csv(os);
    CHECK(os.str().rfind("t,norm\n", 0) == 0);
  }

  auto zr = random_periodic_system(rng, 4, 0.03, 77, true);
  DecomposeOptions opts;
  opts.mode = DecomposeMode::Normalizing;
  auto rn = decompose(zr, random_vector(rng, 4), opts);
  CHECK(rn.identity_residual < 1e-7);
  CHECK(rn.certified);
}

TEST_CASE("psi invariance diagnostic") {
  auto c = constant_system(2);
  CHECK(psi_invariance_check(c, vec({1.0, 3.0}), 0.0) == 0.0);
  CHECK(psi_invariance_check(c, vec({1.0, 3.0}), 1.0) < 1e-9);
}

TEST_CASE("zeta generators") {
  auto z = Zeta::random_trig(4, 0.03, 5);
  CHECK(std::abs(z.sampled_norm() - 0.03) < 1e-15);
  auto z2 = Zeta::random_trig(4, 0.03, 5);
  CHECK((z(0.37) - z2(0.37)).norm() == 0.0);
  CHECK((z(0.37) - Zeta::random_trig(4, 0.03, 6)(0.37)).norm() > 0.0);
  auto zr = Zeta::random_trig(4, 0.03, 5, true);
  for (double t : {0.0, 0.2, 0.71}) CHECK((zr(t) * Vec::Ones(4)).norm() < 1e-15);
  CHECK((z(0.2) - z(1.2)).norm() < 1e-15);
}

TEST_CASE("linear system json") {
  auto sys = PerturbedLinearSystem::from_json(nlohmann::json::parse(
      R"({"N":2,"b":{"fourier":[["const",-1.0]]},"a":[{"fourier":[["const",0.5]]},{"fourier":[["const",0.5]]}],
          "zeta":{"kind":"random-trig","D":0.02,"seed":7},"t_prime":0.0})"));
  CHECK(sys.N() == 2);
  CHECK(std::abs(sys.zeta().sampled_norm() - 0.02) < 1e-15);
  auto again = PerturbedLinearSystem::from_json(sys.to_json());
  CHECK((again.matrix(0.3) - sys.matrix(0.3)).norm() == 0.0);
  auto bad = [](const char* text) {
    try {
      PerturbedLinearSystem::from_json(nlohmann::json::parse(text));
      FAIL("expected config error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Config);
    }
  };
  bad(R"({"N":2,"b":{"fourier":[]},"a":[{"fourier":[]}]})");
  bad(R"({"N":2,"b":{"fourier":[]},"a":[{"fourier":[]},{"fourier":[]}],"extra":1})");
  bad(R"({"N":2,"b":{"fourier":[]},"a":[{"fourier":[]},{"fourier":[]}],"zeta":{"kind":"wild"}})");
  bad(R"({"N":2,"b":{"fourier":[]},"a":[{"fourier":[]},{"fourier":[]}],"zeta":{"kind":"constant","matrix":[[1]]}})");
}
