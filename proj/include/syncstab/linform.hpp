#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "syncstab/error.hpp"
#include "syncstab/ode.hpp"
#include "syncstab/trig.hpp"
#include "syncstab/types.hpp"

namespace syncstab {

enum class ZetaKind { Zero, Constant, TrigPeriodic, RandomTrig, Callable };

struct MatrixHarmonic {
  int k = 1;
  Mat cos_part;
  Mat sin_part;
};

// Matrix perturbation zeta(t). Everything except Callable is a finite matrix
// Fourier series of period 1.
class Zeta {
 public:
  using Callable = std::function<void(double t, Mat& out)>;

  static Zeta zero(int N);
  static Zeta constant(Mat c);
  static Zeta trig(Mat c0, std::vector<MatrixHarmonic> terms);
  // Entries D * g_ij(t) / max|g|, g_ij = c_ij cos(2 pi k_ij t + phi_ij) with
  // k_ij in {1, 2}; zero_row_sum subtracts each row's mean before scaling, so
  // zeta(t) 1 = 0.
  static Zeta random_trig(int N, double D, std::uint64_t seed, bool zero_row_sum = false);
  static Zeta callable(int N, Callable fn);
  static Zeta from_json(const nlohmann::json& j, int N);
  nlohmann::json to_json() const;

  ZetaKind kind() const noexcept { return kind_; }
  int N() const noexcept { return n_; }
  bool is_zero() const noexcept { return kind_ == ZetaKind::Zero; }
  void eval(double t, Mat& out) const;
  Mat operator()(double t) const;
  // max entry over a uniform grid of [t0, t1]
  double sampled_norm(double t0 = 0.0, double t1 = 1.0, int samples = 1024) const;

 private:
  ZetaKind kind_ = ZetaKind::Zero;
  int n_ = 0;
  Mat c0_;
  std::vector<MatrixHarmonic> terms_;
  Callable fn_;
  double D_ = 0.0;
  std::uint64_t seed_ = 0;
  bool zero_row_sum_ = false;
};

struct StabilityConstants {
  double alpha = 0.0;
  double beta = 0.0;
  double c_b = 0.0;
  double c_a = 0.0;
  double D = 0.0;
  double D_star_search = std::numeric_limits<double>::quiet_NaN();
  double zero_sum_residual = 0.0;

  nlohmann::json to_json() const;
};

// Y' = [b(t) I + 1 a(t)^T + zeta(t)] Y, the rank-one rows a_j shared by all
// components.
class PerturbedLinearSystem {
 public:
  PerturbedLinearSystem(int N, PeriodicFunction b, std::vector<PeriodicFunction> a, Zeta zeta,
                        double t_prime = 0.0);
  static PerturbedLinearSystem from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  int N() const noexcept { return n_; }
  double t_prime() const noexcept { return t_prime_; }
  PerturbedLinearSystem with_t_prime(double t) const;
  PerturbedLinearSystem with_zeta(Zeta z) const;

  double b(double t) const { return b_(t); }
  const PeriodicFunction& b_fn() const noexcept { return b_; }
  const std::vector<PeriodicFunction>& a_fns() const noexcept { return a_; }
  void a(double t, Vec& out) const;
  const Zeta& zeta() const noexcept { return zeta_; }
  Mat matrix(double t) const;
  // out = M(t) y
  void apply(double t, const Vec& y, Vec& out) const;

  // exp of the integral of b (resp. b + sum a) from s to t
  double e_factor(double t, double s) const;
  double p_factor(double t, double s) const;
  // integral of b + sum_j a_j over [s, t]
  double balance_integral(double s, double t) const;

 private:
  int n_;
  PeriodicFunction b_;
  std::vector<PeriodicFunction> a_;
  Zeta zeta_;
  double t_prime_;
  mutable Mat scratch_;
};

StabilityConstants check_Hstab(const PerturbedLinearSystem& sys, int quad_points = 512);

Mat fundamental_R(const PerturbedLinearSystem& sys, double t_prime, double t,
                  const IntegratorConfig& cfg = {});
// solution of the linear system from Y at t_prime, sampled on knots
Trajectory propagate(const PerturbedLinearSystem& sys, const Vec& Y, double t_prime, double t,
                     const IntegratorConfig& cfg = {}, std::span<const double> stops = {});

double delta_periodic(const PerturbedLinearSystem& sys, double beta, double D, double L, double t);

struct DeltaAnalysis {
  double alpha = 0.0;
  double beta = 0.0;
  double D = 0.0;
  double L = 0.0;
  double min_delta = 0.0;
  double max_delta = 0.0;
  double periodicity_residual = 0.0;
  double ode_residual = 0.0;
  double D0 = 0.0;  // D at which max Delta reaches 1 (Delta is linear in D)
  bool positive = false;
  bool below_one = false;
  std::vector<double> grid;
  std::vector<double> values;

  nlohmann::json to_json() const;
  void write_csv(std::ostream& os) const;  // "t,delta"
};

DeltaAnalysis analyze_delta(const PerturbedLinearSystem& sys, double beta, double D, double L,
                            int samples = 64);

// Auxiliary (N+1)-dimensional system driven by Y:
//   Z*' = b Z* + zeta (z 1 + Z* + e(t,t') Y)
//   z'  = (b + sum a) z + <a, Z* + e(t,t') Y>
// so that u = z 1 + Z* + e(t,t') Y solves the linear system with
// u(t') = z(t') 1 + Z*(t') + Y.
struct AuxiliaryState {
  Vec Z_star;
  double z_last = 0.0;

  static AuxiliaryState zero(int N);
  // c W with W = (1^T, 0)^T
  static AuxiliaryState along_W(int N, double c);
};

struct AuxiliaryTrajectory {
  Trajectory traj;  // components Z*_1..Z*_N, z_{N+1}
  Vec Y;
  double t_prime = 0.0;

  AuxiliaryState at(double t) const;
};

AuxiliaryTrajectory solve_auxiliary(const PerturbedLinearSystem& sys, const Vec& Y,
                                    const AuxiliaryState& Z0, double t_end,
                                    const IntegratorConfig& cfg = {},
                                    std::span<const double> stops = {});
Vec reconstruct(const PerturbedLinearSystem& sys, const Vec& Y, const AuxiliaryState& s, double t);

struct HIntegral {
  double value = 0.0;             // H(t, t') = x_{N+1}(t) / P(t, t')
  double value_quadrature = 0.0;  // same from the integral of <a, S* W> P(t', s)
  double T_W_hat = 0.0;           // from here on |H| stayed above 0.1 |H(t, t')|
};

HIntegral h_integral(const PerturbedLinearSystem& sys, double t_prime, double t,
                     const IntegratorConfig& cfg = {});

struct PsiResult {
  double value = 0.0;
  std::vector<double> approximants;  // at t' + k, k = 1..periods
  bool converged = false;
  double H_final = 0.0;
};

class PsiNotConverged : public Error {
 public:
  PsiNotConverged(const std::string& what, std::vector<double> approximants)
      : Error(ErrorCode::NotConverged, what), approximants_(std::move(approximants)) {}
  const std::vector<double>& approximants() const noexcept { return approximants_; }

 private:
  std::vector<double> approximants_;
};

// Default psi horizon in periods for a given alpha.
int default_psi_periods(double alpha);

PsiResult psi(const PerturbedLinearSystem& sys, const Vec& Y, int periods,
              const IntegratorConfig& cfg = {});
PsiResult psi(const PerturbedLinearSystem& sys, const Vec& Y, const IntegratorConfig& cfg = {});

struct PsiCovector {
  Vec ell;  // psi(Y) = ell . Y
  std::vector<Vec> approximants;
  bool converged = false;
};

PsiCovector psi_covector(const PerturbedLinearSystem& sys, int periods,
                         const IntegratorConfig& cfg = {});

struct NormalizingSolution {
  Vec V0;
  std::size_t candidate_index = 0;
  double inf_norm = 0.0;
  double sup_norm = 0.0;
  double horizon = 0.0;
};

// Accepts the first candidate whose sup-norm trajectory satisfies
// inf > 0 and log(sup / inf) <= 1 over [t', t' + horizon].
NormalizingSolution normalizing_solution(const PerturbedLinearSystem& sys,
                                         const std::vector<Vec>& candidates, double horizon,
                                         const IntegratorConfig& cfg = {});

// L(Y) = psi(Y) / psi(V0); L(V0) == 1.
class LinearForm {
 public:
  LinearForm(Vec ell_raw, Vec V0);
  double operator()(const Vec& Y) const { return ell_raw_.dot(Y) / denom_; }
  Vec covector() const { return ell_raw_ / denom_; }
  const Vec& V0() const noexcept { return V0_; }
  double K_hat() const { return ell_raw_.norm() / std::abs(denom_); }
  double psi_of_V0() const noexcept { return denom_; }

 private:
  Vec ell_raw_;
  Vec V0_;
  double denom_;
};

LinearForm make_linear_form(const PerturbedLinearSystem& sys, const Vec& V0, int periods,
                            const IntegratorConfig& cfg = {});
double linear_form_L(const PerturbedLinearSystem& sys, const Vec& Y, const Vec& V0, int periods,
                     const IntegratorConfig& cfg = {});

enum class DecomposeMode { General, Normalizing };

struct DecomposeOptions {
  DecomposeMode mode = DecomposeMode::General;
  std::optional<double> s_end;      // default t' + 10/alpha
  std::optional<double> beta;       // default alpha/2
  std::optional<Vec> V0;            // normalizing mode; searched when absent
  int psi_periods = 0;              // 0: default_psi_periods
  double sample_step = 0.25;
};

struct DecompositionResult {
  DecomposeMode mode = DecomposeMode::General;
  double psi_value = 0.0;  // psi(Y), or L(Y) in normalizing mode
  double alpha = 0.0;
  double requested_beta = 0.0;
  std::vector<double> times;
  std::vector<Vec> full;     // R(s;t') Y
  std::vector<Vec> neutral;  // psi R 1, or L V(s)
  std::vector<Vec> stable;   // R(s;t')[Y - psi 1], or R[Y - L V0]
  std::vector<double> stable_norms;
  double identity_residual = 0.0;
  double fitted_beta = 0.0;
  double fit_r2 = 0.0;
  bool stable_vanishes = false;
  bool certified = false;

  nlohmann::json to_json() const;
  void write_stable_csv(std::ostream& os) const;  // "t,norm"
};

DecompositionResult decompose(const PerturbedLinearSystem& sys, const Vec& Y,
                              const DecomposeOptions& opts = {}, const IntegratorConfig& cfg = {});

struct DStarSearch {
  double D_star = 0.0;
  double beta = 0.0;
  std::vector<std::pair<double, bool>> trials;  // (D, certified)
};

// Bisection on D in (0, D_max] for random-trig zeta with the given seed.
DStarSearch d_star_search(const PerturbedLinearSystem& base, double beta, std::uint64_t seed,
                          double D_max = 0.5, int iterations = 10,
                          const IntegratorConfig& cfg = {});

// |psi_t(Y) - psi_s(R(s;t) Y)| with t the system's t'.
double psi_invariance_check(const PerturbedLinearSystem& sys, const Vec& Y, double s,
                            const IntegratorConfig& cfg = {});
// |L_t(Y) - L_s(R(s;t) Y)| with V(s) = R(s;t) V0.
double linear_form_invariance(const PerturbedLinearSystem& sys, const Vec& Y, const Vec& V0,
                              double s, const IntegratorConfig& cfg = {});

}  // namespace syncstab
