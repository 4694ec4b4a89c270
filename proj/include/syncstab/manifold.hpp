#pragma once

#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "json.hpp"
#include "syncstab/linform.hpp"
#include "syncstab/model.hpp"
#include "syncstab/ode.hpp"
#include "syncstab/sync.hpp"
#include "syncstab/types.hpp"

namespace syncstab {

// d f(Phi^t(Z)), the full Jacobian at the point reached from Z after time t.
Mat jacobian_along(const MeanFieldModel& model, const Vec& Z, double t,
                   const IntegratorConfig& cfg = {});

// S_Z(t; t0) on the knots of [t0, t1]; the system is autonomous, so the
// orbit starts at Z at time t0.
MatrixTrajectory variational_S(const MeanFieldModel& model, const Vec& Z, double t0, double t1,
                               const IntegratorConfig& cfg = {});

// max over knots of |S_Z(t;0) f(Z) - f(Phi^t(Z))|: the velocity solves the
// linearization.
double velocity_residual(const MeanFieldModel& model, const Vec& Z, double T,
                         const IntegratorConfig& cfg = {});

// Transformed coefficients b(mu) = d_{N+1}F / F and a_j(mu) = d_j F / F on the
// diagonal. They depend on the model only.
struct ChartCoefficients {
  PeriodicFunction b;
  std::vector<PeriodicFunction> a;
};
ChartCoefficients chart_coefficients(const MeanFieldModel& model);

struct ChartOptions {
  double span = 0.0;     // mu-span of the chart; 0: psi horizon plus margin
  int psi_periods = 0;   // 0: default_psi_periods(alpha)
  bool certify = true;   // run check_Hstab and the normalizing-velocity test
};

// Orbit of Z reparametrized by its mean phase mu (dmu/dt = F(Phi^t(Z), mu),
// mu(0) = mean(Z)), together with the linear system the linearization
// becomes in mu:
//   dY*/dmu = [b(mu) I + 1 a(mu)^T + zeta_Z(mu)] Y*.
class MuChart {
 public:
  const Vec& base() const noexcept { return Z_; }
  int N() const noexcept { return static_cast<int>(Z_.size()); }
  double mu0() const noexcept { return mu0_; }
  double mu_end() const { return orbit_.t_end(); }
  double t_end() const { return orbit_.final_state()[N()]; }

  double tau_of_mu(double mu) const;
  double mu_of_t(double t) const;
  Vec state_at_mu(double mu) const;   // Phi^{tau(mu)}(Z)
  double mu_dot(double mu) const;     // F(Phi^t(Z), mu) at t = tau(mu)
  // F(mu 1, mu) / mu_dot - 1 at t = tau(mu)
  double theta_at_mu(double mu) const;
  double theta(double t) const { return theta_at_mu(mu_of_t(t)); }
  // U_Z entries: H partials plus the offsets of the F partials from the
  // diagonal point (mu 1, mu)
  Mat U_at_mu(double mu) const;
  // J / mu_dot - (b I + 1 a^T)
  Mat zeta(double mu) const;
  // the same matrix assembled as theta J / F(mu 1, mu) + U / F(mu 1, mu)
  Mat zeta_assembled(double mu) const;
  // V*_Z(mu) = f(Phi^{tau(mu)}(Z))
  Vec velocity(double mu) const;
  const Trajectory& orbit() const noexcept { return orbit_; }  // (X, t) against mu

  const PerturbedLinearSystem& system() const { return *system_; }

  // sampled diagnostics
  double zeta_norm = 0.0;      // max entry over the chart
  double theta_max = 0.0;
  double D_sampled = 0.0;      // max_t max_j |x_j - mu|
  double L = 0.0;              // sum of the F, dF, d2F seminorms
  double alpha_F = 0.0;        // min F(s 1, s)
  double r = 0.0;              // max(|H|_B, |dH|_B)
  double theta_bound = 0.0;    // LD / (alpha_F - LD), inf when LD >= alpha_F
  double epsilon_bound = 0.0;  // (L + r) theta_bound + (r + LD) / alpha_F
  bool certified = false;
  StabilityConstants hstab;
  NormalizingSolution normalizing;

  nlohmann::json to_json() const;

 private:
  friend class ChartBuilder;
  MuChart() = default;
  std::shared_ptr<const MeanFieldModel> model_;
  Vec Z_;
  double mu0_ = 0.0;
  Trajectory orbit_;
  std::shared_ptr<const PerturbedLinearSystem> system_;
};

// Shared per-model state for chart computations: the transformed
// coefficients, hypothesis constants, and write-once caches of mu-charts and
// linear forms per base point. Safe to use from several threads.
class ChartBuilder {
 public:
  explicit ChartBuilder(const MeanFieldModel& model, ChartOptions opts = {},
                        IntegratorConfig cfg = {});

  const MeanFieldModel& model() const noexcept { return *model_; }
  const HypothesisReport& hypotheses() const noexcept { return hyp_; }
  const IntegratorConfig& config() const noexcept { return cfg_; }
  // -integral of b over a period; 0 for the rigid rotation
  double alpha() const noexcept { return alpha_; }
  int psi_periods() const noexcept { return periods_; }
  double span() const noexcept { return span_; }
  // kappa = 0 and H = 0: every point moves rigidly and L(Y) = mean(Y) / omega
  bool rigid() const noexcept { return rigid_; }

  std::shared_ptr<const MuChart> chart(const Vec& Z) const;
  // L_{mu_Z} normalized by L(f(Z)) = 1
  LinearForm form(const Vec& Z) const;

 private:
  MuChart build(const Vec& Z) const;

  std::shared_ptr<const MeanFieldModel> model_;
  ChartOptions opts_;
  IntegratorConfig cfg_;
  HypothesisReport hyp_;
  ChartCoefficients coef_;
  double alpha_ = 0.0;
  int periods_ = 0;
  double span_ = 0.0;
  bool rigid_ = false;
  mutable std::mutex mutex_;
  mutable std::map<std::vector<double>, std::shared_ptr<const MuChart>> charts_;
  mutable std::map<std::vector<double>, std::shared_ptr<const LinearForm>> forms_;
};

MuChart mu_chart(const MeanFieldModel& model, const Vec& Z, const ChartOptions& opts = {},
                 const IntegratorConfig& cfg = {});

// L_{mu_Z}(Y) with L(V_Z(0)) = 1.
double linear_form_nonlinear(const MeanFieldModel& model, const Vec& Z, const Vec& Y,
                             const ChartOptions& opts = {}, const IntegratorConfig& cfg = {});

struct StableChartOptions {
  int steps = 8;             // RK4 steps in s
  int richardson_steps = 4;  // coarse solve for the error estimate
  double D_bound = 0.1;      // dispersion bound of the synchronized region
  double xi_radius = 0.0;    // 0: 0.05 * D_bound, validated
  bool validate_radius = true;
  double kernel_tol = 1e-8;
};

struct ChartPoint {
  Vec xi;
  Vec Y;
  double richardson_diff = 0.0;
  double max_L = 0.0;  // max |L_{z(s)}(xi)| over the stages
};

// Local chart xi -> z(xi, 1) of the stable manifold at X, with
//   dz/ds = xi - L_{mu_z}(xi) f(z),  z(xi, 0) = X.
class StableChart {
 public:
  StableChart(std::shared_ptr<const ChartBuilder> builder, const Vec& X,
              StableChartOptions opts = {});

  const Vec& base() const noexcept { return X_; }
  const std::vector<Vec>& kernel_basis() const noexcept { return basis_; }
  double xi_radius() const noexcept { return radius_; }
  const LinearForm& base_form() const noexcept { return form_; }
  const ChartBuilder& builder() const noexcept { return *builder_; }

  // xi - L(xi) f(X), which lies in the kernel
  Vec project(const Vec& xi) const;
  ChartPoint eval(const Vec& xi) const;
  Vec operator()(const Vec& xi) const { return eval(xi).Y; }
  // |(chart(xi) - chart(-xi))/2 - xi| / |xi|
  double near_identity_defect(const Vec& xi) const;

 private:
  Vec rhs(const Vec& z, const Vec& xi, double& L) const;
  Vec solve(const Vec& xi, int steps, double& max_L) const;

  std::shared_ptr<const ChartBuilder> builder_;
  Vec X_;
  StableChartOptions opts_;
  LinearForm form_;
  std::vector<Vec> basis_;
  double radius_ = 0.0;
};

Vec stable_chart(const MeanFieldModel& model, const Vec& X, const Vec& xi,
                 const IntegratorConfig& cfg = {});

// header "xi_1..xi_N,y_1..y_N"
void write_chart_samples_csv(std::ostream& os, const std::vector<ChartPoint>& points);

struct ContractionResult {
  double fitted_rate = 0.0;  // slope of log distance on the tail
  double fit_r2 = 0.0;
  double K_hat = 0.0;        // max_t dist(t) exp(-fitted_rate t) / dist(0)
  double initial_distance = 0.0;
  double final_distance = 0.0;
  std::vector<double> times;
  std::vector<double> log_distance;

  nlohmann::json to_json() const;
  void write_csv(std::ostream& os) const;  // "t,log_distance"
};

// Distance between the orbits of X and Y, integrated as X together with the
// difference so that small distances keep their relative accuracy. The fit
// uses samples in [T/2, T].
ContractionResult verify_contraction(const MeanFieldModel& model, const Vec& X, const Vec& Y,
                                     double T, const IntegratorConfig& cfg = {},
                                     double sample_step = 0.25);

struct CycleConvergence {
  double fitted_rate = 0.0;
  double fit_r2 = 0.0;
  double d0 = 0.0;
  double phase_shift = 0.0;  // s with Psi evaluated at t + s
  double lap_shift = 0.0;    // integer k subtracted from the orbit
  double max_distance = 0.0;
  std::vector<double> times;
  std::vector<double> distance;

  nlohmann::json to_json() const;
  void write_csv(std::ostream& os) const;  // "t,log_distance"
};

// d(t) = |Phi^t(X0) - rho (t + s) - Psi(t + s) - k 1|. With align the shift s
// minimizes d(0) over one period and k is the nearest whole lap; without it
// s = k = 0.
CycleConvergence limit_cycle_convergence(const MeanFieldModel& model, const LockedOrbit& orbit,
                                         const Vec& X0, double T, const IntegratorConfig& cfg = {},
                                         bool align = true, double sample_step = 0.25);

}  // namespace syncstab
