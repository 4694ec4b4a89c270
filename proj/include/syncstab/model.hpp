#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "syncstab/trig.hpp"
#include "syncstab/types.hpp"

namespace syncstab {

enum class Family { Winfree, CustomTrig };
enum class PerturbationKind { Zero, TrigDiagPeriodic, RandomTrig };

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::Zero;
  double r = 0.0;
  std::uint64_t seed = 0;
  bool one_periodic = true;
};

struct DiagonalProfile {
  double F_diag = 0.0;  // F(s1, s)
  double dN1 = 0.0;     // d_{N+1} F(s1, s)
  Vec dj;               // d_j F(s1, s)
};

struct CoefficientsAB {
  double b = 0.0;
  Vec a;
};

struct SeminormEstimate {
  double value = 0.0;
  bool one_periodic = true;
  bool lower_bound_only = false;
  double periodicity_residual = 0.0;
};

struct HypothesisReport {
  double min_F_diag = 0.0;
  double argmin_F_diag = 0.0;
  double h_star_integral = 0.0;
  double h_star_doubled_diff = 0.0;
  double alpha = 0.0;
  double zero_sum_residual = 0.0;
  double periodicity_residual = 0.0;
  double norm_F = 0.0;
  double norm_dF = 0.0;
  double norm_d2F = 0.0;
  double lipschitz_L = 0.0;
  double norm_H = 0.0;
  double norm_dH = 0.0;
  bool H = false;
  bool H_star = false;

  nlohmann::json to_json() const;
};

// F(X, x) = omega + kappa * sigma(X) * R(x), sigma(X) = mean_j I(x_j), and a
// per-oscillator perturbation
//   H_i(Y, z) = r/(2 pi) * [u_i sin(2 pi m z + phi_i) + v_i cos(2 pi mean(Y) + chi_i)]
// with m = 1 when H is 1-periodic and m = 1/2 otherwise.
class MeanFieldModel {
 public:
  static MeanFieldModel winfree(int N, double omega, double kappa, PerturbationSpec p = {});
  static MeanFieldModel custom_trig(int N, double omega, double kappa, TrigSeries influence,
                                    TrigSeries response, PerturbationSpec p = {});
  static MeanFieldModel from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  int N() const noexcept { return n_; }
  Family family() const noexcept { return family_; }
  double omega() const noexcept { return omega_; }
  double kappa() const noexcept { return kappa_; }
  const TrigSeries& influence() const noexcept { return influence_; }
  const TrigSeries& response() const noexcept { return response_; }
  const PerturbationSpec& perturbation() const noexcept { return pert_; }
  bool perturbation_is_zero() const noexcept;
  bool one_periodic() const noexcept;

  double sigma(const Vec& X) const;
  double eval_field(const Vec& X, double x) const;
  // d_j F(X, x), j = 1..N
  Vec grad_X(const Vec& X, double x) const;
  // d_{N+1} F(X, x)
  double d_x(const Vec& X, double x) const;
  // Hessian of F in (X, x), (N+1)x(N+1)
  Mat hessian(const Vec& X, double x) const;

  double H(int i, const Vec& Y, double z) const;
  Vec H_grad_Y(int i, const Vec& Y, double z) const;
  double H_dz(int i, const Vec& Y, double z) const;

  DiagonalProfile diagonal_profile(double s) const;
  double F_diag(double s) const;
  CoefficientsAB coefficients_ab(double mu) const;
  // d/dmu ln F(mu 1, mu) straight from the diagonal series
  double log_derivative_diag(double mu) const;

  // Full system: f_i(X) = F(X, x_i) + H_i(X, x_i) and its Jacobian.
  void field(const Vec& X, Vec& out) const;
  void jacobian(const Vec& X, Mat& out) const;

  HypothesisReport check_hypotheses(int quad_points = 256) const;

 private:
  MeanFieldModel() = default;
  void init_perturbation();

  int n_ = 2;
  Family family_ = Family::Winfree;
  double omega_ = 1.0;
  double kappa_ = 0.0;
  TrigSeries influence_;
  TrigSeries response_;
  PerturbationSpec pert_;
  // H coefficients per oscillator
  double m_ = 1.0;
  std::vector<double> u_, phi_, v_, chi_;
};

using PointFunction = std::function<double(const Vec& y)>;

// Sampled estimate of sup_B |g| with B = {y in R^dim : max|y_i - y_j| <= 1}.
// Scans one diagonal period times the cube [-1/2, 1/2]^dim; the grid part is
// fixed and the random part a prefix of one seeded stream, so the estimate is
// monotone in `samples`.
SeminormEstimate seminorm_B(const PointFunction& g, int dim, int samples, std::uint64_t seed);

std::string to_string(Family f);
std::string to_string(PerturbationKind k);

}  // namespace syncstab
