#include "syncstab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/tools/minima.hpp>

#include "syncstab/error.hpp"
#include "syncstab/ode.hpp"
#include "syncstab/rng.hpp"

namespace syncstab {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw Error(ErrorCode::Config, std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw Error(ErrorCode::Config, std::string("unknown key '") + key + "' in " + where);
  }
}

template <class T>
T required(const json& j, const char* key, const char* where) {
  if (!j.contains(key))
    throw Error(ErrorCode::Config, std::string("missing '") + key + "' in " + where);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("bad '") + key + "' in " + where + ": " + e.what());
  }
}

PerturbationKind parse_kind(const std::string& s) {
  if (s == "zero") return PerturbationKind::Zero;
  if (s == "trig-diag-periodic") return PerturbationKind::TrigDiagPeriodic;
  if (s == "random-trig") return PerturbationKind::RandomTrig;
  throw Error(ErrorCode::Config, "unknown perturbation kind '" + s + "'");
}

PerturbationSpec perturbation_from_json(const json& j) {
  reject_unknown(j, {"kind", "r", "seed", "one_periodic"}, "perturbation");
  PerturbationSpec p;
  p.kind = parse_kind(required<std::string>(j, "kind", "perturbation"));
  if (j.contains("r")) p.r = required<double>(j, "r", "perturbation");
  if (j.contains("seed")) p.seed = required<std::uint64_t>(j, "seed", "perturbation");
  if (j.contains("one_periodic")) p.one_periodic = required<bool>(j, "one_periodic", "perturbation");
  if (!(p.r >= 0.0) || !std::isfinite(p.r))
    throw Error(ErrorCode::Config, "perturbation amplitude r must be finite and >= 0");
  if (p.kind != PerturbationKind::Zero && p.r == 0.0) p.kind = PerturbationKind::Zero;
  return p;
}

void validate(int N, double omega, double kappa) {
  if (N < 2) throw Error(ErrorCode::Config, "N must be >= 2");
  if (!std::isfinite(omega) || !std::isfinite(kappa))
    throw Error(ErrorCode::Config, "omega and kappa must be finite");
}

}  // namespace

std::string to_string(Family f) { return f == Family::Winfree ? "winfree" : "custom-trig"; }

std::string to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::Zero: return "zero";
    case PerturbationKind::TrigDiagPeriodic: return "trig-diag-periodic";
    case PerturbationKind::RandomTrig: return "random-trig";
  }
  return "zero";
}

MeanFieldModel MeanFieldModel::winfree(int N, double omega, double kappa, PerturbationSpec p) {
  validate(N, omega, kappa);
  MeanFieldModel m;
  m.n_ = N;
  m.family_ = Family::Winfree;
  m.omega_ = omega;
  m.kappa_ = kappa;
  m.influence_ = TrigSeries(1.0).add_cos(1, 1.0);
  m.response_ = TrigSeries().add_sin(1, -1.0);
  m.pert_ = p;
  m.init_perturbation();
  return m;
}

MeanFieldModel MeanFieldModel::custom_trig(int N, double omega, double kappa, TrigSeries influence,
                                           TrigSeries response, PerturbationSpec p) {
  validate(N, omega, kappa);
  MeanFieldModel m;
  m.n_ = N;
  m.family_ = Family::CustomTrig;
  m.omega_ = omega;
  m.kappa_ = kappa;
  m.influence_ = std::move(influence);
  m.response_ = std::move(response);
  m.pert_ = p;
  m.init_perturbation();
  return m;
}

void MeanFieldModel::init_perturbation() {
  m_ = pert_.one_periodic ? 1.0 : 0.5;
  u_.assign(n_, 0.0);
  phi_.assign(n_, 0.0);
  v_.assign(n_, 0.0);
  chi_.assign(n_, 0.0);
  switch (pert_.kind) {
    case PerturbationKind::Zero:
      break;
    case PerturbationKind::TrigDiagPeriodic:
      std::fill(u_.begin(), u_.end(), 0.5);
      std::fill(v_.begin(), v_.end(), 0.5);
      break;
    case PerturbationKind::RandomTrig: {
      Rng rng(derive_seed(pert_.seed, "perturbation"));
      for (int i = 0; i < n_; ++i) {
        u_[i] = rng.uniform(-0.5, 0.5);
        phi_[i] = rng.uniform(0.0, kTwoPi);
        v_[i] = rng.uniform(-0.5, 0.5);
        chi_[i] = rng.uniform(0.0, kTwoPi);
      }
      break;
    }
  }
}

MeanFieldModel MeanFieldModel::from_json(const json& j) {
  reject_unknown(j, {"N", "family", "omega", "kappa", "influence", "response", "perturbation"},
                 "model");
  const int N = required<int>(j, "N", "model");
  const auto family = j.contains("family") ? required<std::string>(j, "family", "model")
                                           : std::string("winfree");
  const double omega = j.contains("omega") ? required<double>(j, "omega", "model") : 1.0;
  const double kappa = j.contains("kappa") ? required<double>(j, "kappa", "model") : 0.0;
  PerturbationSpec p;
  if (j.contains("perturbation")) p = perturbation_from_json(j.at("perturbation"));
  try {
    if (family == "winfree") {
      if (j.contains("influence") || j.contains("response"))
        throw Error(ErrorCode::Config, "winfree family takes no influence/response");
      return winfree(N, omega, kappa, p);
    }
    if (family == "custom-trig") {
      if (!j.contains("influence") || !j.contains("response"))
        throw Error(ErrorCode::Config, "custom-trig needs influence and response");
      return custom_trig(N, omega, kappa, TrigSeries::from_json(j.at("influence")),
                         TrigSeries::from_json(j.at("response")), p);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("model: ") + e.what());
  }
  throw Error(ErrorCode::Config, "unknown family '" + family + "'");
}

json MeanFieldModel::to_json() const {
  json j;
  j["N"] = n_;
  j["family"] = to_string(family_);
  j["omega"] = omega_;
  j["kappa"] = kappa_;
  if (family_ == Family::CustomTrig) {
    j["influence"] = influence_.to_json();
    j["response"] = response_.to_json();
  }
  j["perturbation"] = {{"kind", to_string(pert_.kind)},
                       {"r", pert_.r},
                       {"seed", pert_.seed},
                       {"one_periodic", pert_.one_periodic}};
  return j;
}

bool MeanFieldModel::perturbation_is_zero() const noexcept {
  return pert_.kind == PerturbationKind::Zero || pert_.r == 0.0;
}

bool MeanFieldModel::one_periodic() const noexcept {
  return perturbation_is_zero() || pert_.one_periodic;
}

double MeanFieldModel::sigma(const Vec& X) const {
  double acc = 0.0;
  for (int j = 0; j < n_; ++j) acc += influence_(X[j]);
  return acc / n_;
}

double MeanFieldModel::eval_field(const Vec& X, double x) const {
  return omega_ + kappa_ * sigma(X) * response_(x);
}

Vec MeanFieldModel::grad_X(const Vec& X, double x) const {
  Vec g(n_);
  const double c = kappa_ / n_ * response_(x);
  for (int j = 0; j < n_; ++j) g[j] = c * influence_.derivative(X[j], 1);
  return g;
}

double MeanFieldModel::d_x(const Vec& X, double x) const {
  return kappa_ * sigma(X) * response_.derivative(x, 1);
}

Mat MeanFieldModel::hessian(const Vec& X, double x) const {
  Mat h = Mat::Zero(n_ + 1, n_ + 1);
  const double R = response_(x);
  const double R1 = response_.derivative(x, 1);
  for (int j = 0; j < n_; ++j) {
    h(j, j) = kappa_ / n_ * influence_.derivative(X[j], 2) * R;
    const double cross = kappa_ / n_ * influence_.derivative(X[j], 1) * R1;
    h(j, n_) = cross;
    h(n_, j) = cross;
  }
  h(n_, n_) = kappa_ * sigma(X) * response_.derivative(x, 2);
  return h;
}

double MeanFieldModel::H(int i, const Vec& Y, double z) const {
  if (perturbation_is_zero()) return 0.0;
  const double ybar = Y.mean();
  return pert_.r / kTwoPi *
         (u_[i] * std::sin(kTwoPi * m_ * z + phi_[i]) + v_[i] * std::cos(kTwoPi * ybar + chi_[i]));
}

Vec MeanFieldModel::H_grad_Y(int i, const Vec& Y, double) const {
  if (perturbation_is_zero()) return Vec::Zero(n_);
  const double ybar = Y.mean();
  return Vec::Constant(n_, -pert_.r * v_[i] / n_ * std::sin(kTwoPi * ybar + chi_[i]));
}

double MeanFieldModel::H_dz(int i, const Vec&, double z) const {
  if (perturbation_is_zero()) return 0.0;
  return pert_.r * u_[i] * m_ * std::cos(kTwoPi * m_ * z + phi_[i]);
}

DiagonalProfile MeanFieldModel::diagonal_profile(double s) const {
  DiagonalProfile p;
  const double I = influence_(s);
  const double R = response_(s);
  p.F_diag = omega_ + kappa_ * I * R;
  p.dN1 = kappa_ * I * response_.derivative(s, 1);
  p.dj = Vec::Constant(n_, kappa_ / n_ * influence_.derivative(s, 1) * R);
  return p;
}

double MeanFieldModel::F_diag(double s) const {
  return omega_ + kappa_ * influence_(s) * response_(s);
}

CoefficientsAB MeanFieldModel::coefficients_ab(double mu) const {
  const auto p = diagonal_profile(mu);
  if (!(p.F_diag > 0.0))
    throw Error(ErrorCode::DiagonalVanishing, "F(mu 1, mu) <= 0 at mu=" + format_double(mu));
  return {p.dN1 / p.F_diag, p.dj / p.F_diag};
}

double MeanFieldModel::log_derivative_diag(double mu) const {
  // d/dmu [omega + kappa I(mu) R(mu)]
  const double num = kappa_ * (influence_.derivative(mu, 1) * response_(mu) +
                               influence_(mu) * response_.derivative(mu, 1));
  return num / F_diag(mu);
}

void MeanFieldModel::field(const Vec& X, Vec& out) const {
  const double sig = sigma(X);
  const bool pert = !perturbation_is_zero();
  const double ybar = pert ? X.mean() : 0.0;
  for (int i = 0; i < n_; ++i) {
    double v = omega_ + kappa_ * sig * response_(X[i]);
    if (pert)
      v += pert_.r / kTwoPi *
           (u_[i] * std::sin(kTwoPi * m_ * X[i] + phi_[i]) + v_[i] * std::cos(kTwoPi * ybar + chi_[i]));
    out[i] = v;
  }
}

void MeanFieldModel::jacobian(const Vec& X, Mat& out) const {
  const double sig = sigma(X);
  Vec dI(n_), R(n_);
  for (int j = 0; j < n_; ++j) {
    dI[j] = influence_.derivative(X[j], 1);
    R[j] = response_(X[j]);
  }
  out.noalias() = (kappa_ / n_) * R * dI.transpose();
  const bool pert = !perturbation_is_zero();
  const double ybar = pert ? X.mean() : 0.0;
  for (int i = 0; i < n_; ++i) {
    out(i, i) += kappa_ * sig * response_.derivative(X[i], 1);
    if (pert) {
      out.row(i).array() += -pert_.r * v_[i] / n_ * std::sin(kTwoPi * ybar + chi_[i]);
      out(i, i) += pert_.r * u_[i] * m_ * std::cos(kTwoPi * m_ * X[i] + phi_[i]);
    }
  }
}

SeminormEstimate seminorm_B(const PointFunction& g, int dim, int samples, std::uint64_t seed) {
  if (dim < 1) throw Error(ErrorCode::InvalidArgument, "seminorm dimension must be >= 1");
  if (samples < 1000) throw Error(ErrorCode::InvalidArgument, "seminorm needs >= 1000 samples");
  SeminormEstimate est;
  Vec y(dim), shifted(dim);
  auto visit = [&](double s, const Vec& w) {
    y = w.array() + s;
    est.value = std::max(est.value, std::abs(g(y)));
  };
  // grid: diagonal period times single-coordinate excursions
  Vec w = Vec::Zero(dim);
  constexpr int kDiag = 64, kOff = 16;
  for (int a = 0; a < kDiag; ++a) {
    const double s = static_cast<double>(a) / kDiag;
    visit(s, w);
    for (int c = 0; c < dim; ++c) {
      for (int b = 0; b <= kOff; ++b) {
        w[c] = static_cast<double>(b) / kOff - 0.5;
        visit(s, w);
      }
      w[c] = 0.0;
    }
  }
  Rng rng(derive_seed(seed, "seminorm"));
  constexpr int kPeriodicityProbes = 256;
  for (int k = 0; k < samples; ++k) {
    const double s = rng.uniform();
    for (int c = 0; c < dim; ++c) w[c] = rng.uniform(-0.5, 0.5);
    visit(s, w);
    if (k < kPeriodicityProbes) {
      const double g0 = g(y);
      shifted = y.array() + 1.0;
      est.periodicity_residual = std::max(est.periodicity_residual, std::abs(g(shifted) - g0));
    }
  }
  est.one_periodic = est.periodicity_residual <= 1e-9 * std::max(1.0, est.value);
  if (!est.one_periodic) {
    // B is unbounded along the diagonal; look for growth over a longer window
    est.lower_bound_only = true;
    double early = 0.0, late = 0.0;
    for (int k = 0; k < 2048; ++k) {
      const double s = 8.0 * k / 2048.0;
      for (int c = 0; c < dim; ++c) w[c] = rng.uniform(-0.5, 0.5);
      y = w.array() + s;
      const double v = std::abs(g(y));
      est.value = std::max(est.value, v);
      if (s < 2.0) early = std::max(early, v);
      if (s >= 6.0) late = std::max(late, v);
    }
    if (late > 1.5 * early + 1e-12)
      throw Error(ErrorCode::NonPeriodicUnbounded,
                  "function grows along the diagonal; sup estimate " + format_double(est.value) +
                      " is a lower bound only");
  }
  return est;
}

json HypothesisReport::to_json() const {
  return json{{"min_F_diag", min_F_diag},
              {"argmin_F_diag", argmin_F_diag},
              {"h_star_integral", h_star_integral},
              {"h_star_doubled_diff", h_star_doubled_diff},
              {"alpha", alpha},
              {"zero_sum_residual", zero_sum_residual},
              {"periodicity_residual", periodicity_residual},
              {"norm_F", norm_F},
              {"norm_dF", norm_dF},
              {"norm_d2F", norm_d2F},
              {"lipschitz_L", lipschitz_L},
              {"norm_H", norm_H},
              {"norm_dH", norm_dH},
              {"satisfied", {{"H", H}, {"H_star", H_star}}}};
}

HypothesisReport MeanFieldModel::check_hypotheses(int quad_points) const {
  if (quad_points < 64) throw Error(ErrorCode::InvalidArgument, "quad_points must be >= 64");
  if (quad_points % 2) ++quad_points;
  HypothesisReport rep;

  // min of F on the diagonal: dense grid, then Brent around the best node
  const int grid = 4 * quad_points;
  int best = 0;
  double best_val = F_diag(0.0);
  for (int k = 1; k < grid; ++k) {
    const double v = F_diag(static_cast<double>(k) / grid);
    if (v < best_val) {
      best_val = v;
      best = k;
    }
  }
  const double h = 1.0 / grid;
  auto [arg, val] = boost::math::tools::brent_find_minima(
      [this](double s) { return F_diag(s); }, (best - 1) * h, (best + 1) * h, 52);
  rep.min_F_diag = std::min(val, best_val);
  rep.argmin_F_diag = val <= best_val ? arg - std::floor(arg) : best * h;

  // sampled B-seminorms
  const int dim = n_ + 1;
  constexpr int kSamples = 4096;
  constexpr std::uint64_t kSeed = 0x5eedULL;
  auto split = [&](const Vec& y, Vec& X) {
    X = y.head(n_);
    return y[n_];
  };
  Vec X(n_);
  auto f_abs = [&](const Vec& y) {
    const double x = split(y, X);
    return eval_field(X, x);
  };
  auto df_abs = [&](const Vec& y) {
    const double x = split(y, X);
    return std::max(grad_X(X, x).cwiseAbs().maxCoeff(), std::abs(d_x(X, x)));
  };
  auto d2f_abs = [&](const Vec& y) {
    const double x = split(y, X);
    return hessian(X, x).cwiseAbs().maxCoeff();
  };
  const auto nF = seminorm_B(f_abs, dim, kSamples, kSeed);
  const auto ndF = seminorm_B(df_abs, dim, kSamples, kSeed);
  const auto nd2F = seminorm_B(d2f_abs, dim, kSamples, kSeed);
  rep.norm_F = nF.value;
  rep.norm_dF = ndF.value;
  rep.norm_d2F = nd2F.value;
  rep.lipschitz_L = rep.norm_F + rep.norm_dF + rep.norm_d2F;
  rep.periodicity_residual =
      std::max({nF.periodicity_residual, ndF.periodicity_residual, nd2F.periodicity_residual});

  if (!perturbation_is_zero()) {
    auto h_abs = [&](const Vec& y) {
      const double z = split(y, X);
      double m = 0.0;
      for (int i = 0; i < n_; ++i) m = std::max(m, std::abs(H(i, X, z)));
      return m;
    };
    auto dh_abs = [&](const Vec& y) {
      const double z = split(y, X);
      double m = 0.0;
      for (int i = 0; i < n_; ++i)
        m = std::max({m, H_grad_Y(i, X, z).cwiseAbs().maxCoeff(), std::abs(H_dz(i, X, z))});
      return m;
    };
    try {
      rep.norm_H = seminorm_B(h_abs, dim, kSamples, kSeed).value;
      rep.norm_dH = seminorm_B(dh_abs, dim, kSamples, kSeed).value;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonPeriodicUnbounded) throw;
      rep.norm_H = rep.norm_dH = std::numeric_limits<double>::infinity();
    }
  }

  const bool norms_finite =
      std::isfinite(rep.norm_F) && std::isfinite(rep.norm_dF) && std::isfinite(rep.norm_d2F);
  rep.H = rep.min_F_diag > 1e-10 && rep.periodicity_residual < 1e-9 && norms_finite;

  if (!(rep.min_F_diag > 0.0)) {
    // integrands are singular; report (H*) as unsatisfied
    rep.h_star_integral = std::numeric_limits<double>::quiet_NaN();
    rep.alpha = std::numeric_limits<double>::quiet_NaN();
    rep.zero_sum_residual = std::numeric_limits<double>::quiet_NaN();
    rep.H_star = false;
    return rep;
  }

  auto hstar = [this](double s) {
    const auto p = diagonal_profile(s);
    return p.dN1 / p.F_diag;
  };
  const double I1 = simpson(hstar, 0.0, 1.0, quad_points);
  const double I2 = simpson(hstar, 0.0, 1.0, 2 * quad_points);
  rep.h_star_doubled_diff = std::abs(I2 - I1);
  if (rep.h_star_doubled_diff > 1e-8)
    throw Error(ErrorCode::QuadratureNotConverged,
                "(H*) integral changed by " + format_double(rep.h_star_doubled_diff) +
                    " under doubling");
  rep.h_star_integral = I2;
  rep.alpha = -I2;
  auto balance = [this](double s) {
    const auto c = coefficients_ab(s);
    return c.b + c.a.sum();
  };
  const double Z1 = simpson(balance, 0.0, 1.0, quad_points);
  const double Z2 = simpson(balance, 0.0, 1.0, 2 * quad_points);
  if (std::abs(Z2 - Z1) > 1e-8)
    throw Error(ErrorCode::QuadratureNotConverged, "zero-sum integral not converged");
  rep.zero_sum_residual = std::abs(Z2);
  rep.H_star = rep.h_star_integral < -1e-10;
  return rep;
}

}  // namespace syncstab
