#include "syncstab/manifold.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/roots.hpp>

#include "syncstab/error.hpp"

namespace syncstab {

using nlohmann::json;

namespace {

VectorField full_field(const MeanFieldModel& model) {
  return [&model](double, const Vec& X, Vec& dX) { model.field(X, dX); };
}

void check_dim(const MeanFieldModel& model, const Vec& v, const char* what) {
  if (v.size() != model.N())
    throw Error(ErrorCode::InvalidArgument, std::string(what) + ": dimension mismatch");
}

std::vector<double> key_of(const Vec& Z) { return {Z.data(), Z.data() + Z.size()}; }

// b, every a_j and zeta are evaluated at the same mu in turn; remember the
// last diagonal evaluation per thread.
const CoefficientsAB& cached_ab(const MeanFieldModel& m, double mu) {
  thread_local const MeanFieldModel* who = nullptr;
  thread_local double at = std::numeric_limits<double>::quiet_NaN();
  thread_local CoefficientsAB value;
  if (who != &m || at != mu) {
    value = m.coefficients_ab(mu);
    who = &m;
    at = mu;
  }
  return value;
}

}  // namespace

Mat jacobian_along(const MeanFieldModel& model, const Vec& Z, double t,
                   const IntegratorConfig& cfg) {
  check_dim(model, Z, "jacobian_along");
  const Vec X = t == 0.0 ? Z : flow(model, Z, 0.0, t, cfg).final_state();
  Mat J;
  model.jacobian(X, J);
  return J;
}

MatrixTrajectory variational_S(const MeanFieldModel& model, const Vec& Z, double t0, double t1,
                               const IntegratorConfig& cfg) {
  check_dim(model, Z, "variational_S");
  JacobianField J = [&model](double, const Vec& x, Mat& j) { model.jacobian(x, j); };
  return integrate_variational(full_field(model), J, Z, t0, t1, cfg).second;
}

double velocity_residual(const MeanFieldModel& model, const Vec& Z, double T,
                         const IntegratorConfig& cfg) {
  check_dim(model, Z, "velocity_residual");
  JacobianField J = [&model](double, const Vec& x, Mat& j) { model.jacobian(x, j); };
  auto [tr, S] = integrate_variational(full_field(model), J, Z, 0.0, T, cfg);
  const Vec V0 = tr.derivs.front();
  double worst = 0.0;
  for (std::size_t k = 0; k < tr.size(); ++k)
    worst = std::max(worst, (S.matrices[k] * V0 - tr.derivs[k]).cwiseAbs().maxCoeff());
  return worst;
}

ChartCoefficients chart_coefficients(const MeanFieldModel& model) {
  auto shared = std::make_shared<const MeanFieldModel>(model);
  ChartCoefficients c;
  c.b = PeriodicFunction::from_callable([shared](double mu) { return cached_ab(*shared, mu).b; });
  for (int j = 0; j < model.N(); ++j)
    c.a.push_back(PeriodicFunction::from_callable(
        [shared, j](double mu) { return cached_ab(*shared, mu).a[j]; }));
  return c;
}

// ------------------------------------------------------------------ MuChart

double MuChart::tau_of_mu(double mu) const { return orbit_.dense(mu, N()); }

double MuChart::mu_of_t(double t) const {
  const int n = N();
  if (!(t >= 0.0 && t <= t_end()))
    throw Error(ErrorCode::InvalidArgument, "mu_of_t: t outside the chart");
  const auto it = std::lower_bound(orbit_.states.begin(), orbit_.states.end(), t,
                                   [n](const Vec& s, double v) { return s[n] < v; });
  const auto k = static_cast<std::size_t>(it - orbit_.states.begin());
  if (orbit_.states[k][n] == t) return orbit_.times[k];
  auto g = [&](double mu) { return orbit_.dense(mu, n) - t; };
  boost::uintmax_t iters = 200;
  boost::math::tools::eps_tolerance<double> tol(52);
  auto [a, b] = boost::math::tools::toms748_solve(g, orbit_.times[k - 1], orbit_.times[k],
                                                  orbit_.states[k - 1][n] - t,
                                                  orbit_.states[k][n] - t, tol, iters);
  return std::abs(g(a)) <= std::abs(g(b)) ? a : b;
}

Vec MuChart::state_at_mu(double mu) const { return orbit_.dense(mu).head(N()); }

double MuChart::mu_dot(double mu) const { return model_->eval_field(state_at_mu(mu), mu); }

double MuChart::theta_at_mu(double mu) const { return model_->F_diag(mu) / mu_dot(mu) - 1.0; }

Mat MuChart::U_at_mu(double mu) const {
  const int n = N();
  const Vec X = state_at_mu(mu);
  const auto diag = model_->diagonal_profile(mu);
  Mat U(n, n);
  for (int i = 0; i < n; ++i) {
    const Vec gH = model_->H_grad_Y(i, X, X[i]);
    const Vec gF = model_->grad_X(X, X[i]);
    for (int j = 0; j < n; ++j) U(i, j) = gH[j] + gF[j] - diag.dj[j];
    U(i, i) += model_->H_dz(i, X, X[i]) + model_->d_x(X, X[i]) - diag.dN1;
  }
  return U;
}

Mat MuChart::zeta(double mu) const {
  const int n = N();
  const Vec X = state_at_mu(mu);
  Mat J;
  model_->jacobian(X, J);
  const auto& ab = cached_ab(*model_, mu);
  Mat out = J / model_->eval_field(X, mu);
  out.diagonal().array() -= ab.b;
  for (int i = 0; i < n; ++i) out.row(i) -= ab.a.transpose();
  return out;
}

Mat MuChart::zeta_assembled(double mu) const {
  const Vec X = state_at_mu(mu);
  Mat J;
  model_->jacobian(X, J);
  const double Fd = model_->F_diag(mu);
  return (theta_at_mu(mu) / Fd) * J + U_at_mu(mu) / Fd;
}

Vec MuChart::velocity(double mu) const {
  Vec v(N());
  model_->field(state_at_mu(mu), v);
  return v;
}

json MuChart::to_json() const {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"mu0", mu0_},
          {"mu_end", mu_end()},
          {"t_end", t_end()},
          {"zeta_norm", zeta_norm},
          {"theta_max", theta_max},
          {"D_sampled", D_sampled},
          {"L", L},
          {"alpha_F", alpha_F},
          {"r", r},
          {"theta_bound", num(theta_bound)},
          {"epsilon_bound", num(epsilon_bound)},
          {"certified", certified},
          {"hstab", hstab.to_json()}};
}

// ------------------------------------------------------------- ChartBuilder

ChartBuilder::ChartBuilder(const MeanFieldModel& model, ChartOptions opts, IntegratorConfig cfg)
    : model_(std::make_shared<const MeanFieldModel>(model)), opts_(opts), cfg_(cfg) {
  cfg_.validate();
  hyp_ = model_->check_hypotheses();
  rigid_ = model_->kappa() == 0.0 && model_->perturbation_is_zero();
  if (rigid_) return;
  if (!(hyp_.min_F_diag > 0.0))
    throw Error(ErrorCode::DiagonalVanishing, "F(s 1, s) is not positive on the diagonal");
  coef_ = chart_coefficients(*model_);
  alpha_ = -coef_.b.period_integral();
  if (!(alpha_ > 1e-6))
    throw Error(ErrorCode::HstabViolated, "alpha = " + format_double(alpha_) + " is not positive");
  periods_ = opts_.psi_periods > 0 ? opts_.psi_periods : default_psi_periods(alpha_);
  span_ = opts_.span > 0.0 ? opts_.span
                           : std::max<double>(periods_, std::ceil(20.0 / alpha_)) + 2.0;
}

MuChart ChartBuilder::build(const Vec& Z) const {
  const int n = model_->N();
  check_dim(*model_, Z, "mu_chart");
  if (rigid_)
    throw Error(ErrorCode::HstabViolated, "rigid rotation: the transformed system has alpha = 0");
  MuChart c;
  c.model_ = model_;
  c.Z_ = Z;
  c.mu0_ = Z.mean();

  // state (X, t) against mu: dX/dmu = f(X) / F(X, mu), dt/dmu = 1 / F(X, mu)
  const MeanFieldModel& m = *model_;
  Vec fx(n);
  VectorField g = [&](double mu, const Vec& y, Vec& dy) {
    const Vec X = y.head(n);
    const double speed = m.eval_field(X, mu);
    if (!(speed > 0.0))
      throw Error(ErrorCode::DiagonalVanishing, "mean-phase speed is not positive");
    m.field(X, fx);
    dy.head(n) = fx / speed;
    dy[n] = 1.0 / speed;
  };
  Vec y0(n + 1);
  y0.head(n) = Z;
  y0[n] = 0.0;
  c.orbit_ = integrate(g, y0, c.mu0_, c.mu0_ + span_, cfg_);

  auto shared = std::make_shared<const MuChart>(c);  // orbit and model for zeta
  auto zeta = Zeta::callable(n, [shared](double mu, Mat& out) { out = shared->zeta(mu); });
  c.system_ = std::make_shared<const PerturbedLinearSystem>(n, coef_.b, coef_.a, zeta, c.mu0_);

  c.L = hyp_.lipschitz_L;
  c.alpha_F = hyp_.min_F_diag;
  c.r = std::max(hyp_.norm_H, hyp_.norm_dH);
  for (std::size_t k = 0; k < c.orbit_.size(); ++k) {
    const double mu = c.orbit_.times[k];
    const Vec X = c.orbit_.states[k].head(n);
    c.D_sampled = std::max(c.D_sampled, (X.array() - mu).abs().maxCoeff());
  }
  const int samples = static_cast<int>(std::ceil(16 * span_));
  for (int k = 0; k <= samples; ++k) {
    const double mu = c.mu0_ + span_ * k / samples;
    c.zeta_norm = std::max(c.zeta_norm, shared->zeta(mu).cwiseAbs().maxCoeff());
    c.theta_max = std::max(c.theta_max, std::abs(shared->theta_at_mu(mu)));
  }
  const double LD = c.L * c.D_sampled;
  const double inf = std::numeric_limits<double>::infinity();
  c.theta_bound = c.alpha_F > LD ? LD / (c.alpha_F - LD) : inf;
  c.epsilon_bound = c.alpha_F > LD ? (c.L + c.r) * c.theta_bound + (c.r + LD) / c.alpha_F : inf;

  if (opts_.certify) {
    c.hstab = check_Hstab(*c.system_);
    c.hstab.D = c.zeta_norm;
    Vec V0(n);
    m.field(Z, V0);
    c.normalizing = normalizing_solution(*c.system_, {V0}, 20.0 / c.hstab.alpha, cfg_);
    c.certified = true;
  }
  return c;
}

std::shared_ptr<const MuChart> ChartBuilder::chart(const Vec& Z) const {
  const auto key = key_of(Z);
  {
    std::lock_guard lock(mutex_);
    if (auto it = charts_.find(key); it != charts_.end()) return it->second;
  }
  auto built = std::make_shared<const MuChart>(build(Z));
  std::lock_guard lock(mutex_);
  return charts_.try_emplace(key, std::move(built)).first->second;
}

LinearForm ChartBuilder::form(const Vec& Z) const {
  check_dim(*model_, Z, "linear form");
  const auto key = key_of(Z);
  {
    std::lock_guard lock(mutex_);
    if (auto it = forms_.find(key); it != forms_.end()) return *it->second;
  }
  Vec V0(model_->N());
  model_->field(Z, V0);
  std::shared_ptr<const LinearForm> built;
  if (rigid_) {
    built = std::make_shared<const LinearForm>(Vec::Constant(model_->N(), 1.0 / model_->N()), V0);
  } else {
    auto c = chart(Z);
    built = std::make_shared<const LinearForm>(make_linear_form(c->system(), V0, periods_, cfg_));
  }
  std::lock_guard lock(mutex_);
  return *forms_.try_emplace(key, std::move(built)).first->second;
}

MuChart mu_chart(const MeanFieldModel& model, const Vec& Z, const ChartOptions& opts,
                 const IntegratorConfig& cfg) {
  return *ChartBuilder(model, opts, cfg).chart(Z);
}

double linear_form_nonlinear(const MeanFieldModel& model, const Vec& Z, const Vec& Y,
                             const ChartOptions& opts, const IntegratorConfig& cfg) {
  check_dim(model, Y, "linear_form_nonlinear");
  ChartOptions o = opts;
  o.certify = false;
  return ChartBuilder(model, o, cfg).form(Z)(Y);
}

// ------------------------------------------------------------- StableChart

StableChart::StableChart(std::shared_ptr<const ChartBuilder> builder, const Vec& X,
                         StableChartOptions opts)
    : builder_(std::move(builder)), X_(X), opts_(opts), form_(builder_->form(X)) {
  const int n = builder_->model().N();
  if (opts_.steps < 1 || opts_.richardson_steps < 1)
    throw Error(ErrorCode::InvalidArgument, "stable chart needs at least one step");
  // Gram-Schmidt of the projected coordinate directions e_1..e_{N-1}
  for (int k = 0; k + 1 < n; ++k) {
    Vec v = project(Vec::Unit(n, k));
    for (const auto& q : basis_) v -= q.dot(v) * q;
    const double nv = v.norm();
    if (!(nv > 1e-12)) throw Error(ErrorCode::KernelViolation, "kernel directions are degenerate");
    basis_.push_back(v / nv);
  }
  radius_ = opts_.xi_radius > 0.0 ? opts_.xi_radius : 0.05 * opts_.D_bound;
  if (opts_.validate_radius && !basis_.empty()) {
    // shrink until the chart is close to the identity at full radius
    for (int halving = 0;; ++halving) {
      const double defect = near_identity_defect(radius_ * basis_.front());
      if (defect <= 0.1) break;
      if (halving == 8)
        throw Error(ErrorCode::RadiusExceeded, "chart is not near the identity at any tested radius");
      radius_ *= 0.5;
    }
  }
}

Vec StableChart::project(const Vec& xi) const { return xi - form_(xi) * form_.V0(); }

Vec StableChart::rhs(const Vec& z, const Vec& xi, double& L) const {
  const auto& model = builder_->model();
  Vec v(model.N());
  model.field(z, v);
  L = builder_->form(z)(xi);
  return xi - L * v;
}

Vec StableChart::solve(const Vec& xi, int steps, double& max_L) const {
  Vec z = X_;
  const double h = 1.0 / steps;
  double L = 0.0;
  auto stage = [&](const Vec& p) {
    Vec k = rhs(p, xi, L);
    max_L = std::max(max_L, std::abs(L));
    return k;
  };
  for (int s = 0; s < steps; ++s) {
    const Vec k1 = stage(z);
    const Vec k2 = stage(z + 0.5 * h * k1);
    const Vec k3 = stage(z + 0.5 * h * k2);
    const Vec k4 = stage(z + h * k3);
    z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return z;
}

ChartPoint StableChart::eval(const Vec& xi) const {
  if (xi.size() != X_.size()) throw Error(ErrorCode::InvalidArgument, "chart: dimension mismatch");
  ChartPoint p;
  p.xi = xi;
  if (xi.isZero(0.0)) {
    p.Y = X_;
    return p;
  }
  const double L0 = form_(xi);
  if (!(std::abs(L0) <= opts_.kernel_tol))
    throw Error(ErrorCode::KernelViolation, "L(xi) = " + format_double(L0) + " is not zero");
  if (radius_ > 0.0 && xi.norm() > radius_ * (1 + 1e-12))
    throw Error(ErrorCode::RadiusExceeded,
                "|xi| = " + format_double(xi.norm()) + " exceeds " + format_double(radius_));
  p.Y = solve(xi, opts_.steps, p.max_L);
  double coarse_L = 0.0;
  p.richardson_diff = (p.Y - solve(xi, opts_.richardson_steps, coarse_L)).norm();
  return p;
}

double StableChart::near_identity_defect(const Vec& xi) const {
  double unused = 0.0;
  const Vec plus = solve(xi, opts_.steps, unused);
  const Vec minus = solve(-xi, opts_.steps, unused);
  return (0.5 * (plus - minus) - xi).norm() / xi.norm();
}

Vec stable_chart(const MeanFieldModel& model, const Vec& X, const Vec& xi,
                 const IntegratorConfig& cfg) {
  ChartOptions o;
  o.certify = false;
  StableChartOptions so;
  so.validate_radius = false;
  StableChart chart(std::make_shared<const ChartBuilder>(model, o, cfg), X, so);
  return chart(xi);
}

void write_chart_samples_csv(std::ostream& os, const std::vector<ChartPoint>& points) {
  if (points.empty()) return;
  const auto n = points.front().xi.size();
  for (Eigen::Index i = 0; i < n; ++i) os << (i ? "," : "") << "xi_" << (i + 1);
  for (Eigen::Index i = 0; i < n; ++i) os << ",y_" << (i + 1);
  os << '\n';
  for (const auto& p : points) {
    for (Eigen::Index i = 0; i < n; ++i) os << (i ? "," : "") << format_double(p.xi[i]);
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << format_double(p.Y[i]);
    os << '\n';
  }
}

// ------------------------------------------------------------- contraction

namespace {

// Integrates the base orbit from A together with delta = (orbit of A + d0) - (orbit of A).
// The absolute tolerance follows |d0| so the difference keeps its relative accuracy.
Trajectory difference_run(const MeanFieldModel& model, const Vec& A, const Vec& d0, double T,
                          const IntegratorConfig& cfg, double sample_step,
                          std::vector<double>& stops) {
  const int n = model.N();
  Vec fa(n), fb(n);
  VectorField f = [&](double, const Vec& y, Vec& dy) {
    model.field(y.head(n), fa);
    model.field(y.head(n) + y.tail(n), fb);
    dy.head(n) = fa;
    dy.tail(n) = fb - fa;
  };
  Vec y0(2 * n);
  y0.head(n) = A;
  y0.tail(n) = d0;
  IntegratorConfig c = cfg;
  if (c.method == Method::Rk45Adaptive) c.abs_tol = std::min(c.abs_tol, c.abs_tol * d0.norm());
  stops.clear();
  const int m = static_cast<int>(std::floor(T / sample_step + 1e-9));
  for (int k = 1; k <= m; ++k)
    if (k * sample_step < T) stops.push_back(k * sample_step);
  return integrate(f, y0, 0.0, T, c, stops);
}

template <typename Emit>
void sample_knots(const Trajectory& tr, const std::vector<double>& stops, Emit&& emit) {
  std::size_t knot = 0;
  auto at = [&](double t) {
    while (tr.times[knot] != t) ++knot;
    emit(t, tr.states[knot]);
  };
  at(tr.t_begin());
  for (double s : stops) at(s);
  if (tr.t_end() != tr.t_begin()) at(tr.t_end());
}

LinearFit tail_fit(const std::vector<double>& t, const std::vector<double>& logd, double from) {
  std::vector<double> x, y;
  for (std::size_t k = 0; k < t.size(); ++k)
    if (t[k] >= from && std::isfinite(logd[k])) {
      x.push_back(t[k]);
      y.push_back(logd[k]);
    }
  if (x.size() < 3) throw Error(ErrorCode::NotConverged, "too few resolvable samples for a fit");
  return fit_line(x, y);
}

}  // namespace

json ContractionResult::to_json() const {
  return {{"fitted_rate", fitted_rate},           {"fit_r2", fit_r2},
          {"K_hat", K_hat},                       {"initial_distance", initial_distance},
          {"final_distance", final_distance}};
}

void ContractionResult::write_csv(std::ostream& os) const {
  os << "t,log_distance\n";
  for (std::size_t k = 0; k < times.size(); ++k)
    os << format_double(times[k]) << ',' << format_double(log_distance[k]) << '\n';
}

ContractionResult verify_contraction(const MeanFieldModel& model, const Vec& X, const Vec& Y,
                                     double T, const IntegratorConfig& cfg, double sample_step) {
  check_dim(model, X, "verify_contraction");
  check_dim(model, Y, "verify_contraction");
  if (!(T > 0.0) || !(sample_step > 0.0))
    throw Error(ErrorCode::InvalidArgument, "contraction needs T > 0 and a positive sample step");
  const Vec d0 = Y - X;
  if (!(d0.norm() > 0.0)) throw Error(ErrorCode::InvalidArgument, "X and Y coincide");
  const int n = model.N();
  std::vector<double> stops;
  auto tr = difference_run(model, X, d0, T, cfg, sample_step, stops);
  ContractionResult r;
  r.initial_distance = d0.norm();
  sample_knots(tr, stops, [&](double t, const Vec& s) {
    r.times.push_back(t);
    r.log_distance.push_back(std::log(s.tail(n).norm()));
  });
  r.final_distance = std::exp(r.log_distance.back());
  const auto fit = tail_fit(r.times, r.log_distance, 0.5 * T);
  r.fitted_rate = fit.slope;
  r.fit_r2 = fit.r2;
  for (std::size_t k = 0; k < r.times.size(); ++k)
    if (std::isfinite(r.log_distance[k]))
      r.K_hat = std::max(r.K_hat, std::exp(r.log_distance[k] - fit.slope * r.times[k]));
  r.K_hat /= r.initial_distance;
  return r;
}

json CycleConvergence::to_json() const {
  return {{"fitted_rate", fitted_rate}, {"fit_r2", fit_r2},       {"d0", d0},
          {"phase_shift", phase_shift}, {"lap_shift", lap_shift}, {"max_distance", max_distance}};
}

void CycleConvergence::write_csv(std::ostream& os) const {
  os << "t,log_distance\n";
  for (std::size_t k = 0; k < times.size(); ++k)
    os << format_double(times[k]) << ',' << format_double(std::log(distance[k])) << '\n';
}

CycleConvergence limit_cycle_convergence(const MeanFieldModel& model, const LockedOrbit& orbit,
                                         const Vec& X0, double T, const IntegratorConfig& cfg,
                                         bool align, double sample_step) {
  check_dim(model, X0, "limit_cycle_convergence");
  check_dim(model, orbit.X_star, "limit_cycle_convergence");
  if (!(T > 0.0)) throw Error(ErrorCode::InvalidArgument, "convergence needs T > 0");
  const int n = model.N();
  CycleConvergence r;
  Vec start = orbit.X_star;  // Phi^s(X_*) - k 1
  if (align) {
    auto one = flow(model, orbit.X_star, 0.0, orbit.period, cfg);
    auto shifted = [&](double s) {
      Vec p = one.dense(s);
      p.array() += std::round((X0 - p).mean());
      return p;
    };
    auto dist = [&](double s) { return (X0 - shifted(s)).norm(); };
    constexpr int kScan = 64;
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= kScan; ++k) {
      const double d = dist(orbit.period * k / kScan);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    const double lo = orbit.period * std::max(0, best - 1) / kScan;
    const double hi = orbit.period * std::min(kScan, best + 1) / kScan;
    double s = boost::math::tools::brent_find_minima(dist, lo, hi, 52).first;
    // brent only resolves s to sqrt(eps); finish with Gauss-Newton along the orbit
    for (int it = 0; it < 4; ++it) {
      const Vec v = one.dense_derivative(s);
      s += (X0 - shifted(s)).dot(v) / v.squaredNorm();
      if (s < 0.0) s += orbit.period;
      if (s > orbit.period) s -= orbit.period;
    }
    r.phase_shift = s;
    start = shifted(r.phase_shift);
    r.lap_shift = std::round((X0 - one.dense(r.phase_shift)).mean());
  }
  r.d0 = (X0 - start).norm();
  if (r.d0 > 0.1)
    throw Error(ErrorCode::OrbitMisaligned, "initial distance to the orbit is " + format_double(r.d0));
  if (r.d0 == 0.0) {
    r.times = {0.0, T};
    r.distance = {0.0, 0.0};
    r.fitted_rate = -std::numeric_limits<double>::infinity();
    return r;
  }
  std::vector<double> stops;
  auto tr = difference_run(model, start, X0 - start, T, cfg, sample_step, stops);
  std::vector<double> logd;
  sample_knots(tr, stops, [&](double t, const Vec& s) {
    const double d = s.tail(n).norm();
    r.times.push_back(t);
    r.distance.push_back(d);
    logd.push_back(std::log(d));
    r.max_distance = std::max(r.max_distance, d);
  });
  const auto fit = tail_fit(r.times, logd, 0.5 * T);
  r.fitted_rate = fit.slope;
  r.fit_r2 = fit.r2;
  return r;
}

}  // namespace syncstab
