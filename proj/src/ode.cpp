#include "syncstab/ode.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>

#include <boost/math/tools/roots.hpp>

#include "syncstab/error.hpp"

namespace syncstab {

void IntegratorConfig::validate() const {
  if (method == Method::Rk4Fixed && !(step > 0.0))
    throw Error(ErrorCode::InvalidArgument, "fixed step must be > 0");
  if (method == Method::Rk45Adaptive && !(abs_tol > 0.0 && rel_tol > 0.0))
    throw Error(ErrorCode::InvalidArgument, "tolerances must be > 0");
  if (!(max_step > 0.0)) throw Error(ErrorCode::InvalidArgument, "max_step must be > 0");
  if (max_steps <= 0) throw Error(ErrorCode::InvalidArgument, "max_steps must be > 0");
}

IntegratorConfig IntegratorConfig::fixed(double step) {
  IntegratorConfig c;
  c.method = Method::Rk4Fixed;
  c.step = step;
  return c;
}

IntegratorConfig IntegratorConfig::adaptive(double tol) {
  IntegratorConfig c;
  c.abs_tol = tol;
  c.rel_tol = tol;
  return c;
}

std::size_t Trajectory::segment(double t) const {
  if (times.empty()) throw Error(ErrorCode::InvalidArgument, "empty trajectory");
  const double slack = 1e-12 * std::max(1.0, std::abs(times.back()));
  if (t < times.front() - slack || t > times.back() + slack)
    throw Error(ErrorCode::InvalidArgument,
                "time " + format_double(t) + " outside trajectory span");
  if (times.size() == 1) return 0;
  auto it = std::upper_bound(times.begin(), times.end(), t);
  std::size_t k = it == times.begin() ? 0 : static_cast<std::size_t>(it - times.begin()) - 1;
  return std::min(k, times.size() - 2);
}

namespace {

struct HermiteWeights {
  double h00, h10, h01, h11;
};

HermiteWeights hermite(double u) {
  return {(1 + 2 * u) * (1 - u) * (1 - u), u * (1 - u) * (1 - u), u * u * (3 - 2 * u),
          u * u * (u - 1)};
}

}  // namespace

Vec Trajectory::dense(double t) const {
  const auto k = segment(t);
  if (times.size() == 1) return states.front();
  const double h = times[k + 1] - times[k];
  const double u = std::clamp((t - times[k]) / h, 0.0, 1.0);
  if (u == 0.0) return states[k];
  if (u == 1.0) return states[k + 1];
  const auto w = hermite(u);
  Vec out = w.h00 * states[k] + (w.h10 * h) * derivs[k] + w.h01 * states[k + 1] +
            (w.h11 * h) * derivs[k + 1];
  if (!corrections.empty()) out += (u * u * (1 - u) * (1 - u)) * corrections[k];
  return out;
}

double Trajectory::dense(double t, int i) const {
  const auto k = segment(t);
  if (times.size() == 1) return states.front()[i];
  const double h = times[k + 1] - times[k];
  const double u = std::clamp((t - times[k]) / h, 0.0, 1.0);
  if (u == 0.0) return states[k][i];
  if (u == 1.0) return states[k + 1][i];
  const auto w = hermite(u);
  double out = w.h00 * states[k][i] + w.h10 * h * derivs[k][i] + w.h01 * states[k + 1][i] +
               w.h11 * h * derivs[k + 1][i];
  if (!corrections.empty()) out += u * u * (1 - u) * (1 - u) * corrections[k][i];
  return out;
}

Vec Trajectory::dense_derivative(double t) const {
  const auto k = segment(t);
  if (times.size() == 1) return derivs.front();
  const double h = times[k + 1] - times[k];
  const double u = std::clamp((t - times[k]) / h, 0.0, 1.0);
  const double d00 = 6 * u * u - 6 * u;
  const double d10 = 3 * u * u - 4 * u + 1;
  const double d01 = -6 * u * u + 6 * u;
  const double d11 = 3 * u * u - 2 * u;
  Vec out = (d00 / h) * states[k] + d10 * derivs[k] + (d01 / h) * states[k + 1] +
            d11 * derivs[k + 1];
  if (!corrections.empty()) out += (2 * u * (1 - u) * (1 - 2 * u) / h) * corrections[k];
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

void Trajectory::write_csv(std::ostream& os, std::string_view prefix) const {
  os << "t";
  for (int i = 0; i < dim(); ++i) os << ',' << prefix << (i + 1);
  os << '\n';
  for (std::size_t k = 0; k < times.size(); ++k) {
    os << format_double(times[k]);
    for (int i = 0; i < dim(); ++i) os << ',' << format_double(states[k][i]);
    os << '\n';
  }
}

void MatrixTrajectory::write_csv(std::ostream& os) const {
  if (matrices.empty()) return;
  const auto rows = matrices.front().rows();
  const auto cols = matrices.front().cols();
  os << "t";
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) os << ",m" << (i + 1) << '_' << (j + 1);
  os << '\n';
  for (std::size_t k = 0; k < times.size(); ++k) {
    os << format_double(times[k]);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) os << ',' << format_double(matrices[k](i, j));
    os << '\n';
  }
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                 a64 = 49.0 / 176, a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192,
                 a75 = -2187.0 / 6784, a76 = 11.0 / 84;
// quartic dense-output term
constexpr double d1 = -12715105075.0 / 11282082432, d3 = 87487479700.0 / 32700410799,
                 d4 = -10690763975.0 / 1880347072, d5 = 701980252875.0 / 199316789632,
                 d6 = -1453857185.0 / 822651844, d7 = 69997945.0 / 29380423;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                 e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

class Stepper {
 public:
  Stepper(const VectorField& f, const IntegratorConfig& cfg, std::span<const double> stops,
          double t1)
      : f_(f), cfg_(cfg), t1_(t1) {
    for (double s : stops) stops_.push_back(s);
    std::sort(stops_.begin(), stops_.end());
  }

  Trajectory run(const Vec& y0, double t0) {
    const auto n = y0.size();
    for (auto* v : {&k1_, &k2_, &k3_, &k4_, &k5_, &k6_, &k7_, &tmp_, &ynew_, &err_}) v->resize(n);
    Trajectory out;
    Vec y = y0;
    double t = t0;
    f_(t, y, k1_);
    out.times.push_back(t);
    out.states.push_back(y);
    out.derivs.push_back(k1_);
    if (t1_ <= t0) return out;

    next_stop_ = std::upper_bound(stops_.begin(), stops_.end(), t0 + tiny(t0)) - stops_.begin();
    double h = cfg_.method == Method::Rk4Fixed ? cfg_.step : initial_step(t, y);
    long steps = 0;
    while (t < t1_) {
      if (++steps > cfg_.max_steps)
        throw Error(ErrorCode::MaxStepsExceeded,
                    "exceeded " + std::to_string(cfg_.max_steps) + " steps at t=" + format_double(t));
      const double target = current_target();
      double hstep = std::min(h, target - t);
      bool hits_target = false;
      if (t + hstep >= target - tiny(target)) {
        hstep = target - t;
        hits_target = true;
      }
      if (cfg_.method == Method::Rk4Fixed) {
        rk4_step(t, y, hstep);
        t = hits_target ? target : t + hstep;
        y.swap(ynew_);
        f_(t, y, k1_);
      } else {
        const double err = dopri_step(t, y, hstep);
        if (!(err <= 1.0)) {
          const double fac = std::isfinite(err) ? std::max(0.2, 0.9 * std::pow(err, -0.2)) : 0.2;
          h = hstep * fac;
          if (h < 1e-14 * std::max(1.0, std::abs(t)))
            throw Error(ErrorCode::StepUnderflow, "step size underflow at t=" + format_double(t));
          continue;
        }
        t = hits_target ? target : t + hstep;
        out.corrections.push_back(hstep * (d1 * k1_ + d3 * k3_ + d4 * k4_ + d5 * k5_ + d6 * k6_ + d7 * k7_));
        y.swap(ynew_);
        k1_.swap(k7_);
        const double fac = err == 0.0 ? 5.0 : std::min(5.0, std::max(0.2, 0.9 * std::pow(err, -0.2)));
        // a step clipped to a stop should not shrink the next proposal
        const bool clipped = hits_target && hstep < h;
        h = std::min(cfg_.max_step, clipped ? std::max(h, hstep * fac) : hstep * fac);
      }
      if (hits_target && next_stop_ < stops_.size() && target == stops_[next_stop_]) ++next_stop_;
      out.times.push_back(t);
      out.states.push_back(y);
      out.derivs.push_back(k1_);
    }
    return out;
  }

 private:
  static double tiny(double t) { return 1e-13 * std::max(1.0, std::abs(t)); }

  double current_target() const {
    if (next_stop_ < stops_.size() && stops_[next_stop_] < t1_) return stops_[next_stop_];
    return t1_;
  }

  double weighted_norm(const Vec& v, const Vec& y0, const Vec& y1) const {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double sc = cfg_.abs_tol + cfg_.rel_tol * std::max(std::abs(y0[i]), std::abs(y1[i]));
      const double r = v[i] / sc;
      acc += r * r;
    }
    return std::sqrt(acc / static_cast<double>(std::max<Eigen::Index>(1, v.size())));
  }

  double initial_step(double t, const Vec& y) {
    const double d0 = weighted_norm(y, y, y);
    const double d1 = weighted_norm(k1_, y, y);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, cfg_.max_step);
    tmp_ = y + h0 * k1_;
    f_(t + h0, tmp_, k2_);
    const double d2 = weighted_norm(k2_ - k1_, y, y) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    return std::min({100 * h0, h1, cfg_.max_step});
  }

  void rk4_step(double t, const Vec& y, double h) {
    // k1_ holds f(t, y)
    tmp_ = y + (0.5 * h) * k1_;
    f_(t + 0.5 * h, tmp_, k2_);
    tmp_ = y + (0.5 * h) * k2_;
    f_(t + 0.5 * h, tmp_, k3_);
    tmp_ = y + h * k3_;
    f_(t + h, tmp_, k4_);
    ynew_ = y + (h / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
  }

  double dopri_step(double t, const Vec& y, double h) {
    tmp_ = y + h * a21 * k1_;
    f_(t + c2 * h, tmp_, k2_);
    tmp_ = y + h * (a31 * k1_ + a32 * k2_);
    f_(t + c3 * h, tmp_, k3_);
    tmp_ = y + h * (a41 * k1_ + a42 * k2_ + a43 * k3_);
    f_(t + c4 * h, tmp_, k4_);
    tmp_ = y + h * (a51 * k1_ + a52 * k2_ + a53 * k3_ + a54 * k4_);
    f_(t + c5 * h, tmp_, k5_);
    tmp_ = y + h * (a61 * k1_ + a62 * k2_ + a63 * k3_ + a64 * k4_ + a65 * k5_);
    f_(t + h, tmp_, k6_);
    ynew_ = y + h * (a71 * k1_ + a73 * k3_ + a74 * k4_ + a75 * k5_ + a76 * k6_);
    f_(t + h, ynew_, k7_);
    err_ = h * (e1 * k1_ + e3 * k3_ + e4 * k4_ + e5 * k5_ + e6 * k6_ + e7 * k7_);
    for (Eigen::Index i = 0; i < ynew_.size(); ++i)
      if (!std::isfinite(ynew_[i])) return std::numeric_limits<double>::infinity();
    return weighted_norm(err_, y, ynew_);
  }

  const VectorField& f_;
  const IntegratorConfig& cfg_;
  double t1_;
  std::vector<double> stops_;
  std::size_t next_stop_ = 0;
  Vec k1_, k2_, k3_, k4_, k5_, k6_, k7_, tmp_, ynew_, err_;
};

}  // namespace

Trajectory integrate(const VectorField& field, const Vec& y0, double t0, double t1,
                     const IntegratorConfig& cfg, std::span<const double> stops) {
  cfg.validate();
  if (!(t1 >= t0)) throw Error(ErrorCode::InvalidArgument, "integration requires t1 >= t0");
  Stepper stepper(field, cfg, stops, t1);
  return stepper.run(y0, t0);
}

std::pair<Trajectory, MatrixTrajectory> integrate_variational(const VectorField& field,
                                                              const JacobianField& jacobian,
                                                              const Vec& y0, double t0, double t1,
                                                              const IntegratorConfig& cfg) {
  const auto n = y0.size();
  Vec state(n + n * n);
  state.head(n) = y0;
  Eigen::Map<Mat>(state.data() + n, n, n).setIdentity();
  Vec yb(n), fb(n);
  Mat jac(n, n);
  VectorField augmented = [&](double t, const Vec& s, Vec& ds) {
    yb = s.head(n);
    field(t, yb, fb);
    ds.head(n) = fb;
    jacobian(t, yb, jac);
    Eigen::Map<Mat>(ds.data() + n, n, n).noalias() =
        jac * Eigen::Map<const Mat>(s.data() + n, n, n);
  };
  auto aug = integrate(augmented, state, t0, t1, cfg);
  Trajectory flow;
  MatrixTrajectory fundamental;
  flow.times = aug.times;
  fundamental.times = aug.times;
  flow.states.reserve(aug.size());
  flow.derivs.reserve(aug.size());
  fundamental.matrices.reserve(aug.size());
  for (const auto& c : aug.corrections) flow.corrections.push_back(c.head(n));
  for (std::size_t k = 0; k < aug.size(); ++k) {
    flow.states.push_back(aug.states[k].head(n));
    flow.derivs.push_back(aug.derivs[k].head(n));
    fundamental.matrices.push_back(Eigen::Map<const Mat>(aug.states[k].data() + n, n, n));
  }
  return {std::move(flow), std::move(fundamental)};
}

double event_crossing(const Trajectory& traj, const EventFunction& g, int direction) {
  if (traj.size() < 2) throw Error(ErrorCode::NoCrossing, "trajectory has a single knot");
  double g_prev = g(traj.times[0], traj.states[0]);
  for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
    const double g_next = g(traj.times[k + 1], traj.states[k + 1]);
    const bool rising = g_prev < 0.0 && g_next >= 0.0;
    const bool falling = g_prev > 0.0 && g_next <= 0.0;
    if ((direction >= 0 && rising) || (direction <= 0 && falling)) {
      if (g_next == 0.0) return traj.times[k + 1];
      auto h = [&](double t) { return g(t, traj.dense(t)); };
      boost::uintmax_t max_iter = 200;
      boost::math::tools::eps_tolerance<double> tol(52);
      auto [lo, hi] = boost::math::tools::toms748_solve(h, traj.times[k], traj.times[k + 1],
                                                        g_prev, g_next, tol, max_iter);
      const double glo = std::abs(h(lo));
      const double ghi = std::abs(h(hi));
      return glo <= ghi ? lo : hi;
    }
    g_prev = g_next;
  }
  throw Error(ErrorCode::NoCrossing, "no sign change in the requested direction");
}

double simpson(const std::function<double(double)>& f, double a, double b, int n) {
  if (n < 2 || n % 2 != 0) throw Error(ErrorCode::InvalidArgument, "simpson needs even n >= 2");
  const double h = (b - a) / n;
  double odd = 0.0, even = 0.0;
  for (int i = 1; i < n; ++i) {
    const double v = f(a + i * h);
    (i % 2 ? odd : even) += v;
  }
  return h / 3.0 * (f(a) + f(b) + 4.0 * odd + 2.0 * even);
}

LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw Error(ErrorCode::InvalidArgument, "line fit needs >= 2 matching points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit fit;
  fit.slope = sxx > 0 ? sxy / sxx : 0.0;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = (sxx > 0 && syy > 0) ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

}  // namespace syncstab
