#include "syncstab/linform.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "syncstab/rng.hpp"

namespace syncstab {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw Error(ErrorCode::Config, std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw Error(ErrorCode::Config, "unknown key '" + key + "' in " + where);
}

Mat matrix_from_json(const json& j, int N, const char* what) {
  if (!j.is_array() || static_cast<int>(j.size()) != N)
    throw Error(ErrorCode::Config, std::string(what) + " must be an N x N array");
  Mat m(N, N);
  for (int i = 0; i < N; ++i) {
    if (!j[i].is_array() || static_cast<int>(j[i].size()) != N)
      throw Error(ErrorCode::Config, std::string(what) + " must be an N x N array");
    for (int k = 0; k < N; ++k) {
      if (!j[i][k].is_number()) throw Error(ErrorCode::Config, std::string(what) + " entries must be numbers");
      m(i, k) = j[i][k].get<double>();
    }
  }
  return m;
}

json matrix_to_json(const Mat& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    out.push_back(row);
  }
  return out;
}

json function_to_json(const PeriodicFunction& f) {
  if (const auto* s = f.series()) return s->to_json();
  return json("callable");
}

bool cauchy_converged(const std::vector<double>& seq, double tol) {
  if (seq.size() < 4) return false;
  const auto n = seq.size();
  for (std::size_t k = n - 3; k < n; ++k)
    if (!(std::abs(seq[k] - seq[k - 1]) < tol)) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------- Zeta

Zeta Zeta::zero(int N) {
  Zeta z;
  z.kind_ = ZetaKind::Zero;
  z.n_ = N;
  return z;
}

Zeta Zeta::constant(Mat c) {
  Zeta z;
  z.kind_ = ZetaKind::Constant;
  z.n_ = static_cast<int>(c.rows());
  z.c0_ = std::move(c);
  return z;
}

Zeta Zeta::trig(Mat c0, std::vector<MatrixHarmonic> terms) {
  Zeta z;
  z.kind_ = ZetaKind::TrigPeriodic;
  z.n_ = static_cast<int>(c0.rows());
  for (const auto& t : terms)
    if (t.cos_part.rows() != z.n_ || t.sin_part.rows() != z.n_ || t.cos_part.cols() != z.n_ ||
        t.sin_part.cols() != z.n_)
      throw Error(ErrorCode::InvalidArgument, "zeta harmonic has wrong shape");
  z.c0_ = std::move(c0);
  z.terms_ = std::move(terms);
  return z;
}

Zeta Zeta::random_trig(int N, double D, std::uint64_t seed, bool zero_row_sum) {
  if (!(D >= 0.0)) throw Error(ErrorCode::InvalidArgument, "zeta amplitude D must be >= 0");
  Rng rng(derive_seed(seed, "zeta"));
  Mat amp(N, N), phase(N, N);
  Eigen::MatrixXi freq(N, N);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      amp(i, j) = rng.uniform(-1.0, 1.0);
      phase(i, j) = rng.uniform(0.0, kTwoPi);
      freq(i, j) = rng.uniform() < 0.5 ? 1 : 2;
    }
  std::vector<MatrixHarmonic> terms;
  for (int k : {1, 2}) {
    MatrixHarmonic h{k, Mat::Zero(N, N), Mat::Zero(N, N)};
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j)
        if (freq(i, j) == k) {
          h.cos_part(i, j) = amp(i, j) * std::cos(phase(i, j));
          h.sin_part(i, j) = -amp(i, j) * std::sin(phase(i, j));
        }
    if (zero_row_sum) {
      for (int i = 0; i < N; ++i) {
        h.cos_part.row(i).array() -= h.cos_part.row(i).mean();
        h.sin_part.row(i).array() -= h.sin_part.row(i).mean();
      }
    }
    terms.push_back(std::move(h));
  }
  Zeta z = trig(Mat::Zero(N, N), std::move(terms));
  const double raw = z.sampled_norm(0.0, 1.0, 1024);
  const double scale = raw > 0.0 ? D / raw : 0.0;
  for (auto& h : z.terms_) {
    h.cos_part *= scale;
    h.sin_part *= scale;
  }
  z.kind_ = D == 0.0 ? ZetaKind::Zero : ZetaKind::RandomTrig;
  z.D_ = D;
  z.seed_ = seed;
  z.zero_row_sum_ = zero_row_sum;
  if (z.kind_ == ZetaKind::Zero) z.terms_.clear();
  return z;
}

Zeta Zeta::callable(int N, Callable fn) {
  Zeta z;
  z.kind_ = ZetaKind::Callable;
  z.n_ = N;
  z.fn_ = std::move(fn);
  return z;
}

void Zeta::eval(double t, Mat& out) const {
  switch (kind_) {
    case ZetaKind::Zero:
      out.setZero(n_, n_);
      return;
    case ZetaKind::Constant:
      out = c0_;
      return;
    case ZetaKind::TrigPeriodic:
    case ZetaKind::RandomTrig:
      out = c0_;
      for (const auto& h : terms_) {
        const double w = kTwoPi * h.k * t;
        out += std::cos(w) * h.cos_part + std::sin(w) * h.sin_part;
      }
      return;
    case ZetaKind::Callable:
      out.resize(n_, n_);
      fn_(t, out);
      return;
  }
}

Mat Zeta::operator()(double t) const {
  Mat m;
  eval(t, m);
  return m;
}

double Zeta::sampled_norm(double t0, double t1, int samples) const {
  if (kind_ == ZetaKind::Zero) return 0.0;
  Mat m;
  double best = 0.0;
  for (int k = 0; k <= samples; ++k) {
    eval(t0 + (t1 - t0) * k / samples, m);
    best = std::max(best, m.cwiseAbs().maxCoeff());
  }
  return best;
}

Zeta Zeta::from_json(const json& j, int N) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string())
    throw Error(ErrorCode::Config, "zeta needs a string 'kind'");
  const auto kind = j["kind"].get<std::string>();
  try {
    if (kind == "zero") {
      reject_unknown(j, {"kind"}, "zeta");
      return zero(N);
    }
    if (kind == "constant") {
      reject_unknown(j, {"kind", "matrix"}, "zeta");
      return constant(matrix_from_json(j.at("matrix"), N, "zeta.matrix"));
    }
    if (kind == "trig-periodic") {
      reject_unknown(j, {"kind", "const", "terms"}, "zeta");
      Mat c0 = j.contains("const") ? matrix_from_json(j["const"], N, "zeta.const") : Mat::Zero(N, N);
      std::vector<MatrixHarmonic> terms;
      if (j.contains("terms")) {
        for (const auto& t : j["terms"]) {
          reject_unknown(t, {"k", "cos", "sin"}, "zeta term");
          MatrixHarmonic h;
          h.k = t.at("k").get<int>();
          if (h.k < 1) throw Error(ErrorCode::Config, "zeta harmonic k must be >= 1");
          h.cos_part = t.contains("cos") ? matrix_from_json(t["cos"], N, "zeta.cos") : Mat::Zero(N, N);
          h.sin_part = t.contains("sin") ? matrix_from_json(t["sin"], N, "zeta.sin") : Mat::Zero(N, N);
          terms.push_back(std::move(h));
        }
      }
      return trig(std::move(c0), std::move(terms));
    }
    if (kind == "random-trig") {
      reject_unknown(j, {"kind", "D", "seed", "zero_row_sum"}, "zeta");
      const double D = j.at("D").get<double>();
      if (!(D >= 0.0) || !std::isfinite(D)) throw Error(ErrorCode::Config, "zeta.D must be >= 0");
      const auto seed = j.contains("seed") ? j["seed"].get<std::uint64_t>() : 0;
      const bool zrs = j.contains("zero_row_sum") && j["zero_row_sum"].get<bool>();
      return random_trig(N, D, seed, zrs);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("zeta: ") + e.what());
  }
  throw Error(ErrorCode::Config, "unknown zeta kind '" + kind + "'");
}

json Zeta::to_json() const {
  switch (kind_) {
    case ZetaKind::Zero:
      return {{"kind", "zero"}};
    case ZetaKind::Constant:
      return {{"kind", "constant"}, {"matrix", matrix_to_json(c0_)}};
    case ZetaKind::TrigPeriodic: {
      json terms = json::array();
      for (const auto& h : terms_)
        terms.push_back({{"k", h.k}, {"cos", matrix_to_json(h.cos_part)}, {"sin", matrix_to_json(h.sin_part)}});
      return {{"kind", "trig-periodic"}, {"const", matrix_to_json(c0_)}, {"terms", terms}};
    }
    case ZetaKind::RandomTrig:
      return {{"kind", "random-trig"}, {"D", D_}, {"seed", seed_}, {"zero_row_sum", zero_row_sum_}};
    case ZetaKind::Callable:
      return {{"kind", "callable"}};
  }
  return {};
}

// ------------------------------------------------------ linear system

PerturbedLinearSystem::PerturbedLinearSystem(int N, PeriodicFunction b,
                                             std::vector<PeriodicFunction> a, Zeta zeta,
                                             double t_prime)
    : n_(N), b_(std::move(b)), a_(std::move(a)), zeta_(std::move(zeta)), t_prime_(t_prime) {
  if (N < 2) throw Error(ErrorCode::InvalidArgument, "linear system needs N >= 2");
  if (static_cast<int>(a_.size()) != N)
    throw Error(ErrorCode::InvalidArgument, "need exactly N coefficient rows a_j");
  if (zeta_.N() != N) throw Error(ErrorCode::InvalidArgument, "zeta dimension mismatch");
  if (!std::isfinite(t_prime)) throw Error(ErrorCode::InvalidArgument, "t_prime must be finite");
}

PerturbedLinearSystem PerturbedLinearSystem::from_json(const json& j) {
  reject_unknown(j, {"N", "b", "a", "zeta", "t_prime"}, "linear");
  try {
    if (!j.contains("N") || !j["N"].is_number_integer())
      throw Error(ErrorCode::Config, "linear.N must be an integer");
    const int N = j["N"].get<int>();
    if (N < 2) throw Error(ErrorCode::Config, "linear.N must be >= 2");
    if (!j.contains("b")) throw Error(ErrorCode::Config, "missing linear.b");
    PeriodicFunction b(TrigSeries::from_json(j["b"]));
    if (!j.contains("a") || !j["a"].is_array() || static_cast<int>(j["a"].size()) != N)
      throw Error(ErrorCode::Config, "linear.a must be an array of N periodic functions");
    std::vector<PeriodicFunction> a;
    for (const auto& aj : j["a"]) a.emplace_back(TrigSeries::from_json(aj));
    Zeta z = j.contains("zeta") ? Zeta::from_json(j["zeta"], N) : Zeta::zero(N);
    double tp = 0.0;
    if (j.contains("t_prime")) {
      if (!j["t_prime"].is_number()) throw Error(ErrorCode::Config, "linear.t_prime must be a number");
      tp = j["t_prime"].get<double>();
    }
    return PerturbedLinearSystem(N, std::move(b), std::move(a), std::move(z), tp);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("linear: ") + e.what());
  }
}

json PerturbedLinearSystem::to_json() const {
  json a = json::array();
  for (const auto& f : a_) a.push_back(function_to_json(f));
  return {{"N", n_}, {"b", function_to_json(b_)}, {"a", a}, {"zeta", zeta_.to_json()}, {"t_prime", t_prime_}};
}

PerturbedLinearSystem PerturbedLinearSystem::with_t_prime(double t) const {
  auto copy = *this;
  copy.t_prime_ = t;
  return copy;
}

PerturbedLinearSystem PerturbedLinearSystem::with_zeta(Zeta z) const {
  return PerturbedLinearSystem(n_, b_, a_, std::move(z), t_prime_);
}

void PerturbedLinearSystem::a(double t, Vec& out) const {
  out.resize(n_);
  for (int j = 0; j < n_; ++j) out[j] = a_[j](t);
}

Mat PerturbedLinearSystem::matrix(double t) const {
  Vec av;
  a(t, av);
  Mat m = zeta_(t);
  m.diagonal().array() += b(t);
  m.rowwise() += av.transpose();
  return m;
}

void PerturbedLinearSystem::apply(double t, const Vec& y, Vec& out) const {
  double ay = 0.0;
  for (int j = 0; j < n_; ++j) ay += a_[j](t) * y[j];
  out = b(t) * y;
  out.array() += ay;
  if (!zeta_.is_zero()) {
    zeta_.eval(t, scratch_);
    out.noalias() += scratch_ * y;
  }
}

double PerturbedLinearSystem::e_factor(double t, double s) const { return std::exp(b_.integral(s, t)); }

double PerturbedLinearSystem::balance_integral(double s, double t) const {
  double acc = b_.integral(s, t);
  for (const auto& f : a_) acc += f.integral(s, t);
  return acc;
}

double PerturbedLinearSystem::p_factor(double t, double s) const {
  return std::exp(balance_integral(s, t));
}

json StabilityConstants::to_json() const {
  return {{"alpha", alpha},       {"beta", beta}, {"c_b", c_b}, {"c_a", c_a}, {"D", D},
          {"D_star_search", std::isfinite(D_star_search) ? json(D_star_search) : json(nullptr)},
          {"zero_sum_residual", zero_sum_residual}};
}

StabilityConstants check_Hstab(const PerturbedLinearSystem& sys, int quad_points) {
  if (quad_points < 2 || quad_points % 2) quad_points += quad_points % 2 ? 1 : 2;
  StabilityConstants c;
  Vec av;
  auto balance = [&](double s) {
    sys.a(s, av);
    return sys.b(s) + av.sum();
  };
  const double residual = simpson(balance, 0.0, 1.0, quad_points);
  const double int_b = simpson([&](double s) { return sys.b(s); }, 0.0, 1.0, quad_points);
  c.alpha = -int_b;
  c.zero_sum_residual = std::abs(residual);
  if (c.zero_sum_residual > 1e-6)
    throw Error(ErrorCode::HstabViolated,
                "integral of b + sum a over a period is " + format_double(residual));
  if (!(c.alpha > 1e-6))
    throw Error(ErrorCode::HstabViolated, "alpha = " + format_double(c.alpha) + " is not positive");
  constexpr int kGrid = 1024;
  for (int k = 0; k < kGrid; ++k) {
    const double s = static_cast<double>(k) / kGrid;
    sys.a(s, av);
    c.c_b = std::max(c.c_b, std::abs(sys.b(s)));
    c.c_a = std::max(c.c_a, av.cwiseAbs().sum());
  }
  c.beta = 0.5 * c.alpha;
  c.D = sys.zeta().kind() == ZetaKind::Callable ? std::numeric_limits<double>::quiet_NaN()
                                                 : sys.zeta().sampled_norm();
  return c;
}

Mat fundamental_R(const PerturbedLinearSystem& sys, double t_prime, double t,
                  const IntegratorConfig& cfg) {
  if (t < t_prime) throw Error(ErrorCode::InvalidArgument, "fundamental_R needs t >= t_prime");
  const int n = sys.N();
  Vec state(n * n);
  Eigen::Map<Mat>(state.data(), n, n).setIdentity();
  if (t == t_prime) return Eigen::Map<Mat>(state.data(), n, n);
  Vec col(n), out(n);
  VectorField f = [&](double s, const Vec& y, Vec& dy) {
    for (int c = 0; c < n; ++c) {
      col = y.segment(c * n, n);
      sys.apply(s, col, out);
      dy.segment(c * n, n) = out;
    }
  };
  auto tr = integrate(f, state, t_prime, t, cfg);
  return Eigen::Map<const Mat>(tr.final_state().data(), n, n);
}

Trajectory propagate(const PerturbedLinearSystem& sys, const Vec& Y, double t_prime, double t,
                     const IntegratorConfig& cfg, std::span<const double> stops) {
  VectorField f = [&](double s, const Vec& y, Vec& dy) { sys.apply(s, y, dy); };
  return integrate(f, Y, t_prime, t, cfg, stops);
}

// -------------------------------------------------------------- Delta

double delta_periodic(const PerturbedLinearSystem& sys, double beta, double D, double L, double t) {
  const double alpha = -sys.b_fn().period_integral();
  if (!(beta > 0.0 && beta < alpha))
    throw Error(ErrorCode::BetaOutOfRange,
                "beta=" + format_double(beta) + " outside (0, alpha=" + format_double(alpha) + ")");
  if (D == 0.0 || L == 0.0) return 0.0;
  const auto& b = sys.b_fn();
  auto inner = [&](double s) { return std::exp(b.integral(s, t + 1.0) + beta * (t + 1.0 - s)); };
  const double I =
      boost::math::quadrature::gauss_kronrod<double, 31>::integrate(inner, t, t + 1.0, 15, 1e-14);
  return D * L * I / (1.0 - std::exp(beta - alpha));
}

DeltaAnalysis analyze_delta(const PerturbedLinearSystem& sys, double beta, double D, double L,
                            int samples) {
  DeltaAnalysis r;
  r.alpha = -sys.b_fn().period_integral();
  r.beta = beta;
  r.D = D;
  r.L = L;
  r.min_delta = std::numeric_limits<double>::infinity();
  constexpr double h = 5e-4;
  auto delta = [&](double t) { return delta_periodic(sys, beta, D, L, t); };
  for (int k = 0; k < samples; ++k) {
    const double t = static_cast<double>(k) / samples;
    const double v = delta(t);
    r.grid.push_back(t);
    r.values.push_back(v);
    r.min_delta = std::min(r.min_delta, v);
    r.max_delta = std::max(r.max_delta, v);
    r.periodicity_residual = std::max(r.periodicity_residual, std::abs(delta(t + 1.0) - v));
    const double deriv =
        (-delta(t + 2 * h) + 8 * delta(t + h) - 8 * delta(t - h) + delta(t - 2 * h)) / (12 * h);
    r.ode_residual = std::max(r.ode_residual, std::abs(deriv - ((sys.b(t) + beta) * v + D * L)));
  }
  r.positive = D > 0.0 && L > 0.0 ? r.min_delta > 0.0 : r.max_delta == 0.0;
  r.D0 = r.max_delta > 0.0 ? D / r.max_delta : std::numeric_limits<double>::infinity();
  r.below_one = r.max_delta < 1.0;
  return r;
}

json DeltaAnalysis::to_json() const {
  return {{"alpha", alpha},
          {"beta", beta},
          {"D", D},
          {"L", L},
          {"min_delta", min_delta},
          {"max_delta", max_delta},
          {"periodicity_residual", periodicity_residual},
          {"ode_residual", ode_residual},
          {"D0", std::isfinite(D0) ? json(D0) : json(nullptr)},
          {"positive", positive},
          {"below_one", below_one}};
}

void DeltaAnalysis::write_csv(std::ostream& os) const {
  os << "t,delta\n";
  for (std::size_t k = 0; k < grid.size(); ++k)
    os << format_double(grid[k]) << ',' << format_double(values[k]) << '\n';
}

// ---------------------------------------------------------- auxiliary

AuxiliaryState AuxiliaryState::zero(int N) { return {Vec::Zero(N), 0.0}; }
AuxiliaryState AuxiliaryState::along_W(int N, double c) { return {Vec::Constant(N, c), 0.0}; }

AuxiliaryState AuxiliaryTrajectory::at(double t) const {
  const Vec s = traj.dense(t);
  const auto n = s.size() - 1;
  return {s.head(n), s[n]};
}

namespace {

// Several auxiliary systems sharing coefficients, packed column by column in
// blocks of N+1; column c is forced by forcings[c] (possibly zero).
class AuxBlock {
 public:
  AuxBlock(const PerturbedLinearSystem& sys, std::vector<Vec> forcings)
      : sys_(sys), n_(sys.N()), forcings_(std::move(forcings)) {
    av_.resize(n_);
    v_.resize(n_);
    u_.resize(n_);
  }

  int width() const { return static_cast<int>(forcings_.size()) * (n_ + 1); }

  void operator()(double t, const Vec& y, Vec& dy) {
    const double b = sys_.b(t);
    sys_.a(t, av_);
    const double sa = av_.sum();
    const double e = sys_.e_factor(t, sys_.t_prime());
    const bool has_zeta = !sys_.zeta().is_zero();
    if (has_zeta) sys_.zeta().eval(t, zeta_);
    for (std::size_t c = 0; c < forcings_.size(); ++c) {
      const auto off = static_cast<Eigen::Index>(c) * (n_ + 1);
      const auto Z = y.segment(off, n_);
      const double z = y[off + n_];
      v_ = Z;
      if (forcings_[c].size()) v_ += e * forcings_[c];
      auto dZ = dy.segment(off, n_);
      dZ = b * Z;
      if (has_zeta) {
        u_ = v_.array() + z;
        dZ.noalias() += zeta_ * u_;
      }
      dy[off + n_] = (b + sa) * z + av_.dot(v_);
    }
  }

 private:
  const PerturbedLinearSystem& sys_;
  int n_;
  std::vector<Vec> forcings_;
  Vec av_, v_, u_;
  Mat zeta_;
};

}  // namespace

AuxiliaryTrajectory solve_auxiliary(const PerturbedLinearSystem& sys, const Vec& Y,
                                    const AuxiliaryState& Z0, double t_end,
                                    const IntegratorConfig& cfg, std::span<const double> stops) {
  const int n = sys.N();
  if (Y.size() != n || Z0.Z_star.size() != n)
    throw Error(ErrorCode::InvalidArgument, "auxiliary state dimension mismatch");
  if (!(t_end > sys.t_prime())) throw Error(ErrorCode::InvalidArgument, "t_end must exceed t'");
  AuxBlock block(sys, {Y});
  Vec s0(n + 1);
  s0.head(n) = Z0.Z_star;
  s0[n] = Z0.z_last;
  VectorField f = [&](double t, const Vec& y, Vec& dy) { block(t, y, dy); };
  return {integrate(f, s0, sys.t_prime(), t_end, cfg, stops), Y, sys.t_prime()};
}

Vec reconstruct(const PerturbedLinearSystem& sys, const Vec& Y, const AuxiliaryState& s, double t) {
  Vec u = s.Z_star + sys.e_factor(t, sys.t_prime()) * Y;
  u.array() += s.z_last;
  return u;
}

HIntegral h_integral(const PerturbedLinearSystem& sys, double t_prime, double t,
                     const IntegratorConfig& cfg) {
  if (t < t_prime) throw Error(ErrorCode::InvalidArgument, "h_integral needs t >= t'");
  HIntegral out;
  if (t == t_prime) return out;
  const auto local = sys.with_t_prime(t_prime);
  const int n = sys.N();
  AuxBlock block(local, {Vec()});
  Vec av(n);
  VectorField f = [&](double s, const Vec& y, Vec& dy) {
    block(s, y, dy);
    local.a(s, av);
    // q' = <a, X*> P(t', s)
    dy[n + 1] = av.dot(y.head(n)) * local.p_factor(t_prime, s);
  };
  Vec s0 = Vec::Zero(n + 2);
  s0.head(n).setOnes();
  auto tr = integrate(f, s0, t_prime, t, cfg);
  out.value = tr.final_state()[n] / local.p_factor(t, t_prime);
  out.value_quadrature = tr.final_state()[n + 1];
  if (std::abs(out.value) < 1e-12)
    throw Error(ErrorCode::HNearZero, "|H(t,t')| = " + format_double(std::abs(out.value)) +
                                          " at t=" + format_double(t) + "; extend the horizon");
  const double floor = 0.1 * std::abs(out.value);
  out.T_W_hat = 0.0;
  for (std::size_t k = tr.size(); k-- > 0;) {
    const double Hk = tr.states[k][n] / local.p_factor(tr.times[k], t_prime);
    if (std::abs(Hk) < floor) {
      out.T_W_hat = (k + 1 < tr.size() ? tr.times[k + 1] : tr.times[k]) - t_prime;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- psi

int default_psi_periods(double alpha) {
  return std::max(10, static_cast<int>(std::ceil(24.0 / alpha)));
}

namespace {

struct PsiBatch {
  std::vector<std::vector<double>> ratios;  // per forcing, per period
  double xW_final = 0.0;
  double H_final = 0.0;
};

// Homogeneous auxiliary run from W jointly with zero-start runs forced by each
// Y; the k-th approximant of psi(Y) is z^Y(t'+k) / x^W(t'+k).
PsiBatch psi_batch(const PerturbedLinearSystem& sys, const std::vector<Vec>& forcings, int periods,
                   const IntegratorConfig& cfg) {
  const int n = sys.N();
  std::vector<Vec> cols;
  cols.push_back(Vec());
  for (const auto& Y : forcings) {
    if (Y.size() != n) throw Error(ErrorCode::InvalidArgument, "psi: vector dimension mismatch");
    cols.push_back(Y);
  }
  AuxBlock block(sys, cols);
  Vec s0 = Vec::Zero(block.width());
  s0.head(n).setOnes();
  std::vector<double> stops;
  for (int k = 1; k <= periods; ++k) stops.push_back(sys.t_prime() + k);
  VectorField f = [&](double t, const Vec& y, Vec& dy) { block(t, y, dy); };
  auto tr = integrate(f, s0, sys.t_prime(), sys.t_prime() + periods, cfg, stops);
  PsiBatch out;
  out.ratios.assign(forcings.size(), {});
  std::size_t knot = 0;
  for (double s : stops) {
    while (tr.times[knot] != s) ++knot;
    const Vec& st = tr.states[knot];
    const double xW = st[n];
    for (std::size_t c = 0; c < forcings.size(); ++c)
      out.ratios[c].push_back(st[(c + 1) * (n + 1) + n] / xW);
  }
  out.xW_final = tr.final_state()[n];
  out.H_final = out.xW_final / sys.p_factor(sys.t_prime() + periods, sys.t_prime());
  if (std::abs(out.H_final) < 1e-12)
    throw Error(ErrorCode::HNearZero, "H(t,t') vanishes at the end of the psi horizon");
  return out;
}

void check_horizon(const PerturbedLinearSystem& sys, int periods, double& alpha) {
  alpha = check_Hstab(sys).alpha;
  if (periods < 10.0 / alpha)
    throw Error(ErrorCode::InvalidArgument, "psi horizon " + std::to_string(periods) +
                                                " periods is shorter than 10/alpha");
}

double psi_tolerance(const Vec& Y) { return 1e-7 * std::max(1.0, Y.cwiseAbs().maxCoeff()); }

}  // namespace

PsiResult psi(const PerturbedLinearSystem& sys, const Vec& Y, int periods,
              const IntegratorConfig& cfg) {
  double alpha = 0.0;
  check_horizon(sys, periods, alpha);
  auto batch = psi_batch(sys, {Y}, periods, cfg);
  PsiResult r;
  r.approximants = std::move(batch.ratios.front());
  r.value = r.approximants.back();
  r.H_final = batch.H_final;
  r.converged = cauchy_converged(r.approximants, psi_tolerance(Y));
  if (!r.converged)
    throw PsiNotConverged("psi approximants did not settle within " + std::to_string(periods) +
                              " periods",
                          r.approximants);
  return r;
}

PsiResult psi(const PerturbedLinearSystem& sys, const Vec& Y, const IntegratorConfig& cfg) {
  return psi(sys, Y, default_psi_periods(check_Hstab(sys).alpha), cfg);
}

PsiCovector psi_covector(const PerturbedLinearSystem& sys, int periods, const IntegratorConfig& cfg) {
  double alpha = 0.0;
  check_horizon(sys, periods, alpha);
  const int n = sys.N();
  std::vector<Vec> units;
  for (int j = 0; j < n; ++j) units.push_back(Vec::Unit(n, j));
  auto batch = psi_batch(sys, units, periods, cfg);
  PsiCovector out;
  out.ell.resize(n);
  out.converged = true;
  for (std::size_t k = 0; k < static_cast<std::size_t>(periods); ++k) {
    Vec v(n);
    for (int j = 0; j < n; ++j) v[j] = batch.ratios[j][k];
    out.approximants.push_back(v);
  }
  for (int j = 0; j < n; ++j) {
    out.ell[j] = batch.ratios[j].back();
    out.converged = out.converged && cauchy_converged(batch.ratios[j], 1e-7);
  }
  if (!out.converged) {
    std::vector<double> norms;
    for (const auto& v : out.approximants) norms.push_back(v.norm());
    throw PsiNotConverged("psi covector did not settle", norms);
  }
  return out;
}

NormalizingSolution normalizing_solution(const PerturbedLinearSystem& sys,
                                         const std::vector<Vec>& candidates, double horizon,
                                         const IntegratorConfig& cfg) {
  const double alpha = check_Hstab(sys).alpha;
  if (horizon < 20.0 / alpha - 1e-12)
    throw Error(ErrorCode::InvalidArgument, "normalizing horizon must be >= 20/alpha");
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const Vec& V0 = candidates[c];
    if (V0.size() != sys.N() || V0.norm() == 0.0) continue;
    Trajectory tr;
    try {
      tr = propagate(sys, V0, sys.t_prime(), sys.t_prime() + horizon, cfg);
    } catch (const Error&) {
      continue;
    }
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (const auto& s : tr.states) {
      const double v = s.cwiseAbs().maxCoeff();
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (lo > 0.0 && std::isfinite(hi) && std::log(hi / lo) <= 1.0)
      return {V0, c, lo, hi, horizon};
  }
  throw Error(ErrorCode::NotFound, "no candidate stays bounded away from 0 and infinity");
}

LinearForm::LinearForm(Vec ell_raw, Vec V0)
    : ell_raw_(std::move(ell_raw)), V0_(std::move(V0)), denom_(ell_raw_.dot(V0_)) {
  if (!(std::abs(denom_) > 1e-10))
    throw Error(ErrorCode::PsiVanishing, "|psi(V0)| = " + format_double(std::abs(denom_)));
}

LinearForm make_linear_form(const PerturbedLinearSystem& sys, const Vec& V0, int periods,
                            const IntegratorConfig& cfg) {
  return LinearForm(psi_covector(sys, periods, cfg).ell, V0);
}

double linear_form_L(const PerturbedLinearSystem& sys, const Vec& Y, const Vec& V0, int periods,
                     const IntegratorConfig& cfg) {
  double alpha = 0.0;
  check_horizon(sys, periods, alpha);
  auto batch = psi_batch(sys, {Y, V0}, periods, cfg);
  const double den = batch.ratios[1].back();
  if (!(std::abs(den) > 1e-10))
    throw Error(ErrorCode::PsiVanishing, "|psi(V0)| = " + format_double(std::abs(den)));
  std::vector<double> q;
  for (std::size_t k = 0; k < batch.ratios[0].size(); ++k)
    q.push_back(batch.ratios[0][k] / batch.ratios[1][k]);
  if (!cauchy_converged(q, psi_tolerance(Y)))
    throw PsiNotConverged("linear form quotient did not settle", q);
  return batch.ratios[0].back() / den;
}

// ----------------------------------------------------------- decompose

json DecompositionResult::to_json() const {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"mode", mode == DecomposeMode::General ? "general" : "normalizing"},
          {"psi_value", psi_value},
          {"alpha", alpha},
          {"requested_beta", requested_beta},
          {"identity_residual", identity_residual},
          {"fitted_beta", num(fitted_beta)},
          {"fit_r2", num(fit_r2)},
          {"stable_vanishes", stable_vanishes},
          {"certified", certified},
          {"samples", times.size()}};
}

void DecompositionResult::write_stable_csv(std::ostream& os) const {
  os << "t,norm\n";
  for (std::size_t k = 0; k < times.size(); ++k)
    os << format_double(times[k]) << ',' << format_double(stable_norms[k]) << '\n';
}

namespace {

void finish_fit(DecompositionResult& r, double t0, double t1, double ynorm) {
  double peak = 0.0;
  for (double v : r.stable_norms) peak = std::max(peak, v);
  if (peak <= 1e-10 * ynorm) {
    r.stable_vanishes = true;
    r.fitted_beta = std::numeric_limits<double>::quiet_NaN();
    r.fit_r2 = std::numeric_limits<double>::quiet_NaN();
    r.certified = r.identity_residual < 1e-7;
    return;
  }
  const double mid = t0 + 0.5 * (t1 - t0);
  std::vector<double> xs, ys;
  for (std::size_t k = 0; k < r.times.size(); ++k)
    if (r.times[k] >= mid && r.stable_norms[k] > 1e-8 * ynorm) {
      xs.push_back(r.times[k]);
      ys.push_back(std::log(r.stable_norms[k]));
    }
  if (xs.size() < 4) {
    // decayed below resolution before the tail; fit what is resolvable
    xs.clear();
    ys.clear();
    for (std::size_t k = 0; k < r.times.size(); ++k)
      if (r.stable_norms[k] > 1e-8 * ynorm) {
        xs.push_back(r.times[k]);
        ys.push_back(std::log(r.stable_norms[k]));
      }
  }
  if (xs.size() < 2) {
    r.fitted_beta = std::numeric_limits<double>::quiet_NaN();
    r.fit_r2 = 0.0;
    r.certified = false;
    return;
  }
  const auto fit = fit_line(xs, ys);
  r.fitted_beta = -fit.slope;
  r.fit_r2 = fit.r2;
  r.certified = r.identity_residual < 1e-7 && r.fitted_beta >= r.requested_beta && r.fit_r2 > 0.99;
}

}  // namespace

DecompositionResult decompose(const PerturbedLinearSystem& sys, const Vec& Y,
                              const DecomposeOptions& opts, const IntegratorConfig& cfg) {
  const int n = sys.N();
  if (Y.size() != n) throw Error(ErrorCode::InvalidArgument, "decompose: dimension mismatch");
  const double ynorm = Y.norm();
  if (ynorm == 0.0) throw Error(ErrorCode::InvalidArgument, "decompose: Y must be nonzero");
  const auto hs = check_Hstab(sys);
  DecompositionResult r;
  r.mode = opts.mode;
  r.alpha = hs.alpha;
  r.requested_beta = opts.beta.value_or(0.5 * hs.alpha);
  if (!(r.requested_beta > 0.0 && r.requested_beta < hs.alpha))
    throw Error(ErrorCode::BetaOutOfRange, "requested beta outside (0, alpha)");
  const int periods = opts.psi_periods > 0 ? opts.psi_periods : default_psi_periods(hs.alpha);
  const double t0 = sys.t_prime();
  const double t1 = opts.s_end.value_or(t0 + 10.0 / hs.alpha);
  if (!(t1 > t0)) throw Error(ErrorCode::InvalidArgument, "s_end must exceed t'");
  std::vector<double> stops;
  for (int k = 1; t0 + k * opts.sample_step < t1; ++k) stops.push_back(t0 + k * opts.sample_step);

  Vec av(n), tmp(n);
  if (opts.mode == DecomposeMode::General) {
    r.psi_value = psi(sys, Y, periods, cfg).value;
    // [R Y | R 1 | auxiliary with Z0 = -psi W forced by Y]
    AuxBlock block(sys, {Y});
    VectorField f = [&](double t, const Vec& y, Vec& dy) {
      sys.apply(t, y.segment(0, n), tmp);
      dy.segment(0, n) = tmp;
      sys.apply(t, y.segment(n, n), tmp);
      dy.segment(n, n) = tmp;
      Vec aux = y.segment(2 * n, n + 1);
      Vec daux(n + 1);
      block(t, aux, daux);
      dy.segment(2 * n, n + 1) = daux;
    };
    Vec s0(3 * n + 1);
    s0.segment(0, n) = Y;
    s0.segment(n, n).setOnes();
    s0.segment(2 * n, n).setConstant(-r.psi_value);
    s0[3 * n] = 0.0;
    auto tr = integrate(f, s0, t0, t1, cfg, stops);
    std::size_t knot = 0;
    auto sample = [&](double t) {
      while (tr.times[knot] != t) ++knot;
      const Vec& st = tr.states[knot];
      AuxiliaryState as{st.segment(2 * n, n), st[3 * n]};
      r.times.push_back(t);
      r.full.push_back(st.segment(0, n));
      r.neutral.push_back(r.psi_value * st.segment(n, n));
      r.stable.push_back(reconstruct(sys, Y, as, t));
    };
    sample(t0);
    for (double s : stops) sample(s);
    sample(t1);
  } else {
    Vec V0;
    if (opts.V0) {
      V0 = *opts.V0;
    } else {
      std::vector<Vec> candidates{Vec::Ones(n)};
      for (int j = 0; j < n; ++j) candidates.push_back(Vec::Unit(n, j));
      candidates.push_back(Y);
      V0 = normalizing_solution(sys, candidates, 20.0 / hs.alpha, cfg).V0;
    }
    const auto form = make_linear_form(sys, V0, periods, cfg);
    r.psi_value = form(Y);
    VectorField f = [&](double t, const Vec& y, Vec& dy) {
      for (int blk = 0; blk < 3; ++blk) {
        sys.apply(t, y.segment(blk * n, n), tmp);
        dy.segment(blk * n, n) = tmp;
      }
    };
    Vec s0(3 * n);
    s0.segment(0, n) = Y;
    s0.segment(n, n) = V0;
    s0.segment(2 * n, n) = Y - r.psi_value * V0;
    auto tr = integrate(f, s0, t0, t1, cfg, stops);
    std::size_t knot = 0;
    auto sample = [&](double t) {
      while (tr.times[knot] != t) ++knot;
      const Vec& st = tr.states[knot];
      r.times.push_back(t);
      r.full.push_back(st.segment(0, n));
      r.neutral.push_back(r.psi_value * st.segment(n, n));
      r.stable.push_back(st.segment(2 * n, n));
    };
    sample(t0);
    for (double s : stops) sample(s);
    sample(t1);
  }
  for (std::size_t k = 0; k < r.times.size(); ++k) {
    r.stable_norms.push_back(r.stable[k].norm());
    r.identity_residual =
        std::max(r.identity_residual, (r.full[k] - r.neutral[k] - r.stable[k]).norm() / ynorm);
  }
  finish_fit(r, t0, t1, ynorm);
  return r;
}

DStarSearch d_star_search(const PerturbedLinearSystem& base, double beta, std::uint64_t seed,
                          double D_max, int iterations, const IntegratorConfig& cfg) {
  const int n = base.N();
  Rng rng(derive_seed(seed, "dstar-probe"));
  Vec Y(n);
  for (int j = 0; j < n; ++j) Y[j] = rng.uniform(-1.0, 1.0);
  DStarSearch out;
  out.beta = beta;
  auto passes = [&](double D) {
    bool ok = false;
    try {
      DecomposeOptions opts;
      opts.beta = beta;
      ok = decompose(base.with_zeta(Zeta::random_trig(n, D, seed)), Y, opts, cfg).certified;
    } catch (const Error&) {
      ok = false;
    }
    out.trials.emplace_back(D, ok);
    return ok;
  };
  if (passes(D_max)) {
    out.D_star = D_max;
    return out;
  }
  double lo = 0.0, hi = D_max;
  for (int it = 0; it < iterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    (passes(mid) ? lo : hi) = mid;
  }
  out.D_star = lo;
  return out;
}

double psi_invariance_check(const PerturbedLinearSystem& sys, const Vec& Y, double s,
                            const IntegratorConfig& cfg) {
  const double t = sys.t_prime();
  if (s < t) throw Error(ErrorCode::InvalidArgument, "invariance check needs s >= t'");
  const double lhs = psi(sys, Y, cfg).value;
  const Vec Ys = s == t ? Y : Vec(propagate(sys, Y, t, s, cfg).final_state());
  const double rhs = psi(sys.with_t_prime(s), Ys, cfg).value;
  return std::abs(lhs - rhs);
}

double linear_form_invariance(const PerturbedLinearSystem& sys, const Vec& Y, const Vec& V0,
                              double s, const IntegratorConfig& cfg) {
  const double t = sys.t_prime();
  if (s < t) throw Error(ErrorCode::InvalidArgument, "invariance check needs s >= t'");
  const int periods = default_psi_periods(check_Hstab(sys).alpha);
  const double lhs = linear_form_L(sys, Y, V0, periods, cfg);
  if (s == t) return 0.0;
  const Vec Ys = propagate(sys, Y, t, s, cfg).final_state();
  const Vec Vs = propagate(sys, V0, t, s, cfg).final_state();
  const double rhs = linear_form_L(sys.with_t_prime(s), Ys, Vs, periods, cfg);
  return std::abs(lhs - rhs);
}

}  // namespace syncstab
