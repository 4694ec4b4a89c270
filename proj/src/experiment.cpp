#include "syncstab/experiment.hpp"

#include <spdlog/cfg/helpers.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <locale>
#include <map>
#include <functional>
#include <memory>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "syncstab/error.hpp"
#include "syncstab/linform.hpp"
#include "syncstab/manifold.hpp"
#include "syncstab/model.hpp"
#include "syncstab/rng.hpp"
#include "syncstab/sync.hpp"

namespace syncstab {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::shared_ptr<spdlog::logger> logger() {
  static const auto lg = [] {
    auto l = spdlog::get("syncstab");
    if (!l) l = spdlog::stderr_logger_mt("syncstab");
    l->set_level(spdlog::level::warn);
    return l;
  }();
  return lg;
}

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorCode::Config, msg); }

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

Vec default_start(int N) {
  Vec x(N);
  for (int i = 0; i < N; ++i) x[i] = 0.04 * i / (N - 1);
  return x;
}

Vec unit(int N, int i) {
  Vec e = Vec::Zero(N);
  e[i] = 1.0;
  return e;
}

// Reads which.<command>; every key has to be consumed before done().
class Params {
 public:
  Params(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail("must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  void consume(const char* key) { used_.insert(key); }

  template <class T>
  T get(const char* key, T fallback) {
    used_.insert(key);
    if (!j_.contains(key)) return fallback;
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(std::string(key) + " must be a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(std::string(key) + " must be a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(std::string(key) + " must be an integer");
    } else {
      if (!v.is_number()) fail(std::string(key) + " must be a number");
    }
    return v.get<T>();
  }

  Vec vec(const char* key, const Vec& fallback, int N) {
    used_.insert(key);
    if (!j_.contains(key)) return fallback;
    return parse_vec(j_.at(key), key, N);
  }

  std::vector<int> ints(const char* key) {
    used_.insert(key);
    std::vector<int> out;
    if (!j_.contains(key)) return out;
    const auto& a = j_.at(key);
    if (!a.is_array()) fail(std::string(key) + " must be an array of integers");
    for (const auto& v : a) {
      if (!v.is_number_integer()) fail(std::string(key) + " must be an array of integers");
      out.push_back(v.get<int>());
    }
    return out;
  }

  std::vector<Vec> vecs(const char* key, int N) {
    used_.insert(key);
    std::vector<Vec> out;
    if (!j_.contains(key)) return out;
    const auto& a = j_.at(key);
    if (!a.is_array() || a.empty()) fail(std::string(key) + " must be a non-empty array of vectors");
    for (const auto& v : a) out.push_back(parse_vec(v, key, N));
    return out;
  }

  void done() const {
    for (const auto& item : j_.items())
      if (!used_.count(item.key())) fail("unknown key '" + item.key() + "'");
  }

  [[noreturn]] void fail(const std::string& msg) const { config_error(where_ + ": " + msg); }

 private:
  Vec parse_vec(const json& v, const char* key, int N) const {
    if (!v.is_array() || static_cast<int>(v.size()) != N)
      fail(std::string(key) + " must be an array of " + std::to_string(N) + " numbers");
    Vec out(N);
    for (int i = 0; i < N; ++i) {
      if (!v[i].is_number()) fail(std::string(key) + " entries must be numbers");
      out[i] = v[i].get<double>();
      if (!std::isfinite(out[i])) fail(std::string(key) + " entries must be finite");
    }
    return out;
  }

  json j_;
  std::string where_;
  std::set<std::string> used_;
};

class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  void text(const std::string& name, const std::string& content) {
    std::ofstream f(dir_ / name, std::ios::binary | std::ios::trunc);
    f << content;
    f.close();
    if (!f) config_error("cannot write " + (dir_ / name).string());
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
  }
  void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }
  template <class F>
  void csv(const std::string& name, F&& fill) {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    fill(os);
    text(name, os.str());
  }

  const fs::path& dir() const noexcept { return dir_; }
  std::vector<std::string> files() const {
    auto f = files_;
    std::sort(f.begin(), f.end());
    return f;
  }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

// fn(i) for i in [0, n); results in index order whatever the job count.
template <class F>
auto parallel_map(int n, int jobs, F&& fn) -> std::vector<decltype(fn(0))> {
  std::vector<decltype(fn(0))> out(n);
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<int> next{0};
  std::vector<std::future<void>> workers;
  for (int w = 0; w < std::min(jobs, n); ++w)
    workers.push_back(std::async(std::launch::async, [&] {
      for (int i = next++; i < n; i = next++) out[i] = fn(i);
    }));
  for (auto& w : workers) w.get();
  return out;
}

struct Context {
  const ExperimentConfig& cfg;
  Outputs& out;
  int jobs = 1;
  json checks = json::object();
  bool pass = true;

  void check(const std::string& name, bool ok) {
    checks[name] = ok;
    pass = pass && ok;
    if (!ok) logger()->warn("check failed: {}", name);
  }
  MeanFieldModel model() const { return MeanFieldModel::from_json(cfg.model); }
  PerturbedLinearSystem linear() const {
    if (!cfg.linear) config_error("this command needs a 'linear' section");
    return PerturbedLinearSystem::from_json(*cfg.linear);
  }
  Params params(const std::string& command) const {
    return Params(cfg.which.contains(command) ? cfg.which.at(command) : json::object(),
                  "which." + command);
  }
  const IntegratorConfig& integrator() const { return cfg.run.integrator; }
};

// Same recipe as the property-test systems: b = -alpha0 + harmonics and
// sum_j mean(a_j) = alpha0, so (H_stab) holds with alpha = alpha0.
PerturbedLinearSystem random_system(Rng& rng, int N, double D, std::uint64_t zeta_seed,
                                    bool zero_row_sum) {
  const double alpha0 = rng.uniform(0.5, 1.5);
  TrigSeries b(-alpha0);
  for (int k = 1; k <= 2; ++k) {
    b.add_cos(k, rng.uniform(-0.5, 0.5));
    b.add_sin(k, rng.uniform(-0.5, 0.5));
  }
  std::vector<double> w(N);
  double total = 0.0;
  for (auto& x : w) total += (x = rng.uniform(0.2, 1.0));
  std::vector<PeriodicFunction> a;
  for (int j = 0; j < N; ++j) {
    TrigSeries aj(alpha0 * w[j] / total);
    aj.add_cos(1, rng.uniform(-0.2, 0.2));
    aj.add_sin(1, rng.uniform(-0.2, 0.2));
    a.emplace_back(aj);
  }
  return PerturbedLinearSystem(N, b, std::move(a),
                               Zeta::random_trig(N, D, zeta_seed, zero_row_sum), 0.0);
}

PerturbedLinearSystem constant_system(int N) {
  std::vector<PeriodicFunction> a(N, PeriodicFunction::constant(1.0 / N));
  return PerturbedLinearSystem(N, PeriodicFunction::constant(-1.0), std::move(a), Zeta::zero(N));
}

PerturbedLinearSystem balanced_system(int N) {
  const double c = 2.0 * std::numbers::pi;
  TrigSeries b(-1.0);
  b.add_cos(1, c);
  std::vector<PeriodicFunction> a;
  for (int j = 0; j < N; ++j) {
    TrigSeries aj(1.0 / N);
    aj.add_cos(1, -c / N);
    a.emplace_back(aj);
  }
  return PerturbedLinearSystem(N, b, std::move(a), Zeta::zero(N));
}

// ---------------------------------------------------------------------------
// stable manifold pipeline, shared by the command and the report

struct ManifoldSettings {
  int directions = 5;
  double xi_norm = 1e-3;
  std::vector<Vec> xis;  // explicit directions; drawn from the kernel when empty
  double T = 50.0;
  double translate = 1e-3;
  double rate_max = -0.005;
  double r2_min = 0.95;
  double K_tolerance = 0.1;  // relative change of K_hat when T doubles
};

struct DirectionRun {
  ChartPoint point;
  ContractionResult con;
  double K_doubled = 0.0;
  CycleConvergence cycle;
};

struct ManifoldRun {
  LockedOrbit orbit;
  double xi_radius = 0.0;
  std::vector<Vec> basis;
  std::vector<DirectionRun> runs;
  ContractionResult translate;
  json summary;
  std::map<std::string, bool> checks;
};

ManifoldRun manifold_pipeline(const MeanFieldModel& model, const Vec& X0,
                              const ManifoldSettings& s, const IntegratorConfig& cfg,
                              std::uint64_t seed, int jobs) {
  ManifoldRun m;
  const int N = model.N();
  m.orbit = find_locked_orbit(model, X0, cfg);
  logger()->info("locked orbit rho {} residual {}", m.orbit.rho, m.orbit.residual);
  auto builder = std::make_shared<const ChartBuilder>(model, ChartOptions{}, cfg);
  const StableChart chart(builder, m.orbit.X_star);
  m.xi_radius = chart.xi_radius();
  m.basis = chart.kernel_basis();

  std::vector<Vec> xis = s.xis;
  if (xis.empty()) {
    Rng rng(derive_seed(seed, "directions"));
    for (int k = 0; k < s.directions; ++k) {
      Vec v = Vec::Zero(N);
      for (const auto& e : m.basis) v += rng.uniform(-1.0, 1.0) * e;
      xis.push_back(s.xi_norm / v.norm() * v);
    }
  }

  m.runs = parallel_map(static_cast<int>(xis.size()), jobs, [&](int k) {
    DirectionRun r;
    r.point = chart.eval(xis[k]);
    logger()->debug("direction {} chart point done", k + 1);
    r.con = verify_contraction(model, m.orbit.X_star, r.point.Y, s.T, cfg);
    r.K_doubled = verify_contraction(model, m.orbit.X_star, r.point.Y, 2.0 * s.T, cfg).K_hat;
    r.cycle = limit_cycle_convergence(model, m.orbit, r.point.Y, s.T, cfg, false);
    return r;
  });
  m.translate = verify_contraction(model, m.orbit.X_star,
                                   m.orbit.X_star + Vec::Constant(N, s.translate), s.T, cfg);

  bool rates = true, fits = true, K_ok = true;
  double worst_rate = -std::numeric_limits<double>::infinity();
  double worst_K = 0.0;
  json dirs = json::array();
  for (const auto& r : m.runs) {
    rates = rates && r.con.fitted_rate <= s.rate_max;
    fits = fits && r.con.fit_r2 > s.r2_min;
    K_ok = K_ok && std::isfinite(r.con.K_hat) &&
           std::abs(r.K_doubled / r.con.K_hat - 1.0) < s.K_tolerance;
    worst_rate = std::max(worst_rate, r.con.fitted_rate);
    worst_K = std::max(worst_K, r.con.K_hat);
    dirs.push_back({{"xi", to_std(r.point.xi)},
                    {"Y", to_std(r.point.Y)},
                    {"richardson_diff", r.point.richardson_diff},
                    {"max_L", r.point.max_L},
                    {"fitted_rate", r.con.fitted_rate},
                    {"fit_r2", r.con.fit_r2},
                    {"K_hat", r.con.K_hat},
                    {"K_hat_doubled", r.K_doubled},
                    {"cycle_rate", r.cycle.fitted_rate},
                    {"cycle_r2", r.cycle.fit_r2}});
  }
  const bool neutral = std::abs(m.translate.fitted_rate) < 1e-3;
  m.checks = {{"rates_negative", rates}, {"fit_r2", fits}, {"K_hat_stable", K_ok},
              {"translate_neutral", neutral}};
  json basis = json::array();
  for (const auto& e : m.basis) basis.push_back(to_std(e));
  m.summary = {{"X_star", to_std(m.orbit.X_star)},
               {"rho", m.orbit.rho},
               {"orbit_residual", m.orbit.residual},
               {"xi_radius", m.xi_radius},
               {"kernel_basis", basis},
               {"T", s.T},
               {"fitted_rate", worst_rate},
               {"K_hat", worst_K},
               {"directions", dirs},
               {"translate", {{"offset", s.translate},
                              {"fitted_rate", m.translate.fitted_rate},
                              {"fit_r2", m.translate.fit_r2},
                              {"K_hat", m.translate.K_hat}}}};
  return m;
}

// ---------------------------------------------------------------------------
// commands

json cmd_check_hypotheses(Context& c) {
  auto p = c.params("check-hypotheses");
  const int q = p.get("quad_points", 256);
  p.done();
  const auto rep = c.model().check_hypotheses(q);
  const json j = rep.to_json();
  c.out.json_file("hypotheses.json", j);
  c.check("H", rep.H);
  c.check("H_star", rep.H_star);
  return j;
}

json cmd_simulate(Context& c) {
  const auto model = c.model();
  auto p = c.params("simulate");
  const Vec X0 = p.vec("X0", default_start(model.N()), model.N());
  const double D_bound = p.get("D_bound", 0.1);
  const double v_min = p.get("velocity_min", 0.8);
  p.done();
  const double T = c.cfg.run.horizon.value_or(200.0);
  const auto traj = flow(model, X0, 0.0, T, c.integrator());
  const auto rep = dispersion_monitor(traj, D_bound);
  c.out.csv("trajectory.csv", [&](std::ostream& os) { traj.write_csv(os, "x"); });
  json j = rep.to_json();
  j["velocity_bound"] = v_min;
  j["X0"] = to_std(X0);
  j["X_final"] = to_std(traj.final_state());
  c.out.json_file("simulate.json", j);
  c.check("dispersion", rep.dispersion_max < D_bound);
  c.check("velocity", rep.velocity_min > v_min);
  return j;
}

json cmd_linear_decompose(Context& c) {
  const auto sys = c.linear();
  const int N = sys.N();
  auto p = c.params("linear-decompose");
  const Vec Y = p.vec("Y", unit(N, 0), N);
  DecomposeOptions o;
  const auto mode = p.get<std::string>("mode", "general");
  if (mode == "normalizing")
    o.mode = DecomposeMode::Normalizing;
  else if (mode != "general")
    p.fail("mode must be 'general' or 'normalizing'");
  if (p.has("s_end")) o.s_end = p.get("s_end", 0.0);
  if (p.has("beta")) o.beta = p.get("beta", 0.0);
  if (p.has("V0")) o.V0 = p.vec("V0", Vec(), N);
  o.psi_periods = p.get("psi_periods", 0);
  o.sample_step = p.get("sample_step", o.sample_step);
  p.done();
  const auto r = decompose(sys, Y, o, c.integrator());
  json j = r.to_json();
  j["hstab"] = check_Hstab(sys).to_json();
  c.out.json_file("decomposition.json", j);
  c.out.csv("stable_norms.csv", [&](std::ostream& os) { r.write_stable_csv(os); });
  c.check("certified", r.certified);
  return j;
}

json cmd_psi(Context& c) {
  const auto sys = c.linear();
  const int N = sys.N();
  auto p = c.params("psi");
  const Vec Y = p.vec("Y", unit(N, 0), N);
  const int periods = p.get("periods", 0);
  p.done();
  json j;
  try {
    const auto r = periods > 0 ? psi(sys, Y, periods, c.integrator()) : psi(sys, Y, c.integrator());
    j = {{"value", r.value},
         {"approximants", r.approximants},
         {"converged", r.converged},
         {"H_final", r.H_final}};
  } catch (const PsiNotConverged& e) {
    j = {{"converged", false}, {"approximants", e.approximants()}, {"message", e.what()}};
  }
  j["Y"] = to_std(Y);
  j["mean_Y"] = Y.mean();
  c.out.json_file("psi.json", j);
  c.check("converged", j["converged"].get<bool>());
  return j;
}

json cmd_delta(Context& c) {
  const auto sys = c.linear();
  const auto hs = check_Hstab(sys);
  auto p = c.params("delta");
  const double beta = p.get("beta", 0.5 * hs.alpha);
  const double D = p.get("D", sys.zeta().sampled_norm());
  const double L = p.get("L", 1.0);
  const int samples = p.get("samples", 64);
  p.done();
  const auto d = analyze_delta(sys, beta, D, L, samples);
  const json j = d.to_json();
  c.out.json_file("delta.json", j);
  c.out.csv("delta.csv", [&](std::ostream& os) { d.write_csv(os); });
  if (D > 0.0) c.check("positive", d.positive);
  c.check("below_one", d.below_one);
  c.check("periodicity", d.periodicity_residual < 1e-10);
  c.check("ode_residual", d.ode_residual < 1e-8);
  return j;
}

json cmd_locked_orbit(Context& c) {
  const auto model = c.model();
  auto p = c.params("locked-orbit");
  const Vec X0 = p.vec("X0", default_start(model.N()), model.N());
  ShootingOptions so;
  so.tol = p.get("tol", so.tol);
  so.max_iterations = p.get("max_iterations", so.max_iterations);
  so.preintegrate_periods = p.get("preintegrate_periods", so.preintegrate_periods);
  so.profile_samples = p.get("profile_samples", so.profile_samples);
  p.done();
  const auto orbit = find_locked_orbit(model, X0, c.integrator(), so);
  const json j = orbit.to_json();
  c.out.json_file("locked_orbit.json", j);
  c.out.csv("psi_profile.csv", [&](std::ostream& os) { orbit.write_profile_csv(os); });
  c.check("residual", orbit.residual < 1e-9);
  c.check("psi_periodicity", orbit.psi_periodicity_residual < 1e-7);
  return j;
}

json cmd_stable_manifold(Context& c) {
  const auto model = c.model();
  const int N = model.N();
  auto p = c.params("stable-manifold");
  const Vec X0 = p.vec("X0", default_start(N), N);
  ManifoldSettings s;
  s.directions = p.get("directions", s.directions);
  s.xi_norm = p.get("xi_norm", s.xi_norm);
  s.xis = p.vecs("xi", N);
  s.translate = p.get("translate", s.translate);
  s.rate_max = p.get("rate_max", s.rate_max);
  s.r2_min = p.get("r2_min", s.r2_min);
  p.done();
  s.T = c.cfg.run.horizon.value_or(50.0);
  if (s.directions < 1) config_error("which.stable-manifold: directions must be >= 1");
  if (!(s.xi_norm > 0.0)) config_error("which.stable-manifold: xi_norm must be > 0");

  auto m = manifold_pipeline(model, X0, s, c.integrator(), c.cfg.run.seed, c.jobs);
  std::vector<ChartPoint> points;
  for (const auto& r : m.runs) points.push_back(r.point);
  c.out.csv("chart_samples.csv", [&](std::ostream& os) { write_chart_samples_csv(os, points); });
  for (std::size_t k = 0; k < m.runs.size(); ++k)
    c.out.csv("contraction_" + std::to_string(k + 1) + ".csv",
              [&](std::ostream& os) { m.runs[k].con.write_csv(os); });
  c.out.csv("translate.csv", [&](std::ostream& os) { m.translate.write_csv(os); });
  c.out.json_file("stable_manifold.json", m.summary);
  for (const auto& [name, ok] : m.checks) c.check(name, ok);
  return m.summary;
}

json cmd_contraction(Context& c) {
  const auto model = c.model();
  const int N = model.N();
  auto p = c.params("contraction");
  const Vec X = p.vec("X", default_start(N), N);
  const Vec Y = p.vec("Y", X + 1e-3 / std::sqrt(2.0) * (unit(N, 0) - unit(N, 1)), N);
  const double step = p.get("sample_step", 0.25);
  p.done();
  const double T = c.cfg.run.horizon.value_or(50.0);
  const auto r = verify_contraction(model, X, Y, T, c.integrator(), step);
  json j = r.to_json();
  j["T"] = T;
  c.out.json_file("contraction.json", j);
  c.out.csv("contraction.csv", [&](std::ostream& os) { r.write_csv(os); });
  c.check("K_hat_finite", std::isfinite(r.K_hat));
  return j;
}

json cmd_report(Context& c) {
  const json j = run_acceptance_checks(c.cfg, c.jobs);
  c.out.json_file("report.json", j);
  for (const auto& s : j.at("sections")) c.check(std::to_string(s.at("id").get<int>()), s.at("pass"));
  return {{"pass", j.at("pass")}, {"sections", j.at("sections").size()}};
}

using Command = json (*)(Context&);

const std::vector<std::pair<std::string, Command>>& command_table() {
  static const std::vector<std::pair<std::string, Command>> table = {
      {"check-hypotheses", cmd_check_hypotheses},
      {"simulate", cmd_simulate},
      {"linear-decompose", cmd_linear_decompose},
      {"psi", cmd_psi},
      {"delta", cmd_delta},
      {"locked-orbit", cmd_locked_orbit},
      {"stable-manifold", cmd_stable_manifold},
      {"contraction", cmd_contraction},
      {"report", cmd_report},
  };
  return table;
}

// ---------------------------------------------------------------------------
// acceptance sections

struct Section {
  json values = json::object();
  bool pass = true;
  void check(const std::string& name, bool ok, const json& value) {
    values[name] = value;
    if (!ok) {
      pass = false;
      values["failed"].push_back(name);
    }
  }
};

Vec fixed_vector(int N, double phase) {
  Vec y(N);
  for (int j = 0; j < N; ++j) y[j] = std::cos(phase + 1.3 * j);
  return y;
}

Section section_constant(const IntegratorConfig& cfg) {
  Section s;
  double psi_err = 0.0, beta_lo = 1e300, beta_hi = -1e300;
  for (int N : {2, 3, 5}) {
    const auto sys = constant_system(N);
    const Vec Y = fixed_vector(N, 0.4 * N);
    psi_err = std::max(psi_err, std::abs(psi(sys, Y, cfg).value - Y.mean()));
    const auto d = decompose(sys, Y, {}, cfg);
    beta_lo = std::min(beta_lo, d.fitted_beta);
    beta_hi = std::max(beta_hi, d.fitted_beta);
  }
  s.check("psi_minus_mean", psi_err < 1e-8, psi_err);
  s.check("fitted_beta", beta_lo >= 0.99 && beta_hi <= 1.01, {beta_lo, beta_hi});
  return s;
}

Section section_balanced(const IntegratorConfig& cfg) {
  Section s;
  const int N = 3;
  const auto sys = balanced_system(N);
  const Vec Y = fixed_vector(N, 0.7);
  const double err = std::abs(psi(sys, Y, cfg).value - Y.mean());
  s.check("psi_minus_mean", err < 1e-7, err);
  const auto d = decompose(sys, Y, {}, cfg);
  const auto it = std::find_if(d.times.begin(), d.times.end(),
                               [](double t) { return std::abs(t - 1.0) < 1e-12; });
  double gap = std::numeric_limits<double>::infinity();
  if (it != d.times.end()) {
    const auto k = static_cast<std::size_t>(it - d.times.begin());
    const double expected = std::exp(-1.0) * (Y - Vec::Constant(N, Y.mean())).norm();
    gap = std::abs(d.stable[k].norm() - expected);
  }
  s.check("stable_norm_at_1", gap < 1e-6, gap);
  return s;
}

Section section_identity(const IntegratorConfig& cfg, std::uint64_t seed, int systems, int jobs) {
  struct Case {
    PerturbedLinearSystem sys;
    Vec Y1, Y2;
    bool normalizing;
  };
  std::vector<Case> cases;
  Rng rng(derive_seed(seed, "identity"));
  for (int k = 0; k < systems; ++k) {
    const int N = 2 + k % 4;
    const bool normalizing = k % 5 == 4;
    const double D = 0.05 * rng.uniform();
    auto sys = random_system(rng, N, D, rng.next(), normalizing);
    Vec Y1(N), Y2(N);
    for (int j = 0; j < N; ++j) Y1[j] = rng.uniform(-1.0, 1.0);
    for (int j = 0; j < N; ++j) Y2[j] = rng.uniform(-1.0, 1.0);
    cases.push_back({std::move(sys), Y1, Y2, normalizing});
  }
  struct Result {
    double identity = 0.0, linearity = 0.0, invariance = 0.0;
  };
  const auto results = parallel_map(systems, jobs, [&](int k) {
    const auto& c = cases[k];
    Result r;
    r.identity = decompose(c.sys, c.Y1, {}, cfg).identity_residual;
    const double a = psi(c.sys, c.Y1, cfg).value, b = psi(c.sys, c.Y2, cfg).value;
    r.linearity = std::abs(psi(c.sys, c.Y1 + 2.0 * c.Y2, cfg).value - a - 2.0 * b);
    if (c.normalizing) {
      DecomposeOptions o;
      o.mode = DecomposeMode::Normalizing;
      r.identity = std::max(r.identity, decompose(c.sys, c.Y1, o, cfg).identity_residual);
      const double alpha = check_Hstab(c.sys).alpha;
      const Vec V0 = normalizing_solution(c.sys, {Vec::Ones(c.sys.N())}, 20.0 / alpha, cfg).V0;
      r.invariance = linear_form_invariance(c.sys, c.Y1, V0, 1.7, cfg);
    }
    return r;
  });
  double id = 0.0, lin = 0.0, inv = 0.0;
  for (const auto& r : results) {
    id = std::max(id, r.identity);
    lin = std::max(lin, r.linearity);
    inv = std::max(inv, r.invariance);
  }
  Section s;
  s.values["systems"] = systems;
  s.check("identity_residual", id < 1e-7, id);
  s.check("psi_linearity", lin < 1e-6, lin);
  s.check("flow_invariance", inv < 1e-6, inv);
  return s;
}

Section section_delta(std::uint64_t seed, int systems) {
  Section s;
  Rng rng(derive_seed(seed, "delta"));
  double ode = 0.0, per = 0.0;
  bool positive = true, below = true, above = true;
  for (int k = 0; k < systems; ++k) {
    const auto sys = random_system(rng, 2, 0.0, 0, false);
    const double alpha = check_Hstab(sys).alpha;
    for (double f : {0.25, 0.5, 0.75}) {
      const auto d = analyze_delta(sys, f * alpha, 0.05, 1.0);
      ode = std::max(ode, d.ode_residual);
      per = std::max(per, d.periodicity_residual);
      positive = positive && d.positive;
      below = below && analyze_delta(sys, f * alpha, 0.5 * d.D0, 1.0).below_one;
      above = above && !analyze_delta(sys, f * alpha, 2.0 * d.D0, 1.0).below_one;
    }
  }
  s.values["systems"] = systems;
  s.check("ode_residual", ode < 1e-8, ode);
  s.check("periodicity", per < 1e-10, per);
  s.check("positive", positive, positive);
  s.check("below_one_under_D0", below, below);
  s.check("not_below_one_over_D0", above, above);
  return s;
}

Section section_hypotheses(const MeanFieldModel& model) {
  Section s;
  const auto rep = model.check_hypotheses();
  s.check("h_star_integral", rep.h_star_integral < 0.0, rep.h_star_integral);
  s.check("h_star_doubled_diff", rep.h_star_doubled_diff < 1e-8, rep.h_star_doubled_diff);
  s.check("min_F_diag", rep.min_F_diag >= 0.93 && rep.min_F_diag <= 0.94, rep.min_F_diag);
  return s;
}

Section section_sync(const MeanFieldModel& model, const IntegratorConfig& cfg) {
  Section s;
  const auto traj = flow(model, default_start(model.N()), 0.0, 200.0, cfg);
  const auto rep = dispersion_monitor(traj, 0.1);
  s.check("dispersion_max", rep.dispersion_max < 0.1, rep.dispersion_max);
  s.check("velocity_min", rep.velocity_min > 0.8, rep.velocity_min);
  return s;
}

Section section_locked(const json& model_json, const IntegratorConfig& cfg) {
  Section s;
  for (const auto& [tag, pert] :
       {std::pair<std::string, json>{"H0", {{"kind", "zero"}}},
        std::pair<std::string, json>{"H_r0.01", {{"kind", "trig-diag-periodic"}, {"r", 0.01}}}}) {
    json mj = model_json;
    mj["perturbation"] = pert;
    const auto model = MeanFieldModel::from_json(mj);
    const auto o = find_locked_orbit(model, default_start(model.N()), cfg);
    s.check(tag + ".residual", o.residual < 1e-9, o.residual);
    s.check(tag + ".rho", o.rho > 0.9 && o.rho < 1.1, o.rho);
    s.check(tag + ".psi_periodicity", o.psi_periodicity_residual < 1e-7,
            o.psi_periodicity_residual);
  }
  return s;
}

Section section_manifold(const MeanFieldModel& model, const IntegratorConfig& cfg,
                         std::uint64_t seed, int directions, int jobs) {
  ManifoldSettings ms;
  ms.directions = directions;
  const auto m = manifold_pipeline(model, default_start(model.N()), ms, cfg, seed, jobs);
  Section s;
  s.values = m.summary;
  for (const auto& [name, ok] : m.checks) s.check("check." + name, ok, ok);
  return s;
}

Section section_variational(const MeanFieldModel& model, std::uint64_t seed, int points) {
  Section s;
  const int N = model.N();
  const auto cfg = IntegratorConfig::fixed(1e-3);
  const double T = 5.0, h = 1e-5;
  Rng rng(derive_seed(seed, "variational"));
  double worst = 0.0;
  for (int k = 0; k < points; ++k) {
    Vec Z(N);
    for (int j = 0; j < N; ++j) Z[j] = rng.uniform(0.0, 0.05);
    const Mat S = variational_S(model, Z, 0.0, T, cfg).matrices.back();
    for (int j = 0; j < N; ++j) {
      const Vec col = (flow(model, Z + h * unit(N, j), 0.0, T, cfg).final_state() -
                       flow(model, Z - h * unit(N, j), 0.0, T, cfg).final_state()) /
                      (2.0 * h);
      worst = std::max(worst, (S.col(j) - col).norm() / col.norm());
    }
  }
  s.values["points"] = points;
  s.check("max_relative_error", worst < 1e-4, worst);
  return s;
}

Section section_determinism(const MeanFieldModel& model) {
  const auto cfg = IntegratorConfig::fixed(1e-2);
  auto run = [&] {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    flow(model, default_start(model.N()), 0.0, 20.0, cfg).write_csv(os, "x");
    return os.str();
  };
  const std::string a = run(), b = run();
  Section s;
  s.check("fixed_step_csv_identical", a == b, a == b);
  s.values["csv_fnv1a64"] = fnv1a64(a);
  return s;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

void init_logging() {
  const auto lg = logger();
  if (const char* env = std::getenv("SYNCSTAB_LOG"); env && *env) {
    std::string v = env;
    if (v.find('=') == std::string::npos) v = "syncstab=" + v;
    spdlog::cfg::helpers::load_levels(v);
  }
}

IntegratorConfig integrator_from_json(const json& j) {
  Params p(j, "run.integrator");
  IntegratorConfig c;
  const auto method = p.get<std::string>("method", "rk45");
  if (method == "rk4")
    c.method = Method::Rk4Fixed;
  else if (method == "rk45")
    c.method = Method::Rk45Adaptive;
  else
    p.fail("method must be 'rk4' or 'rk45'");
  c.step = p.get("step", c.step);
  c.abs_tol = p.get("abs_tol", c.abs_tol);
  c.rel_tol = p.get("rel_tol", c.rel_tol);
  c.max_step = p.get("max_step", c.max_step);
  c.max_steps = p.get("max_steps", c.max_steps);
  p.done();
  try {
    c.validate();
  } catch (const Error& e) {
    config_error(std::string("run.integrator: ") + e.what());
  }
  return c;
}

json integrator_to_json(const IntegratorConfig& c) {
  return {{"method", c.method == Method::Rk4Fixed ? "rk4" : "rk45"},
          {"step", c.step},
          {"abs_tol", c.abs_tol},
          {"rel_tol", c.rel_tol},
          {"max_step", c.max_step},
          {"max_steps", c.max_steps}};
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, fn] : command_table()) n.push_back(name);
    return n;
  }();
  return names;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) config_error("config must be a JSON object");
  Params top(j, "config");
  ExperimentConfig c;
  if (!j.contains("model")) config_error("config: missing 'model'");
  c.model = j.at("model");
  if (!c.model.is_object()) config_error("model must be an object");
  try {
    (void)MeanFieldModel::from_json(c.model);
    if (j.contains("linear")) {
      c.linear = j.at("linear");
      if (!c.linear->is_object()) config_error("linear must be an object");
      (void)PerturbedLinearSystem::from_json(*c.linear);
    }
  } catch (const json::exception& e) {
    config_error(e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) throw;
    config_error(e.what());
  }
  if (j.contains("run")) {
    Params run(j.at("run"), "run");
    if (run.has("horizon")) {
      const double T = run.get("horizon", 0.0);
      if (!(T > 0.0) || !std::isfinite(T)) run.fail("horizon must be positive");
      c.run.horizon = T;
    }
    if (run.has("integrator")) c.run.integrator = integrator_from_json(j["run"]["integrator"]);
    run.consume("integrator");
    c.run.seed = run.get<std::uint64_t>("seed", 0);
    c.run.output_dir = run.get<std::string>("output_dir", c.run.output_dir);
    run.done();
  }
  if (j.contains("which")) {
    const auto& w = j.at("which");
    if (!w.is_object()) config_error("which must be an object");
    for (const auto& item : w.items()) {
      const auto& names = command_names();
      if (std::find(names.begin(), names.end(), item.key()) == names.end())
        config_error("which: unknown command '" + item.key() + "'");
      if (!item.value().is_object()) config_error("which." + item.key() + " must be an object");
    }
    c.which = w;
  }
  for (const char* key : {"model", "linear", "run", "which"}) top.consume(key);
  top.done();
  return c;
}

json ExperimentConfig::to_json() const {
  json run = {{"integrator", integrator_to_json(this->run.integrator)},
              {"seed", this->run.seed},
              {"output_dir", this->run.output_dir}};
  if (this->run.horizon) run["horizon"] = *this->run.horizon;
  json j = {{"model", model}, {"run", run}, {"which", which}};
  if (linear) j["linear"] = *linear;
  return j;
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j["run"].erase("output_dir");
  return hex64(fnv1a64(j.dump()));
}

json run_acceptance_checks(const ExperimentConfig& cfg, int jobs) {
  Params p(cfg.which.contains("report") ? cfg.which.at("report") : json::object(), "which.report");
  const int systems = p.get("systems", 50);
  const int delta_systems = p.get("delta_systems", 20);
  const int directions = p.get("directions", 5);
  const int points = p.get("variational_points", 10);
  const std::vector<int> only = p.ints("sections");
  p.done();

  const auto model = MeanFieldModel::from_json(cfg.model);
  const auto& integ = cfg.run.integrator;
  const std::uint64_t seed = cfg.run.seed;
  const std::vector<std::pair<std::string, std::function<Section()>>> sections = {
      {"constant-coefficient oracle", [&] { return section_constant(integ); }},
      {"balanced periodic oracle", [&] { return section_balanced(integ); }},
      {"decomposition identity", [&] { return section_identity(integ, seed, systems, jobs); }},
      {"delta suite", [&] { return section_delta(seed, delta_systems); }},
      {"hypotheses", [&] { return section_hypotheses(model); }},
      {"synchronization", [&] { return section_sync(model, integ); }},
      {"locked orbit", [&] { return section_locked(cfg.model, integ); }},
      {"stable manifold contraction",
       [&] { return section_manifold(model, integ, seed, directions, jobs); }},
      {"variational accuracy", [&] { return section_variational(model, seed, points); }},
      {"determinism", [&] { return section_determinism(model); }},
  };
  json out = json::array();
  bool all = true;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    logger()->info("report section {}: {}", id, sections[i].first);
    Section s;
    try {
      s = sections[i].second();
    } catch (const Error& e) {
      s.pass = false;
      s.values["error"] = to_string(e.code());
      s.values["message"] = e.what();
    }
    all = all && s.pass;
    out.push_back({{"id", id}, {"name", sections[i].first}, {"pass", s.pass}, {"values", s.values}});
  }
  return {{"pass", all}, {"seed", seed}, {"sections", out}};
}

CommandOutcome run_command(std::string_view command, std::string_view config_text,
                           const RunOverrides& overrides) {
  init_logging();
  const auto start = std::chrono::steady_clock::now();
  CommandOutcome outcome;
  auto fail = [&](int code, const std::string& kind, const std::string& msg) {
    outcome.exit_code = code;
    outcome.summary = {{"command", std::string(command)},
                       {"exit_code", code},
                       {"error", {{"kind", kind}, {"message", msg}}}};
    logger()->info("{}", msg);
    return outcome;
  };

  Command fn = nullptr;
  for (const auto& [name, f] : command_table())
    if (name == command) fn = f;
  if (!fn) return fail(kExitUsage, "usage", "unknown command '" + std::string(command) + "'");

  ExperimentConfig cfg;
  try {
    cfg = ExperimentConfig::from_json(json::parse(config_text));
    if (overrides.seed) cfg.run.seed = *overrides.seed;
    if (overrides.horizon) {
      if (!(*overrides.horizon > 0.0) || !std::isfinite(*overrides.horizon))
        config_error("--horizon must be positive");
      cfg.run.horizon = overrides.horizon;
    }
    if (overrides.out) cfg.run.output_dir = *overrides.out;
    if (overrides.jobs < 1) config_error("--jobs must be >= 1");
  } catch (const json::parse_error& e) {
    return fail(kExitUsage, "Config", std::string("malformed JSON: ") + e.what());
  } catch (const std::exception& e) {
    return fail(kExitUsage, "Config", e.what());
  }

  std::unique_ptr<Outputs> out;
  try {
    out = std::make_unique<Outputs>(cfg.run.output_dir);
  } catch (const std::exception& e) {
    return fail(kExitUsage, "Config", std::string("output dir: ") + e.what());
  }

  Context ctx{cfg, *out, overrides.jobs};
  json result;
  json error;
  logger()->info("{} started, config {}", command, cfg.hash());
  try {
    result = fn(ctx);
    outcome.exit_code = ctx.pass ? kExitPass : kExitCheckFailed;
  } catch (const Error& e) {
    const bool usage = e.code() == ErrorCode::Config || e.code() == ErrorCode::InvalidArgument;
    outcome.exit_code = usage ? kExitUsage : kExitCheckFailed;
    error = {{"kind", to_string(e.code())}, {"message", e.what()}};
  } catch (const std::exception& e) {
    outcome.exit_code = kExitCheckFailed;
    error = {{"kind", "internal"}, {"message", e.what()}};
  }
  if (!error.is_null()) logger()->info("{}", error["message"].get<std::string>());

  outcome.summary = {{"command", std::string(command)},
                     {"exit_code", outcome.exit_code},
                     {"checks", ctx.checks},
                     {"result", result}};
  if (!error.is_null()) outcome.summary["error"] = error;

  try {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out->json_file("timing.json", {{"command", std::string(command)}, {"wall_seconds", wall}});
    json inventory = json::array();
    for (const auto& name : out->files()) {
      if (name == "timing.json") continue;
      std::ifstream f(out->dir() / name, std::ios::binary);
      std::ostringstream buf;
      buf << f.rdbuf();
      const std::string bytes = buf.str();
      inventory.push_back({{"name", name}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}});
    }
    json manifest = {{"tool", "syncstab"},
                     {"version", SYNCSTAB_VERSION},
                     {"command", std::string(command)},
                     {"config_hash", cfg.hash()},
                     {"seed", cfg.run.seed},
                     {"exit_code", outcome.exit_code},
                     {"checks", ctx.checks},
                     {"files", inventory},
                     {"timing", "timing.json"}};
    if (!error.is_null()) manifest["error"] = error;
    out->json_file("manifest.json", manifest);
  } catch (const std::exception& e) {
    return fail(kExitUsage, "Config", std::string("writing outputs: ") + e.what());
  }
  outcome.files = out->files();
  logger()->info("{} finished with exit code {}", command, outcome.exit_code);
  return outcome;
}

}  // namespace syncstab
