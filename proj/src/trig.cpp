#include "syncstab/trig.hpp"

#include <cmath>
#include <numbers>
#include <optional>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "syncstab/error.hpp"

namespace syncstab {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

TrigSeries& TrigSeries::add_cos(int k, double amp) {
  if (k == 0) {
    c0_ += amp;
    return *this;
  }
  for (auto& h : harmonics_) {
    if (h.k == k) {
      h.cos_amp += amp;
      return *this;
    }
  }
  harmonics_.push_back({k, amp, 0.0});
  return *this;
}

TrigSeries& TrigSeries::add_sin(int k, double amp) {
  if (k == 0) return *this;
  for (auto& h : harmonics_) {
    if (h.k == k) {
      h.sin_amp += amp;
      return *this;
    }
  }
  harmonics_.push_back({k, 0.0, amp});
  return *this;
}

double TrigSeries::derivative(double x, int order) const noexcept {
  double acc = order == 0 ? c0_ : 0.0;
  for (const auto& h : harmonics_) {
    const double w = kTwoPi * h.k;
    const double c = std::cos(w * x);
    const double s = std::sin(w * x);
    switch (order) {
      case 0: acc += h.cos_amp * c + h.sin_amp * s; break;
      case 1: acc += w * (-h.cos_amp * s + h.sin_amp * c); break;
      case 2: acc += -w * w * (h.cos_amp * c + h.sin_amp * s); break;
      default: acc += w * w * w * (h.cos_amp * s - h.sin_amp * c); break;
    }
  }
  return acc;
}

double TrigSeries::primitive(double x) const noexcept {
  double acc = c0_ * x;
  for (const auto& h : harmonics_) {
    const double w = kTwoPi * h.k;
    acc += (h.cos_amp * std::sin(w * x) - h.sin_amp * (std::cos(w * x) - 1.0)) / w;
  }
  return acc;
}

double TrigSeries::abs_bound() const noexcept {
  double acc = std::abs(c0_);
  for (const auto& h : harmonics_) acc += std::hypot(h.cos_amp, h.sin_amp);
  return acc;
}

bool TrigSeries::is_zero() const noexcept {
  if (c0_ != 0.0) return false;
  for (const auto& h : harmonics_)
    if (h.cos_amp != 0.0 || h.sin_amp != 0.0) return false;
  return true;
}

TrigSeries TrigSeries::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("fourier") || j.size() != 1 || !j["fourier"].is_array())
    throw Error(ErrorCode::Config, "periodic function must be {\"fourier\": [...]}");
  TrigSeries out;
  for (const auto& term : j["fourier"]) {
    if (!term.is_array() || term.empty() || !term[0].is_string())
      throw Error(ErrorCode::Config, "fourier term must be [\"const\"|\"cos\"|\"sin\", ...]");
    const auto kind = term[0].get<std::string>();
    if (kind == "const") {
      if (term.size() != 2 || !term[1].is_number())
        throw Error(ErrorCode::Config, "const term is [\"const\", value]");
      out.c0_ += term[1].get<double>();
      continue;
    }
    if (term.size() != 3 || !term[1].is_number_integer() || !term[2].is_number())
      throw Error(ErrorCode::Config, "harmonic term is [\"cos\"|\"sin\", k, amplitude]");
    const int k = term[1].get<int>();
    if (k < 0) throw Error(ErrorCode::Config, "harmonic index must be >= 0");
    if (kind == "cos")
      out.add_cos(k, term[2].get<double>());
    else if (kind == "sin")
      out.add_sin(k, term[2].get<double>());
    else
      throw Error(ErrorCode::Config, "unknown fourier term kind '" + kind + "'");
  }
  return out;
}

nlohmann::json TrigSeries::to_json() const {
  auto terms = nlohmann::json::array();
  terms.push_back({"const", c0_});
  for (const auto& h : harmonics_) {
    if (h.cos_amp != 0.0) terms.push_back({"cos", h.k, h.cos_amp});
    if (h.sin_amp != 0.0) terms.push_back({"sin", h.k, h.sin_amp});
  }
  return {{"fourier", terms}};
}

struct PeriodicFunction::Impl {
  std::optional<TrigSeries> series;
  std::function<double(double)> fn;
  // Tabulated primitive of fn on [0,1].
  std::vector<double> nodes_value;
  std::vector<double> nodes_primitive;
  double period_integral = 0.0;

  double value(double t) const { return series ? (*series)(t) : fn(t); }

  double primitive(double t) const {
    if (series) return series->primitive(t);
    const double whole = std::floor(t);
    const double frac = t - whole;
    const auto cells = nodes_value.size() - 1;
    const double h = 1.0 / static_cast<double>(cells);
    auto k = static_cast<std::size_t>(frac / h);
    if (k >= cells) k = cells - 1;
    const double u = (frac - static_cast<double>(k) * h) / h;
    const double h00 = (1 + 2 * u) * (1 - u) * (1 - u);
    const double h10 = u * (1 - u) * (1 - u);
    const double h01 = u * u * (3 - 2 * u);
    const double h11 = u * u * (u - 1);
    const double local = h00 * nodes_primitive[k] + h10 * h * nodes_value[k] +
                         h01 * nodes_primitive[k + 1] + h11 * h * nodes_value[k + 1];
    return whole * period_integral + local;
  }
};

PeriodicFunction::PeriodicFunction() : PeriodicFunction(TrigSeries{}) {}

PeriodicFunction::PeriodicFunction(TrigSeries series) {
  auto impl = std::make_shared<Impl>();
  impl->period_integral = series.constant();
  impl->series = std::move(series);
  impl_ = std::move(impl);
}

PeriodicFunction PeriodicFunction::from_callable(std::function<double(double)> f, int nodes) {
  if (nodes < 16) throw Error(ErrorCode::InvalidArgument, "primitive table needs >= 16 nodes");
  auto impl = std::make_shared<Impl>();
  impl->fn = std::move(f);
  const int cells = nodes;
  impl->nodes_value.resize(cells + 1);
  impl->nodes_primitive.resize(cells + 1);
  const double h = 1.0 / cells;
  double acc = 0.0;
  for (int k = 0; k <= cells; ++k) {
    const double x = k * h;
    impl->nodes_value[k] = impl->fn(x);
    impl->nodes_primitive[k] = acc;
    if (k < cells) {
      acc += boost::math::quadrature::gauss_kronrod<double, 15>::integrate(impl->fn, x, x + h, 0);
    }
  }
  impl->period_integral = acc;
  return PeriodicFunction(std::shared_ptr<const Impl>(std::move(impl)));
}

double PeriodicFunction::operator()(double t) const { return impl_->value(t); }
double PeriodicFunction::primitive(double t) const { return impl_->primitive(t); }
double PeriodicFunction::period_integral() const { return impl_->period_integral; }
const TrigSeries* PeriodicFunction::series() const noexcept {
  return impl_->series ? &*impl_->series : nullptr;
}

}  // namespace syncstab
