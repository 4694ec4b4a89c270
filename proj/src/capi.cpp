#include "syncstab/syncstab.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "syncstab/error.hpp"
#include "syncstab/experiment.hpp"
#include "syncstab/linform.hpp"
#include "syncstab/model.hpp"
#include "syncstab/sync.hpp"

struct syncstab_model {
  syncstab::MeanFieldModel model;
};

struct syncstab_linear {
  syncstab::PerturbedLinearSystem sys;
};

namespace {

using json = nlohmann::json;
using syncstab::ErrorCode;

thread_local std::string last_error;

syncstab_status set_error(syncstab_status s, const std::string& msg) {
  last_error = msg;
  return s;
}

syncstab_status from_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::Config: return SYNCSTAB_CONFIG_ERROR;
    case ErrorCode::InvalidArgument: return SYNCSTAB_INVALID_ARGUMENT;
    default: return SYNCSTAB_NUMERICAL_ERROR;
  }
}

template <class F>
syncstab_status guarded(F&& body) {
  try {
    last_error.clear();
    body();
    return SYNCSTAB_OK;
  } catch (const syncstab::Error& e) {
    return set_error(from_code(e.code()), e.what());
  } catch (const json::exception& e) {
    return set_error(SYNCSTAB_CONFIG_ERROR, e.what());
  } catch (const std::exception& e) {
    return set_error(SYNCSTAB_INTERNAL_ERROR, e.what());
  } catch (...) {
    return set_error(SYNCSTAB_INTERNAL_ERROR, "unknown exception");
  }
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

syncstab::Vec view(const double* p, int N) { return Eigen::Map<const syncstab::Vec>(p, N); }

#define SYNCSTAB_REQUIRE(cond)                                                \
  do {                                                                        \
    if (!(cond)) return set_error(SYNCSTAB_INVALID_ARGUMENT, "null argument"); \
  } while (0)

}  // namespace

extern "C" {

const char* syncstab_version(void) { return SYNCSTAB_VERSION; }

const char* syncstab_status_name(syncstab_status status) {
  switch (status) {
    case SYNCSTAB_OK: return "ok";
    case SYNCSTAB_CHECK_FAILED: return "check-failed";
    case SYNCSTAB_CONFIG_ERROR: return "config-error";
    case SYNCSTAB_INVALID_ARGUMENT: return "invalid-argument";
    case SYNCSTAB_NUMERICAL_ERROR: return "numerical-error";
    case SYNCSTAB_INTERNAL_ERROR: return "internal-error";
  }
  return "unknown";
}

const char* syncstab_last_error(void) { return last_error.c_str(); }

void syncstab_string_free(char* s) { std::free(s); }

syncstab_status syncstab_model_create(const char* text, syncstab_model** out) {
  SYNCSTAB_REQUIRE(text && out);
  *out = nullptr;
  return guarded([&] {
    *out = new syncstab_model{syncstab::MeanFieldModel::from_json(json::parse(text))};
  });
}

void syncstab_model_free(syncstab_model* model) { delete model; }

syncstab_status syncstab_model_dim(const syncstab_model* model, int* N) {
  SYNCSTAB_REQUIRE(model && N);
  *N = model->model.N();
  return SYNCSTAB_OK;
}

syncstab_status syncstab_model_field(const syncstab_model* model, const double* X, double* out) {
  SYNCSTAB_REQUIRE(model && X && out);
  return guarded([&] {
    const int N = model->model.N();
    syncstab::Vec f(N);
    model->model.field(view(X, N), f);
    std::memcpy(out, f.data(), sizeof(double) * N);
  });
}

syncstab_status syncstab_model_jacobian(const syncstab_model* model, const double* X, double* out) {
  SYNCSTAB_REQUIRE(model && X && out);
  return guarded([&] {
    const int N = model->model.N();
    syncstab::Mat J(N, N);
    model->model.jacobian(view(X, N), J);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) out[i * N + j] = J(i, j);
  });
}

syncstab_status syncstab_model_check_hypotheses(const syncstab_model* model, char** report_json) {
  SYNCSTAB_REQUIRE(model && report_json);
  *report_json = nullptr;
  return guarded([&] { *report_json = dup(model->model.check_hypotheses().to_json().dump()); });
}

syncstab_status syncstab_model_flow(const syncstab_model* model, const double* X0, double T,
                                    double* out) {
  SYNCSTAB_REQUIRE(model && X0 && out);
  return guarded([&] {
    const int N = model->model.N();
    const auto traj = syncstab::flow(model->model, view(X0, N), 0.0, T);
    std::memcpy(out, traj.final_state().data(), sizeof(double) * N);
  });
}

syncstab_status syncstab_model_locked_orbit(const syncstab_model* model, const double* X_guess,
                                            char** orbit_json) {
  SYNCSTAB_REQUIRE(model && X_guess && orbit_json);
  *orbit_json = nullptr;
  return guarded([&] {
    const auto o = syncstab::find_locked_orbit(model->model, view(X_guess, model->model.N()));
    *orbit_json = dup(o.to_json().dump());
  });
}

syncstab_status syncstab_linear_create(const char* text, syncstab_linear** out) {
  SYNCSTAB_REQUIRE(text && out);
  *out = nullptr;
  return guarded([&] {
    *out = new syncstab_linear{syncstab::PerturbedLinearSystem::from_json(json::parse(text))};
  });
}

void syncstab_linear_free(syncstab_linear* sys) { delete sys; }

syncstab_status syncstab_linear_dim(const syncstab_linear* sys, int* N) {
  SYNCSTAB_REQUIRE(sys && N);
  *N = sys->sys.N();
  return SYNCSTAB_OK;
}

syncstab_status syncstab_linear_psi(const syncstab_linear* sys, const double* Y, double* value) {
  SYNCSTAB_REQUIRE(sys && Y && value);
  return guarded([&] { *value = syncstab::psi(sys->sys, view(Y, sys->sys.N())).value; });
}

syncstab_status syncstab_linear_decompose(const syncstab_linear* sys, const double* Y,
                                          char** result_json) {
  SYNCSTAB_REQUIRE(sys && Y && result_json);
  *result_json = nullptr;
  return guarded([&] {
    *result_json = dup(syncstab::decompose(sys->sys, view(Y, sys->sys.N())).to_json().dump());
  });
}

void syncstab_run_options_init(syncstab_run_options* opts) {
  if (!opts) return;
  opts->out_dir = nullptr;
  opts->has_seed = 0;
  opts->seed = 0;
  opts->has_horizon = 0;
  opts->horizon = 0.0;
  opts->jobs = 1;
}

const char* syncstab_command_name(int index) {
  const auto& names = syncstab::command_names();
  if (index < 0 || index >= static_cast<int>(names.size())) return nullptr;
  return names[index].c_str();
}

syncstab_status syncstab_run_command(const char* command, const char* config_json,
                                     const syncstab_run_options* opts, int* exit_code,
                                     char** summary_json) {
  SYNCSTAB_REQUIRE(command && config_json && exit_code);
  if (summary_json) *summary_json = nullptr;
  return guarded([&] {
    syncstab::RunOverrides o;
    if (opts) {
      if (opts->out_dir) o.out = opts->out_dir;
      if (opts->has_seed) o.seed = opts->seed;
      if (opts->has_horizon) o.horizon = opts->horizon;
      o.jobs = opts->jobs;
    }
    const auto r = syncstab::run_command(command, config_json, o);
    *exit_code = r.exit_code;
    if (r.summary.contains("error"))
      last_error = r.summary["error"].value("message", std::string());
    if (summary_json) *summary_json = dup(r.summary.dump(2));
  });
}

}  // extern "C"
