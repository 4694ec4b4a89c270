#ifndef SYNCSTAB_H
#define SYNCSTAB_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SYNCSTAB_API __declspec(dllexport)
#else
#define SYNCSTAB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum syncstab_status {
  SYNCSTAB_OK = 0,
  SYNCSTAB_CHECK_FAILED = 1,
  SYNCSTAB_CONFIG_ERROR = 2,
  SYNCSTAB_INVALID_ARGUMENT = 3,
  SYNCSTAB_NUMERICAL_ERROR = 4,
  SYNCSTAB_INTERNAL_ERROR = 5
} syncstab_status;

typedef struct syncstab_model syncstab_model;
typedef struct syncstab_linear syncstab_linear;

SYNCSTAB_API const char* syncstab_version(void);
SYNCSTAB_API const char* syncstab_status_name(syncstab_status status);
/* Message of the last failed call on this thread; "" after a success. */
SYNCSTAB_API const char* syncstab_last_error(void);
/* Frees strings returned through char** out-parameters. */
SYNCSTAB_API void syncstab_string_free(char* s);

/* ---- model ---- */
SYNCSTAB_API syncstab_status syncstab_model_create(const char* json, syncstab_model** out);
SYNCSTAB_API void syncstab_model_free(syncstab_model* model);
SYNCSTAB_API syncstab_status syncstab_model_dim(const syncstab_model* model, int* N);
/* f(X), N values */
SYNCSTAB_API syncstab_status syncstab_model_field(const syncstab_model* model, const double* X,
                                                  double* out);
/* df(X), N*N values in row-major order */
SYNCSTAB_API syncstab_status syncstab_model_jacobian(const syncstab_model* model, const double* X,
                                                     double* out);
SYNCSTAB_API syncstab_status syncstab_model_check_hypotheses(const syncstab_model* model,
                                                             char** report_json);
/* Phi^T(X0) with the default adaptive integrator */
SYNCSTAB_API syncstab_status syncstab_model_flow(const syncstab_model* model, const double* X0,
                                                 double T, double* out);
SYNCSTAB_API syncstab_status syncstab_model_locked_orbit(const syncstab_model* model,
                                                         const double* X_guess, char** orbit_json);

/* ---- linear systems ---- */
SYNCSTAB_API syncstab_status syncstab_linear_create(const char* json, syncstab_linear** out);
SYNCSTAB_API void syncstab_linear_free(syncstab_linear* sys);
SYNCSTAB_API syncstab_status syncstab_linear_dim(const syncstab_linear* sys, int* N);
SYNCSTAB_API syncstab_status syncstab_linear_psi(const syncstab_linear* sys, const double* Y,
                                                 double* value);
SYNCSTAB_API syncstab_status syncstab_linear_decompose(const syncstab_linear* sys, const double* Y,
                                                       char** result_json);

/* ---- experiment driver ---- */
typedef struct syncstab_run_options {
  const char* out_dir; /* NULL: run.output_dir of the config */
  int has_seed;
  uint64_t seed;
  int has_horizon;
  double horizon;
  int jobs;
} syncstab_run_options;

SYNCSTAB_API void syncstab_run_options_init(syncstab_run_options* opts);
SYNCSTAB_API const char* syncstab_command_name(int index); /* NULL past the end */

/* Runs one subcommand on a JSON config. *exit_code follows the CLI contract
   (0 pass, 1 check failed, 2 usage or config error); summary_json, when not
   NULL, receives the command summary. The status is SYNCSTAB_OK whenever the
   command ran to a verdict, including failed checks. */
SYNCSTAB_API syncstab_status syncstab_run_command(const char* command, const char* config_json,
                                                  const syncstab_run_options* opts, int* exit_code,
                                                  char** summary_json);

#ifdef __cplusplus
}
#endif

#endif
