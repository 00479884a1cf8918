#ifndef IPREG_H
#define IPREG_H

/* Generated by cbindgen from the ipreg-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes mirroring the CLI exit codes, plus FFI-specific failures.
typedef enum IpregStatus {
  IPREG_STATUS_OK = 0,
  IPREG_STATUS_USAGE_ERROR = 2,
  IPREG_STATUS_DATA_ERROR = 3,
  IPREG_STATUS_NUMERICAL_ERROR = 4,
  IPREG_STATUS_NULL_POINTER = 5,
  IPREG_STATUS_INVALID_UTF8 = 6,
  IPREG_STATUS_PANIC = 7,
  IPREG_STATUS_BUFFER_TOO_SMALL = 8,
} IpregStatus;

// Opaque handle to a fitted model.
typedef struct IpregFit IpregFit;

// Opaque handle to a loaded (estimable) model.
typedef struct IpregModel IpregModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent error on this thread. The pointer stays
// valid until the next failing call on the same thread; do not free it.
const char *ipreg_last_error(void);

// Free a string returned by this API.
//
// # Safety
// `s` must have been returned by one of the string-returning functions of
// this library and not freed before.
void ipreg_string_free(char *s);

// Load a model from CSV text and a TOML model configuration.
// On success writes a handle to `out`; free it with [`ipreg_model_free`].
//
// # Safety
// `csv_text` and `config_toml` must be valid NUL-terminated strings and
// `out` a valid pointer.
enum IpregStatus ipreg_model_from_csv(const char *csv_text,
                                      const char *config_toml,
                                      struct IpregModel **out);

// # Safety
// `model` must be a handle from [`ipreg_model_from_csv`], not yet freed.
void ipreg_model_free(struct IpregModel *model);

// # Safety
// `model` must be a valid model handle.
uintptr_t ipreg_model_sample_size(const struct IpregModel *model);

// Number of unconstrained hyperparameter slots (the length of theta).
//
// # Safety
// `model` must be a valid model handle.
uintptr_t ipreg_model_n_theta(const struct IpregModel *model);

// Human-readable theta layout (e.g. "lambda[1], lambda[2], log(psi)").
// Free the result with [`ipreg_string_free`].
//
// # Safety
// `model` must be a valid model handle.
char *ipreg_model_check_theta(const struct IpregModel *model);

// Estimate the model. `method` is one of "direct", "em", "mixed"; use
// [`ipreg_fit_fixed`] for fixed-hyperparameter evaluation. On success
// writes a fit handle to `out`; free it with [`ipreg_fit_free`].
//
// # Safety
// `model` must be a valid model handle, `method` a valid NUL-terminated
// string and `out` a valid pointer.
enum IpregStatus ipreg_fit(const struct IpregModel *model,
                           const char *method,
                           uint64_t seed,
                           uint32_t maxit,
                           double stop_crit,
                           struct IpregFit **out);

// Posterior evaluation at fixed hyperparameters given in theta space
// (`theta_len` must equal [`ipreg_model_n_theta`]).
//
// # Safety
// `model` must be a valid model handle; `theta` must point to `theta_len`
// readable doubles; `out` must be a valid pointer.
enum IpregStatus ipreg_fit_fixed(const struct IpregModel *model,
                                 const double *theta,
                                 uintptr_t theta_len,
                                 struct IpregFit **out);

// # Safety
// `fit` must be a handle from a fit function, not yet freed.
void ipreg_fit_free(struct IpregFit *fit);

// # Safety
// `fit` must be a valid fit handle.
double ipreg_fit_log_likelihood(const struct IpregFit *fit);

// # Safety
// `fit` must be a valid fit handle.
double ipreg_fit_psi(const struct IpregFit *fit);

// # Safety
// `fit` must be a valid fit handle.
double ipreg_fit_intercept(const struct IpregFit *fit);

// Error standard deviation 1/sqrt(psi).
//
// # Safety
// `fit` must be a valid fit handle.
double ipreg_fit_error_sd(const struct IpregFit *fit);

// Number of estimated hyperparameters.
//
// # Safety
// `fit` must be a valid fit handle.
uintptr_t ipreg_fit_n_params(const struct IpregFit *fit);

// Natural-scale value of estimated hyperparameter `index`.
//
// # Safety
// `fit` must be a valid fit handle and `value` a valid pointer.
enum IpregStatus ipreg_fit_param(const struct IpregFit *fit, uintptr_t index, double *value);

// Name of estimated hyperparameter `index` (e.g. "lambda[1]"), or NULL.
// Free the result with [`ipreg_string_free`].
//
// # Safety
// `fit` must be a valid fit handle.
char *ipreg_fit_param_name(const struct IpregFit *fit, uintptr_t index);

// Training root mean squared error of prediction.
//
// # Safety
// `fit` must be a valid fit handle and `value` a valid pointer.
enum IpregStatus ipreg_fit_training_rmse(const struct IpregFit *fit, double *value);

// The fit as a versioned JSON artifact. Free with [`ipreg_string_free`].
//
// # Safety
// `fit` must be a valid fit handle and `out` a valid pointer.
enum IpregStatus ipreg_fit_to_artifact_json(const struct IpregFit *fit, char **out);

// Rebuild a fit from an artifact JSON document.
//
// # Safety
// `json` must be a valid NUL-terminated string and `out` a valid pointer.
enum IpregStatus ipreg_fit_from_artifact_json(const char *json, struct IpregFit **out);

// Predict at new covariate values supplied as CSV text. Writes up to `cap`
// predictions into `mean` (and the credible bounds into `lower`/`upper`
// when non-NULL), storing the row count in `written`.
//
// # Safety
// `fit` must be a valid fit handle; `csv_text` a valid NUL-terminated
// string; `mean` (and `lower`/`upper` when non-NULL) must point to at
// least `cap` writable doubles; `written` must be a valid pointer.
enum IpregStatus ipreg_predict(const struct IpregFit *fit,
                               const char *csv_text,
                               double alpha,
                               double *mean,
                               double *lower,
                               double *upper,
                               uintptr_t cap,
                               uintptr_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IPREG_H */
