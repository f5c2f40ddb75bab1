#ifndef MFCONTROL_H
#define MFCONTROL_H

/* Generated by cbindgen from the mfcontrol-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum MfcStatus {
  MFC_STATUS_OK = 0,
  MFC_STATUS_NULL_POINTER = 1,
  MFC_STATUS_INVALID_UTF8 = 2,
  MFC_STATUS_CONFIG = 3,
  MFC_STATUS_INVALID_ARGUMENT = 4,
  // A solver error: non-finite values, failed solves, blow-up.
  MFC_STATUS_NUMERICAL = 5,
  MFC_STATUS_OUT_OF_RANGE = 6,
  MFC_STATUS_IO = 7,
  MFC_STATUS_PANIC = 8,
} MfcStatus;

// Parsed run configuration.
typedef struct MfcConfig MfcConfig;

// Outcome of a run: iteration records and the final policy.
typedef struct MfcReport MfcReport;

// Sampled solution of the flocking Riccati equation.
typedef struct MfcRiccati MfcRiccati;

// One row of the per-iteration report.
typedef struct MfcRecord {
  size_t m;
  // Cost estimate `J(phi^m)` at the evaluation seed.
  double j;
  // Monte Carlo standard error of `j`.
  double std_error;
  double grad_norm;
  double wall_ms;
} MfcRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *mfc_last_error_message(void);

void mfc_clear_last_error(void);

// Library version as a static NUL-terminated string.
const char *mfc_version(void);

// Parses configuration text (`key = value` lines).
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum MfcStatus mfc_config_parse(const char *text, struct MfcConfig **out);

// # Safety
// `cfg` must come from [`mfc_config_parse`] (or be null) and not be used afterwards.
void mfc_config_free(struct MfcConfig *cfg);

// Overrides the method: `"fipde"`, `"ipde"` or `"emreg"`.
//
// # Safety
// `cfg` must be a live handle; `method` a NUL-terminated string.
enum MfcStatus mfc_config_set_method(struct MfcConfig *cfg, const char *method);

// # Safety
// `cfg` must be a live handle.
enum MfcStatus mfc_config_set_iterations(struct MfcConfig *cfg, size_t iterations);

// Runs the configured method in memory; no files are written.
//
// When the solver fails mid-run the report of the completed iterations is
// still returned through `out` together with the error status; query it
// with [`mfc_report_error`].
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum MfcStatus mfc_run(const struct MfcConfig *cfg, struct MfcReport **out);

// # Safety
// `report` must come from [`mfc_run`] (or be null) and not be used afterwards.
void mfc_report_free(struct MfcReport *report);

// Number of iteration records (`iterations + 1` for a complete run).
//
// # Safety
// `report` must be a live handle or null (returns 0).
size_t mfc_report_len(const struct MfcReport *report);

// Error message of a run that stopped early, or null. Owned by the report.
//
// # Safety
// `report` must be a live handle or null.
const char *mfc_report_error(const struct MfcReport *report);

// Copies record `m` into `out`.
//
// # Safety
// `report` must be a live handle; `out` must be writable.
enum MfcStatus mfc_report_record(const struct MfcReport *report, size_t m, struct MfcRecord *out);

// State and control dimensions of the trained policy.
//
// # Safety
// `report` must be a live handle; outputs must be writable.
enum MfcStatus mfc_report_policy_dims(const struct MfcReport *report,
                                      size_t *state_dim,
                                      size_t *control_dim);

// Evaluates the final policy `phi(t, x)` by multilinear interpolation.
// `x` holds `state_dim` values and `out` receives `control_dim` values.
//
// # Safety
// `report` must be a live handle; `x` and `out` must hold the given lengths.
enum MfcStatus mfc_report_policy_eval(const struct MfcReport *report,
                                      double t,
                                      const double *x,
                                      size_t state_dim,
                                      double *out,
                                      size_t control_dim);

// Soft thresholding: `out_i = sign(a_i) max(|a_i| - tau * weight, 0)`.
//
// # Safety
// `a` and `out` must hold `len` values (they may alias).
enum MfcStatus mfc_prox_l1(double tau, double weight, const double *a, double *out, size_t len);

// Projection onto the box `[lo_i, hi_i]`.
//
// # Safety
// All buffers must hold `len` values; `a` and `out` may alias.
enum MfcStatus mfc_prox_box(const double *lo,
                            const double *hi,
                            const double *a,
                            double *out,
                            size_t len);

// Solves the flocking Riccati equation backward from `a(T) = 2`.
//
// # Safety
// `out` must be writable.
enum MfcStatus mfc_riccati_solve(double k,
                                 double gamma1,
                                 double horizon,
                                 double dt_ode,
                                 struct MfcRiccati **out);

// # Safety
// `sol` must come from [`mfc_riccati_solve`] (or be null) and not be used afterwards.
void mfc_riccati_free(struct MfcRiccati *sol);

// Number of stored samples.
//
// # Safety
// `sol` must be a live handle or null (returns 0).
size_t mfc_riccati_len(const struct MfcRiccati *sol);

// `a(t)`, linearly interpolated between samples.
//
// # Safety
// `sol` must be a live handle; `out` must be writable.
enum MfcStatus mfc_riccati_value(const struct MfcRiccati *sol, double t, double *out);

// Copies up to `cap` samples (forward in time) into `buf`; returns the
// number written.
//
// # Safety
// `sol` must be a live handle or null; `buf` must hold `cap` values.
size_t mfc_riccati_samples(const struct MfcRiccati *sol, double *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFCONTROL_H */
