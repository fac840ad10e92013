#ifndef STALEFED_H
#define STALEFED_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The nonzero values match the CLI exit codes where one exists.
 */
typedef enum StalefedStatus {
  STALEFED_STATUS_OK = 0,
  STALEFED_STATUS_OTHER = 1,
  STALEFED_STATUS_CHECK_FAILED = 2,
  STALEFED_STATUS_CONFIG = 3,
  STALEFED_STATUS_DIVERGENCE = 4,
  STALEFED_STATUS_NULL_POINTER = 5,
  STALEFED_STATUS_PANIC = 6,
} StalefedStatus;

/**
 * A parsed experiment spec.
 */
typedef struct StalefedSpec StalefedSpec;

/**
 * The result of one training run.
 */
typedef struct StalefedTrace StalefedTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *stalefed_version(void);

/**
 * Message of the last failed call on this thread, or null if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *stalefed_last_error(void);

/**
 * Loads a spec file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum StalefedStatus stalefed_spec_load(const char *path, struct StalefedSpec **out);

/**
 * Parses spec text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum StalefedStatus stalefed_spec_parse(const char *text, struct StalefedSpec **out);

/**
 * # Safety
 * `spec` must be null or a handle from `stalefed_spec_load`/`stalefed_spec_parse`
 * that has not been freed.
 */
void stalefed_spec_free(struct StalefedSpec *spec);

/**
 * Writes `1 - N/K` for the spec.
 *
 * # Safety
 * `spec` must be a live handle and `out` writable.
 */
enum StalefedStatus stalefed_spec_beta(const struct StalefedSpec *spec, double *out);

/**
 * Replaces the output root directory.
 *
 * # Safety
 * `spec` must be a live handle and `dir` a NUL-terminated string.
 */
enum StalefedStatus stalefed_spec_set_out(struct StalefedSpec *spec, const char *dir);

/**
 * Runs one training trajectory with the spec's run settings and base seed.
 *
 * # Safety
 * `spec` must be a live handle and `out` writable.
 */
enum StalefedStatus stalefed_train(const struct StalefedSpec *spec, struct StalefedTrace **out);

/**
 * # Safety
 * `trace` must be null or a handle from `stalefed_train` that has not been freed.
 */
void stalefed_trace_free(struct StalefedTrace *trace);

/**
 * Number of recorded rounds, or 0 for a null handle.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
size_t stalefed_trace_len(const struct StalefedTrace *trace);

/**
 * Parameter dimension, or 0 for a null handle.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
size_t stalefed_trace_dim(const struct StalefedTrace *trace);

/**
 * Step size the run used, or NaN for a null handle.
 *
 * # Safety
 * `trace` must be null or a live handle.
 */
double stalefed_trace_eta(const struct StalefedTrace *trace);

/**
 * Copies `||grad f(w^t)||^2` for every round into `buf` (at least `stalefed_trace_len` slots).
 *
 * # Safety
 * `trace` must be a live handle and `buf` valid for `len` writes.
 */
enum StalefedStatus stalefed_trace_grad_norm_sq(const struct StalefedTrace *trace,
                                                double *buf,
                                                size_t len);

/**
 * Copies the final parameter vector into `buf` (at least `stalefed_trace_dim` slots).
 *
 * # Safety
 * `trace` must be a live handle and `buf` valid for `len` writes.
 */
enum StalefedStatus stalefed_trace_final_w(const struct StalefedTrace *trace,
                                           double *buf,
                                           size_t len);

/**
 * `beta^l (1 - beta)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum StalefedStatus stalefed_geometric_pmf(double beta, uint64_t l, double *out);

/**
 * Convergence bound on the minimum expected squared gradient norm.
 * `out_valid` receives whether the large-`T` condition holds.
 *
 * # Safety
 * `out_bound` and `out_valid` must be writable.
 */
enum StalefedStatus stalefed_theorem_bound(double smoothness,
                                           double f0,
                                           double fstar,
                                           double sigma2,
                                           double mu,
                                           double beta,
                                           size_t rounds,
                                           double *out_bound,
                                           bool *out_valid);

/**
 * Runs the spec in `mode` (`train`, `staleness`, `lemma1`, `theorem` or
 * `sweep`) and writes outputs under `<out>/<name>`. Returns `CheckFailed`
 * when the run completed but an asserted check did not pass.
 *
 * # Safety
 * `spec` must be a live handle and `mode` a NUL-terminated string.
 */
enum StalefedStatus stalefed_run(const struct StalefedSpec *spec, const char *mode);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STALEFED_H */
