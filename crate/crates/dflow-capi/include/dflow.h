#ifndef DFLOW_H
#define DFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every ABI call.
 */
typedef enum DflowStatus {
  DflowStatus_Ok = 0,
  /**
   * A null pointer, malformed UTF-8, or otherwise unusable argument.
   */
  DflowStatus_InvalidArgument = 1,
  /**
   * The configuration document did not parse or validate.
   */
  DflowStatus_ParseError = 2,
  /**
   * Inputs were structurally fine but outside the mathematical domain.
   */
  DflowStatus_DomainError = 3,
  /**
   * A linear solve or iteration failed numerically.
   */
  DflowStatus_NumericalError = 4,
  /**
   * A panic or other unexpected failure inside the library.
   */
  DflowStatus_InternalError = 5,
} DflowStatus;

/**
 * Opaque flow handle (a validated model flow).
 */
typedef struct DflowFlow DflowFlow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent error on this thread, or null if none.
 * The returned string is owned by the caller; free with `dflow_string_free`.
 */
char *dflow_last_error(void);

/**
 * Release a string returned by this library. Null is allowed.
 *
 * # Safety
 * `s` must have been returned by this library and not freed before.
 */
void dflow_string_free(char *s);

/**
 * Build a flow from the JSON `flow` block of a scenario document, e.g.
 * `{"family":"sphere","dimension":2,"r_sq":"1 - 2*t","interval":[0,0.2]}`.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string; `out` must be non-null.
 */
enum DflowStatus dflow_flow_from_json(const char *json, struct DflowFlow **out);

/**
 * Release a flow handle. Null is allowed.
 *
 * # Safety
 * `flow` must have been returned by `dflow_flow_from_json` and not freed.
 */
void dflow_flow_free(struct DflowFlow *flow);

/**
 * Manifold dimension of the flow.
 *
 * # Safety
 * `flow` must be a live handle; `out` must be non-null.
 */
enum DflowStatus dflow_flow_dimension(const struct DflowFlow *flow, uintptr_t *out);

/**
 * Time interval of the flow, in its own time convention.
 *
 * # Safety
 * `flow` must be a live handle; `lo` and `hi` must be non-null.
 */
enum DflowStatus dflow_flow_interval(const struct DflowFlow *flow, double *lo, double *hi);

/**
 * Pointwise infimum of the D-form over directions at `(t, x)`. Writes the
 * minimum to `out_min` and whether it is finite to `out_finite`; an
 * unbounded-below form reports `out_finite = false` and `out_min = -inf`.
 * `t` is in the flow's own time convention; `x` is the angular coordinate
 * and ignored on homogeneous flows.
 *
 * # Safety
 * `flow` must be a live handle; `out_min` and `out_finite` must be non-null.
 */
enum DflowStatus dflow_flow_min_d(const struct DflowFlow *flow,
                                  double t,
                                  double x,
                                  double *out_min,
                                  bool *out_finite);

/**
 * Run every check of a scenario document. On success writes the reports as
 * a JSON array to `out_reports` (caller-owned) and the batch verdict to
 * `out_exit_code`: 0 all passed, 1 some check failed, 2 passed but some
 * margin was inside tolerance. `parallel` <= 1 runs serially.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string; `out_reports` and
 * `out_exit_code` must be non-null.
 */
enum DflowStatus dflow_scenario_run(const char *config_json,
                                    int32_t parallel,
                                    char **out_reports,
                                    int32_t *out_exit_code);

/**
 * Plain-text summary table for a scenario run (same layout as the CLI).
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string; `out_table` must be
 * non-null.
 */
enum DflowStatus dflow_scenario_summary(const char *config_json, char **out_table);

/**
 * Trace a monotone functional along the scenario's flow and return
 * `tau,value` CSV. `functional` is one of `"f"`, `"w"`, `"entropy"`.
 *
 * # Safety
 * `config_json` and `functional` must be valid NUL-terminated strings;
 * `out_csv` must be non-null.
 */
enum DflowStatus dflow_trace_csv(const char *config_json, const char *functional, char **out_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DFLOW_H */
