#ifndef DISTHASH_H
#define DISTHASH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

enum DhStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  DH_STATUS_OK = 0,
  DH_STATUS_NULL_ARGUMENT = 1,
  DH_STATUS_INVALID_UTF8 = 2,
  /**
   * The scenario text failed to parse or validate.
   */
  DH_STATUS_SCENARIO = 3,
  /**
   * The simulator refused the scenario while building it.
   */
  DH_STATUS_SIMULATION = 4,
  /**
   * The call does not fit the handle's state, e.g. metrics before a run.
   */
  DH_STATUS_STATE = 5,
  /**
   * A panic was caught at the boundary; the handle must be freed.
   */
  DH_STATUS_PANIC = 6,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum DhStatus DhStatus;
#else
typedef int32_t DhStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque simulation handle.
 */
typedef struct DhSim DhSim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses and validates scenario text without creating a handle.
 *
 * # Safety
 * `text` must be null or a NUL-terminated string.
 */
DhStatus dh_scenario_check(const char *text);

/**
 * Creates a handle from scenario text. On success `*out` receives a handle
 * to release with `dh_sim_free`; on failure it is set to null.
 *
 * # Safety
 * `text` must be null or a NUL-terminated string; `out` must be null or
 * point to writable storage for one pointer.
 */
DhStatus dh_sim_new(const char *text, struct DhSim **out);

/**
 * Overrides the scenario's seed for the next run.
 *
 * # Safety
 * `sim` must be null or a live handle from `dh_sim_new`.
 */
DhStatus dh_sim_set_seed(struct DhSim *sim, uint64_t seed);

/**
 * Records the event trace during the next run when `enabled` is nonzero.
 *
 * # Safety
 * `sim` must be null or a live handle from `dh_sim_new`.
 */
DhStatus dh_sim_set_trace(struct DhSim *sim, int32_t enabled);

/**
 * Runs the scenario to quiescence. `*violations` receives the number of
 * invariant violations, unexpected losses included. Running again replays
 * from scratch and replaces the previous outcome.
 *
 * # Safety
 * `sim` must be null or a live handle; `violations` must be null or
 * point to a writable `size_t`.
 */
DhStatus dh_sim_run(struct DhSim *sim, size_t *violations);

/**
 * Renders the metrics records of the last run into a new string.
 *
 * # Safety
 * `sim` must be null or a live handle; `out` must be null or point to
 * writable storage for one pointer.
 */
DhStatus dh_sim_metrics(struct DhSim *sim, char **out);

/**
 * Renders the event trace of the last run into a new string. The trace is
 * empty unless tracing was enabled before the run.
 *
 * # Safety
 * As for `dh_sim_metrics`.
 */
DhStatus dh_sim_trace(struct DhSim *sim, char **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `sim` must be null or a handle from `dh_sim_new` not yet freed.
 */
void dh_sim_free(struct DhSim *sim);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void dh_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dh_last_error(void);

/**
 * Static name of a status code; unknown codes are named "unknown".
 */
const char *dh_status_name(int32_t status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DISTHASH_H */
