#ifndef NGMPC_H
#define NGMPC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NgmpcStatus {
  NGMPC_STATUS_OK = 0,
  NGMPC_STATUS_NULL_POINTER = 1,
  NGMPC_STATUS_INVALID_ARGUMENT = 2,
  NGMPC_STATUS_CONFIG = 3,
  NGMPC_STATUS_NUMERICAL = 4,
  NGMPC_STATUS_SOLVER = 5,
  NGMPC_STATUS_PROTOCOL = 6,
  NGMPC_STATUS_IO = 7,
  NGMPC_STATUS_PANIC = 8,
} NgmpcStatus;

/**
 * A finished (possibly aborted) receding-horizon run.
 */
typedef struct NgmpcRun NgmpcRun;

/**
 * A validated scenario.
 */
typedef struct NgmpcScenario NgmpcScenario;

/**
 * Realised state of one agent.
 */
typedef struct NgmpcState {
  double x;
  double y;
  double z;
  double psi;
} NgmpcState;

/**
 * Outcome of the clearance bound.
 */
typedef struct NgmpcBound {
  /**
   * Upper bound on the collision probability; infinite when not applicable.
   */
  double bound;
  bool applicable;
} NgmpcBound;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread, or null. The pointer is
 * valid until the next call into the library from this thread.
 */
const char *ngmpc_last_error(void);

/**
 * Static name of a status code.
 */
const char *ngmpc_status_name(enum NgmpcStatus status);

/**
 * Parses and validates a scenario from TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_scenario_from_toml(const char *toml, struct NgmpcScenario **out);

/**
 * Loads one of the scenarios shipped with the library by name.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_scenario_bundled(const char *name, struct NgmpcScenario **out);

/**
 * # Safety
 * `scenario` must be null or a handle not yet freed.
 */
void ngmpc_scenario_free(struct NgmpcScenario *scenario);

/**
 * # Safety
 * `scenario` must be a live handle; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_scenario_agent_count(const struct NgmpcScenario *scenario, size_t *out);

/**
 * Overrides the number of global steps. Zero is rejected.
 *
 * # Safety
 * `scenario` must be a live handle.
 */
enum NgmpcStatus ngmpc_scenario_set_steps(struct NgmpcScenario *scenario, size_t steps);

/**
 * Runs the scenario with `seed`. A run that aborts part-way still yields a
 * handle; check [`ngmpc_run_completed`].
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_run(const struct NgmpcScenario *scenario,
                           uint64_t seed,
                           struct NgmpcRun **out);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void ngmpc_run_free(struct NgmpcRun *run);

/**
 * # Safety
 * `run` must be a live handle; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_run_completed(const struct NgmpcRun *run, bool *out);

/**
 * Number of executed global steps.
 *
 * # Safety
 * `run` must be a live handle; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_run_step_count(const struct NgmpcRun *run, size_t *out);

/**
 * State of agent `agent` (configuration order) after `step` steps;
 * `step = 0` is the initial state.
 *
 * # Safety
 * `run` must be a live handle; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_run_state(const struct NgmpcRun *run,
                                 size_t step,
                                 size_t agent,
                                 struct NgmpcState *out);

/**
 * Smallest distance between expected positions over all pairs and steps;
 * infinite for a single agent.
 *
 * # Safety
 * `run` must be a live handle; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_run_min_mean_distance(const struct NgmpcRun *run, double *out);

/**
 * Number of plans replaced by a fallback.
 *
 * # Safety
 * `run` must be a live handle; `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_run_fallback_count(const struct NgmpcRun *run, size_t *out);

/**
 * Writes the run log as JSON lines to `path`.
 *
 * # Safety
 * `run` must be a live handle; `path` must be a NUL-terminated string.
 */
enum NgmpcStatus ngmpc_run_save(const struct NgmpcRun *run, const char *path);

/**
 * Collision-probability bound from the first two moments of the clearance
 * variable.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum NgmpcStatus ngmpc_clearance_bound(double e_f, double e_f2, struct NgmpcBound *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NGMPC_H */
