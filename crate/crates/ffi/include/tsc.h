#ifndef TSC_H
#define TSC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  TSC_CONTROLLER_FIX_TIME = 0,
  TSC_CONTROLLER_WEBSTER = 1,
  TSC_CONTROLLER_MAX_PRESSURE = 2,
  TSC_CONTROLLER_RL = 3,
  TSC_CONTROLLER_REASON_LIGHT = 4,
} TscController;

// Outcome of a phase request, mirroring the simulator's.
typedef enum {
  TSC_REQUEST_NO_OP = 0,
  TSC_REQUEST_ACCEPTED = 1,
  TSC_REQUEST_REJECTED_MIN_GREEN = 2,
  TSC_REQUEST_IGNORED_YELLOW = 3,
} TscRequest;

typedef enum {
  TSC_STATUS_OK = 0,
  TSC_STATUS_NULL_POINTER = 1,
  TSC_STATUS_INVALID_ARGUMENT = 2,
  TSC_STATUS_CONFIG = 3,
  TSC_STATUS_DOMAIN = 4,
  TSC_STATUS_NUMERIC = 5,
  TSC_STATUS_CONTRACT = 6,
  TSC_STATUS_SERIALIZATION = 7,
  TSC_STATUS_IO = 8,
  // The output buffer is smaller than the value; the required length
  // was still written.
  TSC_STATUS_BUFFER_TOO_SMALL = 9,
  TSC_STATUS_TRAINING = 10,
  TSC_STATUS_PANIC = 11,
} TscStatus;

typedef struct TscPolicy TscPolicy;

// A running simulation plus the observation window a policy reads.
typedef struct TscSim TscSim;

// Episode metrics. Emergency fields are NaN when no emergency vehicle
// completed.
typedef struct {
  double att;
  double awt;
  double aett;
  double aewt;
  uint64_t completed;
  uint64_t emv_completed;
  uint64_t residual;
  uint64_t preserved;
  uint64_t refined;
} TscMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *tsc_version(void);

// Message of the last failed call on this thread; valid until the next
// failing call on the same thread. Empty when nothing failed yet.
const char *tsc_last_error(void);

// Build a simulation from a scenario TOML document (NULL for the default
// scenario) with a `window`-frame observation history (0 for the default).
//
// # Safety
// `scenario_toml` is NULL or a valid C string; `out_sim` is writable.
TscStatus tsc_sim_new(const char *scenario_toml, size_t window, TscSim **out_sim);

// # Safety
// `sim` is NULL or a handle from [`tsc_sim_new`] not yet freed.
void tsc_sim_free(TscSim *sim);

// Advance one second.
//
// # Safety
// `sim` is a live handle.
TscStatus tsc_sim_step(TscSim *sim);

// # Safety
// `sim` is a live handle; `outcome` is NULL or writable.
TscStatus tsc_sim_request_phase(TscSim *sim, uint32_t phase, TscRequest *outcome);

// # Safety
// `sim` is a live handle; `clock` is writable.
TscStatus tsc_sim_clock(const TscSim *sim, uint64_t *clock);

// Movement and phase counts of the intersection.
//
// # Safety
// `sim` is a live handle; both outputs are writable.
TscStatus tsc_sim_shape(const TscSim *sim, size_t *movements, size_t *phases);

// Phases admissible at the current tick, ascending.
//
// # Safety
// `sim` is a live handle; `phases` holds `cap` elements; `len` is writable.
TscStatus tsc_sim_available(const TscSim *sim, uint32_t *phases, size_t cap, size_t *len);

// Current sensor state, movements x 7 features, row-major.
//
// # Safety
// `sim` is a live handle; `features` holds `cap` elements; `len` is writable.
TscStatus tsc_sim_sensor(const TscSim *sim,
                         uint64_t flow_window,
                         double *features,
                         size_t cap,
                         size_t *len);

// Metrics over vehicles completed so far; queued vehicles count as residual.
//
// # Safety
// `sim` is a live handle; `metrics` is writable.
TscStatus tsc_sim_metrics(const TscSim *sim, TscMetrics *metrics);

// # Safety
// `path` is a valid C string; `out_policy` is writable.
TscStatus tsc_policy_load(const char *path, TscPolicy **out_policy);

// # Safety
// `policy` is NULL or a handle from [`tsc_policy_load`] not yet freed.
void tsc_policy_free(TscPolicy *policy);

// Greedy policy phase for the current tick. Records the tick's sensor
// frame in the simulation's window once per clock value.
//
// # Safety
// Both handles are live; `phase` is writable.
TscStatus tsc_policy_act(const TscPolicy *policy, TscSim *sim, uint32_t *phase);

// Run one full episode. `policy` may be NULL for the fixed baselines;
// reasonlight uses the rule-based evaluator with all prompt components.
//
// # Safety
// `scenario_toml` is NULL or a valid C string; `policy` is NULL or live;
// `metrics` is writable.
TscStatus tsc_run_episode(const char *scenario_toml,
                          TscController controller,
                          const TscPolicy *policy,
                          TscMetrics *metrics);

// Rule-based evaluator over a wire-format prompt document (JSON). Writes
// the chosen phase and, when `explanation` is non-NULL, the NUL-terminated
// explanation; `explanation_len` receives its length including the NUL.
//
// # Safety
// `wire_json` is a valid C string; `phase` and `explanation_len` are
// writable; `explanation` is NULL or holds `cap` bytes.
TscStatus tsc_refine_rule(const char *wire_json,
                          uint32_t *phase,
                          char *explanation,
                          size_t cap,
                          size_t *explanation_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TSC_H */
