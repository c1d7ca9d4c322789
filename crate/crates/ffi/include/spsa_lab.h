#ifndef SPSA_LAB_H
#define SPSA_LAB_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define SPSA_OK 0

/*
 A required pointer argument was null.
 */
#define SPSA_ERR_NULL 1

/*
 A string argument was not valid UTF-8.
 */
#define SPSA_ERR_UTF8 2

/*
 The call panicked; the handle arguments should be considered poisoned.
 */
#define SPSA_ERR_PANIC 3

/*
 An argument had the wrong size or kind for the handle it was used with.
 */
#define SPSA_ERR_ARGUMENT 4

typedef enum SpsaControllerKind {
  SPSA_CONTROLLER_KIND_STATIC = 0,
  SPSA_CONTROLLER_KIND_SPSA = 1,
  SPSA_CONTROLLER_KIND_PGC = 2,
} SpsaControllerKind;

typedef struct SpsaConfig SpsaConfig;

typedef struct SpsaController SpsaController;

typedef struct SpsaDesign SpsaDesign;

typedef struct SpsaDesignSummary {
  double c_d;
  double j_static;
  double j_spsa;
  /*
   Upper bound on the receding-horizon controller's performance.
   */
  double j_pgc_bound;
  size_t spsa_states;
  size_t static_iterations;
  size_t spsa_iterations;
} SpsaDesignSummary;

typedef struct SpsaMetrics {
  double j;
  double z1;
  double z2;
  double u;
  double w;
  size_t samples;
  bool storage_infeasible;
  size_t override_steps;
  double final_energy;
} SpsaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty if none. Valid
 until the next failing call on the same thread.
 */
const char *spsa_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *spsa_version(void);

/*
 Built-in default configuration.

 # Safety
 `out` must be a valid pointer to writable storage for a handle.
 */
int32_t spsa_config_default(struct SpsaConfig **out);

/*
 Parses a TOML configuration; missing keys take their defaults.

 # Safety
 `toml` must be a NUL-terminated string and `out` writable.
 */
int32_t spsa_config_from_toml(const char *toml, struct SpsaConfig **out);

/*
 # Safety
 `cfg` must be null or a handle from this library not yet freed.
 */
void spsa_config_free(struct SpsaConfig *cfg);

/*
 Runs the full design: static damping, certified admittance and the
 receding-horizon plan.

 # Safety
 `cfg` must be a live configuration handle and `out` writable.
 */
int32_t spsa_design_run(const struct SpsaConfig *cfg, struct SpsaDesign **out);

/*
 # Safety
 `design` must be a live design handle and `out` writable.
 */
int32_t spsa_design_summary(const struct SpsaDesign *design, struct SpsaDesignSummary *out);

/*
 # Safety
 `design` must be null or a handle from this library not yet freed.
 */
void spsa_design_free(struct SpsaDesign *design);

/*
 Extracts one of the three designed controllers as an independent handle.

 # Safety
 `design` must be a live design handle and `out` writable.
 */
int32_t spsa_design_controller(const struct SpsaDesign *design,
                               enum SpsaControllerKind kind,
                               struct SpsaController **out);

/*
 Static damping controller with gain `c_d`.

 # Safety
 `out` must be writable.
 */
int32_t spsa_controller_static(double c_d, struct SpsaController **out);

/*
 Loads a controller file written by the command-line `design` step.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
int32_t spsa_controller_read(const char *path, struct SpsaController **out);

/*
 # Safety
 `ctrl` must be a live controller handle and `out` writable.
 */
int32_t spsa_controller_kind(const struct SpsaController *ctrl, enum SpsaControllerKind *out);

/*
 # Safety
 `ctrl` must be null or a handle from this library not yet freed.
 */
void spsa_controller_free(struct SpsaController *ctrl);

/*
 Checks self-powered feasibility against the configuration's design loss
 model. `feasible` receives the verdict; an infeasible controller is not
 an error.

 # Safety
 Handles must be live and `feasible` writable.
 */
int32_t spsa_verify(const struct SpsaController *ctrl,
                    const struct SpsaConfig *cfg,
                    bool *feasible);

/*
 State dimension of a receding-horizon controller's augmented state.

 # Safety
 `ctrl` must be a live controller handle; `n_states` and `n_inputs` writable.
 */
int32_t spsa_pgc_dimensions(const struct SpsaController *ctrl, size_t *n_states, size_t *n_inputs);

/*
 Solves the per-step program for augmented state `x` (`n_states` values)
 and writes the optimal inputs (`n_inputs` values, transducer current
 first) and the multiplier.

 # Safety
 `x` must point to `x_len` readable doubles and `u` to `u_len` writable
 doubles; `mu` must be writable or null.
 */
int32_t spsa_pgc_control(const struct SpsaController *ctrl,
                         const double *x,
                         size_t x_len,
                         double *u,
                         size_t u_len,
                         double *mu);

/*
 Closed-loop simulation of `ctrl` on the configured plant. `duration`
 overrides the configured horizon when positive.

 # Safety
 Handles must be live and `out` writable.
 */
int32_t spsa_simulate(const struct SpsaConfig *cfg,
                      const struct SpsaController *ctrl,
                      uint64_t seed,
                      double duration,
                      struct SpsaMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPSA_LAB_H */
