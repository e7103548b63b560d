#ifndef CMPS_H
#define CMPS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CmpsStatus {
  CMPS_STATUS_OK = 0,
  CMPS_STATUS_NULL_POINTER = 1,
  CMPS_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad input: schema, shapes, indices, preconditions.
   */
  CMPS_STATUS_VALIDATION = 3,
  /**
   * Input accepted, numerics failed.
   */
  CMPS_STATUS_NUMERICAL = 4,
  /**
   * A uniform-only call on a finite state or the reverse.
   */
  CMPS_STATUS_WRONG_KIND = 5,
  CMPS_STATUS_PANIC = 6,
} CmpsStatus;

/**
 * A uniform or finite state. Uniform states cache their normalization.
 */
typedef struct CmpsState CmpsState;

typedef struct CmpsEnergy {
  double kinetic;
  double potential;
  double interaction;
} CmpsEnergy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, static storage.
 */
const char *cmps_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next call on this thread.
 */
const char *cmps_last_error_message(void);

/**
 * Core error code (e.g. "SchemaError", "NonInjective") of the last failure, or NULL.
 */
const char *cmps_last_error_code(void);

/**
 * Parse a state from NUL-terminated JSON. On success `*out` owns a new handle.
 *
 * # Safety
 * `json` must be a valid C string, `out` a valid pointer.
 */
enum CmpsStatus cmps_state_from_json(const char *json, struct CmpsState **out_state);

/**
 * # Safety
 * `state` must come from `cmps_state_from_json` and not be used afterwards. NULL is ignored.
 */
void cmps_state_free(struct CmpsState *state);

/**
 * Serialize to JSON; free the result with `cmps_string_free`.
 *
 * # Safety
 * Valid handle and output pointer.
 */
enum CmpsStatus cmps_state_to_json(struct CmpsState *state, char **json);

/**
 * # Safety
 * `s` must come from this library. NULL is ignored.
 */
void cmps_string_free(char *s);

/**
 * Bond dimension, species count and kind (1 uniform, 0 finite). Any output may be NULL.
 *
 * # Safety
 * Valid handle; non-NULL outputs must be writable.
 */
enum CmpsStatus cmps_state_info(struct CmpsState *state,
                                size_t *d,
                                size_t *species,
                                int32_t *is_uniform);

/**
 * First-order regularity check with the default tolerance.
 *
 * # Safety
 * Valid handle and outputs.
 */
enum CmpsStatus cmps_check_regularity(struct CmpsState *state,
                                      int32_t *passed,
                                      double *max_residual);

/**
 * `<psi_a^dag psi_b>` per unit length of a uniform state.
 *
 * # Safety
 * Valid handle and outputs.
 */
enum CmpsStatus cmps_uniform_density(struct CmpsState *state,
                                     size_t a,
                                     size_t b,
                                     double *re,
                                     double *im);

/**
 * Energy densities; `masses` has one entry per species, `interaction` is a `CmpsInteraction`.
 *
 * # Safety
 * Valid handle, `masses` readable for `n_masses` entries, writable output.
 */
enum CmpsStatus cmps_uniform_energy(struct CmpsState *state,
                                    const double *masses,
                                    size_t n_masses,
                                    double potential,
                                    int32_t interaction,
                                    double c,
                                    double ell,
                                    struct CmpsEnergy *result);

/**
 * Connected `n_ab(p)` on `n` momenta; outputs hold `n` values each.
 *
 * # Safety
 * Arrays valid for `n` entries.
 */
enum CmpsStatus cmps_uniform_momentum_occupation(struct CmpsState *state,
                                                 size_t a,
                                                 size_t b,
                                                 const double *p,
                                                 size_t n,
                                                 double *re,
                                                 double *im);

/**
 * Correlation length; infinity when the transfer spectrum is degenerate at the top.
 *
 * # Safety
 * Valid handle and output.
 */
enum CmpsStatus cmps_uniform_correlation_length(struct CmpsState *state, double *xi);

/**
 * UV cutoff `Lambda` of `n_aa(p)`.
 *
 * # Safety
 * Valid handle and output.
 */
enum CmpsStatus cmps_uniform_uv_cutoff(struct CmpsState *state, size_t a, double *lambda);

/**
 * Norm of a finite state and the largest drift of the propagated norm along the grid.
 *
 * # Safety
 * Valid handle and outputs.
 */
enum CmpsStatus cmps_finite_norm(struct CmpsState *state, double *norm, double *max_deviation);

/**
 * Number of grid points of a finite state (N + 1).
 *
 * # Safety
 * Valid handle and output.
 */
enum CmpsStatus cmps_finite_grid_len(struct CmpsState *state, size_t *len);

/**
 * Normalized density profile `<psi_a^dag psi_b>(x_k)`; outputs hold `cmps_finite_grid_len` values.
 *
 * # Safety
 * Outputs valid for the full grid.
 */
enum CmpsStatus cmps_finite_density(struct CmpsState *state,
                                    size_t a,
                                    size_t b,
                                    double *re,
                                    double *im);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMPS_H */
