#ifndef GPMPC_H
#define GPMPC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum GpmpcStatus {
  GPMPC_STATUS_OK = 0,
  GPMPC_STATUS_NULL_POINTER = 1,
  GPMPC_STATUS_INVALID_INPUT = 2,
  /**
   * Unreadable file or malformed model text.
   */
  GPMPC_STATUS_IO = 3,
  GPMPC_STATUS_NUMERICAL = 4,
  GPMPC_STATUS_PLANT_FAULT = 5,
  GPMPC_STATUS_PANIC = 6,
} GpmpcStatus;

/**
 * Outcome reported by [`gpmpc_qp_solve`].
 */
typedef enum GpmpcQpStatus {
  GPMPC_QP_STATUS_OPTIMAL = 0,
  GPMPC_QP_STATUS_MAX_ITER = 1,
  GPMPC_QP_STATUS_INFEASIBLE = 2,
} GpmpcQpStatus;

/**
 * Opaque trained GP model.
 */
typedef struct GpmpcGp GpmpcGp;

/**
 * Opaque fuel cell stack simulator.
 */
typedef struct GpmpcPlant GpmpcPlant;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t gpmpc_last_error(char *buf, size_t len);

/**
 * Load a model file written by `gpmpc train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GpmpcStatus gpmpc_gp_load(const char *path, struct GpmpcGp **out);

/**
 * Parse a model from its text form.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GpmpcStatus gpmpc_gp_from_text(const char *text, struct GpmpcGp **out);

/**
 * Input dimension of the model, 0 for a null handle.
 *
 * # Safety
 * `gp` must be null or a live handle.
 */
size_t gpmpc_gp_input_dim(const struct GpmpcGp *gp);

/**
 * Posterior mean and latent variance at `x` (length `d`).
 *
 * # Safety
 * `gp` must be a live handle, `x` must hold `d` doubles, `mean` and
 * `variance` must be valid or null.
 */
enum GpmpcStatus gpmpc_gp_predict(const struct GpmpcGp *gp,
                                  const double *x,
                                  size_t d,
                                  double *mean,
                                  double *variance);

/**
 * Gradient of the posterior mean with respect to `x`, written to `jac`.
 *
 * # Safety
 * `gp` must be a live handle; `x` and `jac` must each hold `d` doubles.
 */
enum GpmpcStatus gpmpc_gp_mean_jacobian(const struct GpmpcGp *gp,
                                        const double *x,
                                        size_t d,
                                        double *jac);

/**
 * # Safety
 * `gp` must be null or a handle not yet freed.
 */
void gpmpc_gp_free(struct GpmpcGp *gp);

/**
 * Stack with default parameters, resting at the steady state of the given
 * flows (lpm) and current (A).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GpmpcStatus gpmpc_plant_new(double q_h2,
                                 double q_air,
                                 double current,
                                 struct GpmpcPlant **out);

/**
 * Integrate the stack for `dt` seconds under constant inputs.
 *
 * # Safety
 * `plant` must be a live handle.
 */
enum GpmpcStatus gpmpc_plant_step(struct GpmpcPlant *plant,
                                  double q_h2,
                                  double q_air,
                                  double current,
                                  double dt);

/**
 * Stack voltage for the current state under the given load.
 *
 * # Safety
 * `plant` must be a live handle and `voltage` a valid pointer.
 */
enum GpmpcStatus gpmpc_plant_voltage(const struct GpmpcPlant *plant,
                                     double q_h2,
                                     double q_air,
                                     double current,
                                     double *voltage);

/**
 * Anode hydrogen partial pressure, atm.
 *
 * # Safety
 * `plant` must be a live handle and `p_h2` a valid pointer.
 */
enum GpmpcStatus gpmpc_plant_pressure(const struct GpmpcPlant *plant, double *p_h2);

/**
 * # Safety
 * `plant` must be null or a handle not yet freed.
 */
void gpmpc_plant_free(struct GpmpcPlant *plant);

/**
 * Solve `min 1/2 z'Hz + g'z  s.t.  lb <= Az <= ub` with default settings.
 *
 * `h` is n x n, `a` is m x n, both row-major. Bounds beyond +-1e20 count as
 * infinite. `duals` (length m), `status` and `kkt_residual` may be null.
 *
 * # Safety
 * All non-null pointers must reference arrays of the stated lengths.
 */
enum GpmpcStatus gpmpc_qp_solve(size_t n,
                                size_t m,
                                const double *h,
                                const double *g,
                                const double *a,
                                const double *lb,
                                const double *ub,
                                double *z,
                                double *duals,
                                enum GpmpcQpStatus *status,
                                double *kkt_residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GPMPC_H */
