/* C interface to the G-Brownian mean-field SDE engine. */

#ifndef GSDE_H
#define GSDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of one call. Anything other than `GsdeOk` leaves a message
 * retrievable through `gsde_last_error_message`.
 */
typedef enum GsdeStatus {
  GsdeOk = 0,
  GsdeInvalidArgument = 1,
  GsdeContractViolation = 2,
  GsdeDiverged = 3,
  GsdeIoError = 4,
  GsdePanic = 5,
} GsdeStatus;

/**
 * Opaque simulated-driver handle.
 */
typedef struct GsdeBundle GsdeBundle;

/**
 * Opaque generator-set handle.
 */
typedef struct GsdeUncertainty GsdeUncertainty;

/**
 * Vector payoff callback: receives one terminal state of `dimension`
 * components and the caller's context.
 */
typedef double (*GsdeVectorPayoff)(const double *state, size_t dimension, void *context);

/**
 * Scalar payoff callback: receives a point and the caller's context.
 */
typedef double (*GsdeScalarPayoff)(double x, void *context);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library, static storage.
 */
const char *gsde_version(void);

/**
 * Message describing the most recent failure on this thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *gsde_last_error_message(void);

/**
 * Builds a one-generator set from a row-major `dimension x dimension`
 * symmetric positive-semidefinite matrix.
 *
 * # Safety
 * `entries` must point to `dimension * dimension` doubles; `out` must be
 * a valid location for one pointer. Free the result with
 * `gsde_uncertainty_free`.
 */
enum GsdeStatus gsde_uncertainty_singleton(size_t dimension,
                                           const double *entries,
                                           struct GsdeUncertainty **out);

/**
 * Builds the scalar volatility interval `[low, high]`, discretized to
 * its endpoint generators.
 *
 * # Safety
 * `out` must be a valid location for one pointer. Free the result with
 * `gsde_uncertainty_free`.
 */
enum GsdeStatus gsde_uncertainty_interval1d(double low, double high, struct GsdeUncertainty **out);

/**
 * Driver dimension of the set; 0 for a null handle.
 *
 * # Safety
 * `set` must be null or a live handle from this library.
 */
size_t gsde_uncertainty_dimension(const struct GsdeUncertainty *set);

/**
 * Releases a set handle; null is a no-op.
 *
 * # Safety
 * `set` must be null or an unreleased handle from this library.
 */
void gsde_uncertainty_free(struct GsdeUncertainty *set);

/**
 * Largest directional volatility `max_sigma sqrt(|a' sigma sigma b|)`
 * over the set's generators.
 *
 * # Safety
 * `a` and `b` must point to `len` doubles; `out` must be valid for one
 * double; `set` must be a live handle.
 */
enum GsdeStatus gsde_sigma_bar(const struct GsdeUncertainty *set,
                               const double *a,
                               const double *b,
                               size_t len,
                               double *out);

/**
 * Simulates driver paths and analytic covariation tensors on a uniform
 * grid over `[t_start, t_end]`, one constant-control scenario per
 * generator.
 *
 * # Safety
 * `set` must be a live handle and `out` a valid location for one
 * pointer. Free the result with `gsde_bundle_free`.
 */
enum GsdeStatus gsde_simulate(const struct GsdeUncertainty *set,
                              double t_start,
                              double t_end,
                              size_t steps,
                              size_t paths,
                              uint64_t seed,
                              struct GsdeBundle **out);

/**
 * Scenario count of a bundle; 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t gsde_bundle_scenarios(const struct GsdeBundle *bundle);

/**
 * Path count of a bundle; 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t gsde_bundle_paths(const struct GsdeBundle *bundle);

/**
 * Time-step count of a bundle's grid; 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t gsde_bundle_steps(const struct GsdeBundle *bundle);

/**
 * Driver dimension of a bundle; 0 for a null handle.
 *
 * # Safety
 * `bundle` must be null or a live handle.
 */
size_t gsde_bundle_dimension(const struct GsdeBundle *bundle);

/**
 * Releases a bundle handle; null is a no-op.
 *
 * # Safety
 * `bundle` must be null or an unreleased handle from this library.
 */
void gsde_bundle_free(struct GsdeBundle *bundle);

/**
 * Upper and lower expectations of `payoff` applied to the driver's
 * terminal state, maximized/minimized over scenarios. Either output
 * pointer may be null to skip that side (not both).
 *
 * # Safety
 * `bundle` must be a live handle; `payoff` must be a valid callback for
 * the duration of the call; non-null outputs must each hold one double.
 */
enum GsdeStatus gsde_terminal_expectation(const struct GsdeBundle *bundle,
                                          GsdeVectorPayoff payoff,
                                          void *context,
                                          double *upper,
                                          double *lower);

/**
 * Sublinear expectation of `payoff(B_horizon)` over adapted volatility
 * controls in `[sigma_low, sigma_high]` by explicit finite differences.
 * Pass `space_halfwidth <= 0` to use the default truncation radius.
 *
 * # Safety
 * `payoff` must be a valid callback for the duration of the call and
 * `out` must hold one double.
 */
enum GsdeStatus gsde_gheat_expectation(double sigma_low,
                                       double sigma_high,
                                       double space_halfwidth,
                                       size_t space_steps,
                                       size_t time_steps,
                                       double horizon,
                                       GsdeScalarPayoff payoff,
                                       void *context,
                                       double *out);

/**
 * Runs one configured experiment exactly like the `gsde` binary and
 * writes `exit_code` (0 success, 2 when a checked assertion failed).
 * `output_dir` may be null to use the config/environment default.
 *
 * # Safety
 * `config_path` must be a nul-terminated UTF-8 path; `output_dir` must
 * be null or nul-terminated; `exit_code` must hold one int.
 */
enum GsdeStatus gsde_run_config(const char *config_path,
                                const char *output_dir,
                                int32_t *exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSDE_H */
