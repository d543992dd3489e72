#ifndef ERGOKIT_H
#define ERGOKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ErgokitStatus {
  ERGOKIT_STATUS_OK = 0,
  ERGOKIT_STATUS_NULL_POINTER = 1,
  ERGOKIT_STATUS_INVALID_ARGUMENT = 2,
  ERGOKIT_STATUS_PARSE_ERROR = 3,
  ERGOKIT_STATUS_DOMAIN_ERROR = 4,
  ERGOKIT_STATUS_NOT_CONVERGED = 5,
  ERGOKIT_STATUS_POWER_TOO_SMALL = 6,
  ERGOKIT_STATUS_NOT_IMPLEMENTED = 7,
  ERGOKIT_STATUS_BUFFER_TOO_SMALL = 8,
  ERGOKIT_STATUS_NOT_MIXING = 9,
  ERGOKIT_STATUS_PANIC = 10,
} ErgokitStatus;

typedef enum ErgokitKernelFamily {
  ERGOKIT_KERNEL_FAMILY_UNIFORM_BALL = 0,
  ERGOKIT_KERNEL_FAMILY_GAUSSIAN = 1,
} ErgokitKernelFamily;

typedef enum ErgokitBoundary {
  ERGOKIT_BOUNDARY_WRAP = 0,
  ERGOKIT_BOUNDARY_REFLECT = 1,
  ERGOKIT_BOUNDARY_RENORMALIZE = 2,
} ErgokitBoundary;

/**
 * A noise kernel.
 */
typedef struct ErgokitKernel ErgokitKernel;

/**
 * A map `T: [0,1] -> [0,1]` with its parameters.
 */
typedef struct ErgokitMap ErgokitMap;

/**
 * A discretized transfer operator (Ulam or piecewise Legendre).
 */
typedef struct ErgokitTransfer ErgokitTransfer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ergokit_version(void);

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ergokit_last_error(void);

/**
 * Parses a built-in map name or an expression in `x`.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ErgokitStatus ergokit_map_parse(const char *text, struct ErgokitMap **out);

/**
 * Binds a named map parameter.
 *
 * # Safety
 * `map` must come from [`ergokit_map_parse`]; `name` must be NUL-terminated.
 */
enum ErgokitStatus ergokit_map_set_param(struct ErgokitMap *map, const char *name, double value);

/**
 * Clip out-of-range values to [0,1] instead of failing.
 *
 * # Safety
 * `map` must come from [`ergokit_map_parse`].
 */
enum ErgokitStatus ergokit_map_set_clamp(struct ErgokitMap *map, bool clamp);

/**
 * # Safety
 * `map` must come from [`ergokit_map_parse`]; `out` must be valid.
 */
enum ErgokitStatus ergokit_map_eval(const struct ErgokitMap *map, double x, double *out);

/**
 * # Safety
 * `map` must come from [`ergokit_map_parse`] and not be used afterwards.
 * Null is ignored.
 */
void ergokit_map_free(struct ErgokitMap *map);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum ErgokitStatus ergokit_kernel_new(enum ErgokitKernelFamily family,
                                      double epsilon,
                                      enum ErgokitBoundary boundary,
                                      struct ErgokitKernel **out);

/**
 * Parses `family:epsilon[:boundary]`, e.g. `gaussian:0.05:wrap`.
 *
 * # Safety
 * `text` must be NUL-terminated and `out` valid.
 */
enum ErgokitStatus ergokit_kernel_parse(const char *text, struct ErgokitKernel **out);

/**
 * Density of the next state at `x` given the noiseless image `center`.
 *
 * # Safety
 * `kernel` must come from a kernel constructor; `out` must be valid.
 */
enum ErgokitStatus ergokit_kernel_density(const struct ErgokitKernel *kernel,
                                          double center,
                                          double x,
                                          double *out);

/**
 * # Safety
 * `kernel` must come from a kernel constructor and not be used afterwards.
 * Null is ignored.
 */
void ergokit_kernel_free(struct ErgokitKernel *kernel);

/**
 * Column-stochastic Ulam matrix on `n_bins` equal bins.
 *
 * # Safety
 * `map` and `kernel` must be live handles; `out` must be valid.
 */
enum ErgokitStatus ergokit_transfer_ulam(const struct ErgokitMap *map,
                                         const struct ErgokitKernel *kernel,
                                         size_t n_bins,
                                         struct ErgokitTransfer **out);

/**
 * Galerkin matrix on piecewise Legendre polynomials of degree `degree`
 * (Gaussian kernels only).
 *
 * # Safety
 * `map` and `kernel` must be live handles; `out` must be valid.
 */
enum ErgokitStatus ergokit_transfer_piecewise(const struct ErgokitMap *map,
                                              const struct ErgokitKernel *kernel,
                                              double piece_width,
                                              size_t degree,
                                              struct ErgokitTransfer **out);

/**
 * Dimension of the operator (0 for a null handle).
 *
 * # Safety
 * `transfer` must be a live handle or null.
 */
size_t ergokit_transfer_dim(const struct ErgokitTransfer *transfer);

/**
 * Copies the matrix, row-major, into `out` (`len` must be at least dim^2).
 *
 * # Safety
 * `transfer` must be live; `out` must point to `len` writable doubles.
 */
enum ErgokitStatus ergokit_transfer_matrix(const struct ErgokitTransfer *transfer,
                                           double *out,
                                           size_t len);

/**
 * # Safety
 * `transfer` must be live and not used afterwards. Null is ignored.
 */
void ergokit_transfer_free(struct ErgokitTransfer *transfer);

/**
 * Stationary density by power iteration. Writes `dim` values to `out`: bin
 * masses for Ulam operators, Legendre coefficients for piecewise ones.
 * `residual` (nullable) receives `||P rho - rho||_1`.
 *
 * # Safety
 * `transfer` must be live; `out` must point to `len` writable doubles;
 * `residual` must be valid or null.
 */
enum ErgokitStatus ergokit_stationary(const struct ErgokitTransfer *transfer,
                                      double tol,
                                      size_t max_iter,
                                      double *out,
                                      size_t len,
                                      double *residual);

/**
 * `1 - |lambda_2|`.
 *
 * # Safety
 * `transfer` must be live; `gap` must be valid.
 */
enum ErgokitStatus ergokit_spectral_gap(const struct ErgokitTransfer *transfer,
                                        double tol,
                                        double *gap);

/**
 * Doeblin overlap lower bound over `grid` starting points.
 *
 * # Safety
 * `map` and `kernel` must be live; `out` must be valid.
 */
enum ErgokitStatus ergokit_doeblin_bound(const struct ErgokitMap *map,
                                         const struct ErgokitKernel *kernel,
                                         size_t grid,
                                         double *out);

/**
 * Memory (one-step channel capacity, bits) of the system on `n_states` bins.
 * `slack` (nullable) receives the certified optimality gap.
 *
 * # Safety
 * `map` and `kernel` must be live; `bits` must be valid; `slack` valid or null.
 */
enum ErgokitStatus ergokit_memory(const struct ErgokitMap *map,
                                  const struct ErgokitKernel *kernel,
                                  size_t n_states,
                                  double tol,
                                  double *bits,
                                  double *slack);

/**
 * Capacity in bits of the channel whose `n x n` row-stochastic matrix is
 * given row-major in `rows`. `input` (nullable, `n` doubles) receives the
 * optimal input law.
 *
 * # Safety
 * `rows` must point to `n * n` doubles; `bits` must be valid; `input`
 * must point to `n` writable doubles or be null.
 */
enum ErgokitStatus ergokit_channel_capacity(const double *rows,
                                            size_t n,
                                            double tol,
                                            double *bits,
                                            double *input);

/**
 * Degree `ceil((n+2) ln 2 / sqrt(2 gamma))` of the power polynomial.
 */
size_t ergokit_power_degree(double gamma, uint32_t bits);

/**
 * `out = p(P) v`, the certified approximation of `P^T v` for `T` given as
 * text (`"2^40"`, `"1000000"`), assuming spectral gap `gamma`.
 *
 * # Safety
 * `transfer` must be live; `power` NUL-terminated; `v` and `out` must each
 * point to `len` doubles with `len` equal to the operator dimension.
 */
enum ErgokitStatus ergokit_power_apply(const struct ErgokitTransfer *transfer,
                                       double gamma,
                                       const char *power,
                                       uint32_t bits,
                                       const double *v,
                                       double *out,
                                       size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERGOKIT_H */
