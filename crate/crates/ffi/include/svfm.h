/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SVFM_H
#define SVFM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. The nonzero values below 6 match the command-line exit
// codes.
typedef enum SvfmStatus {
  SVFM_STATUS_OK = 0,
  SVFM_STATUS_INTERNAL = 1,
  SVFM_STATUS_CONFIG = 2,
  SVFM_STATUS_DIVERGENCE = 3,
  SVFM_STATUS_CORRUPT_CHECKPOINT = 4,
  SVFM_STATUS_CHECK_FAILED = 5,
  SVFM_STATUS_INVALID_ARGUMENT = 6,
  SVFM_STATUS_NULL_POINTER = 7,
  SVFM_STATUS_IO = 8,
  SVFM_STATUS_NUMERIC = 9,
} SvfmStatus;

// A Gaussian mixture target with standard normal source.
typedef struct SvfmGmm SvfmGmm;

// A model restored from a checkpoint.
typedef struct SvfmModel SvfmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len - 1` bytes) and returns the full message
// length in bytes. Pass a null `buf` to query the length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t svfm_last_error(char *buf, size_t len);

// Loads a checkpoint file. On success `*out` owns a model that must be
// released with `svfm_model_free`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum SvfmStatus svfm_model_load(const char *path, struct SvfmModel **out);

// # Safety
// `model` must be null or come from `svfm_model_load`, and not be used
// afterwards.
void svfm_model_free(struct SvfmModel *model);

// Data dimension of the model, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t svfm_model_dim(const struct SvfmModel *model);

// Latent dimension, 0 for plain flow matching models.
//
// # Safety
// `model` must be null or a live handle.
size_t svfm_model_latent_dim(const struct SvfmModel *model);

// Draws `n` samples with `nfe` Euler steps into `out` (`n × dim`). The
// same seed gives the same samples as `svfm sample --seed`.
//
// # Safety
// `model` must be a live handle; `out` must hold `n * dim` values.
enum SvfmStatus svfm_model_sample(const struct SvfmModel *model,
                                  size_t n,
                                  size_t nfe,
                                  uint64_t seed,
                                  double *out);

// Learned velocity at `n` points `x` (`n × dim`) and time `t`. `z` is
// `n × latent_dim`, and must be null exactly when the latent dimension is 0.
//
// # Safety
// Buffers must match the stated sizes; `out` holds `n * dim` values.
enum SvfmStatus svfm_model_velocity(const struct SvfmModel *model,
                                    const double *x,
                                    size_t n,
                                    double t,
                                    const double *z,
                                    double *out);

// Builds a `k`-component mixture in `dim` dimensions: `weights` (k),
// `means` (k × dim), `stds` (k, isotropic).
//
// # Safety
// Buffers must match the stated sizes; `out` must be writable.
enum SvfmStatus svfm_gmm_new(size_t k,
                             size_t dim,
                             const double *weights,
                             const double *means,
                             const double *stds,
                             struct SvfmGmm **out);

// # Safety
// `gmm` must be null or come from `svfm_gmm_new`, and not be used
// afterwards.
void svfm_gmm_free(struct SvfmGmm *gmm);

// Closed-form marginal velocity of the independent coupling at `n` points
// (`n × dim`) and `0 ≤ t < 1`.
//
// # Safety
// Buffers must match the stated sizes; `out` holds `n * dim` values.
enum SvfmStatus svfm_gmm_velocity(const struct SvfmGmm *gmm,
                                  const double *x,
                                  size_t n,
                                  double t,
                                  double *out);

// Energy distance between point sets `a` (`na × dim`) and `b` (`nb × dim`).
//
// # Safety
// Buffers must match the stated sizes; `out` must be writable.
enum SvfmStatus svfm_energy_distance(const double *a,
                                     size_t na,
                                     const double *b,
                                     size_t nb,
                                     size_t dim,
                                     double *out);

// Binned non-intersection estimate for `n` pairs (`x0`, `x1`, each
// `n × dim`) over the `k` times in `t_grid` with bin width `h`.
//
// # Safety
// Buffers must match the stated sizes; `out` must be writable.
enum SvfmStatus svfm_v_functional(const double *x0,
                                  const double *x1,
                                  size_t n,
                                  size_t dim,
                                  const double *t_grid,
                                  size_t k,
                                  double h,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVFM_H */
