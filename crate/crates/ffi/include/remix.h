#ifndef REMIX_H
#define REMIX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum RemixStatus {
  REMIX_STATUS_OK = 0,
  REMIX_STATUS_NULL_POINTER = 1,
  REMIX_STATUS_INVALID_ARGUMENT = 2,
  REMIX_STATUS_IO = 3,
  REMIX_STATUS_CHECKPOINT = 4,
  REMIX_STATUS_NUMERIC = 5,
  REMIX_STATUS_BUFFER_TOO_SMALL = 6,
  REMIX_STATUS_PANIC = 7,
} RemixStatus;

/**
 * Opaque model handle.
 */
typedef struct RemixHandle RemixHandle;

/**
 * Sizes of a loaded model.
 */
typedef struct RemixModelInfo {
  /**
   * Diffusion length `T`.
   */
  size_t timesteps;
  /**
   * Expert count `N`.
   */
  size_t experts;
  /**
   * Basis count `K`; 1 for plain checkpoints.
   */
  size_t bases;
  /**
   * Floats per sample.
   */
  size_t sample_len;
  /**
   * 0 for unconditional models.
   */
  size_t num_classes;
} RemixModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. On success `*out` owns a handle to release with
 * [`remix_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RemixStatus remix_model_load(const char *path, struct RemixHandle **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`remix_model_load`] and not be used afterwards.
 */
void remix_model_free(struct RemixHandle *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RemixStatus remix_model_info(const struct RemixHandle *model, struct RemixModelInfo *out);

/**
 * Expert index serving timestep `t`.
 *
 * # Safety
 * `model` must be a live handle and `out_expert` writable.
 */
enum RemixStatus remix_interval_of(const struct RemixHandle *model, size_t t, size_t *out_expert);

/**
 * Copies the `K` mixing coefficients of `expert` into `out`. Local mixers
 * report their first table. Plain checkpoints report `[1]`.
 *
 * # Safety
 * `model` must be a live handle and `out` must hold `len` floats.
 */
enum RemixStatus remix_coefficients(const struct RemixHandle *model,
                                    size_t expert,
                                    float *out,
                                    size_t len);

/**
 * Draws `n` samples into `out` (`n * sample_len` floats, row-major).
 * `steps = 0` uses all `T` steps. `labels` may be null; for conditional
 * models classes then cycle `0, 1, ...`. `runtime_mix != 0` mixes the
 * bank inside every step instead of precomputing experts.
 *
 * # Safety
 * `model` must be a live handle, `labels` null or `n` entries, and `out`
 * must hold `out_len` floats.
 */
enum RemixStatus remix_sample(const struct RemixHandle *model,
                              size_t n,
                              uint64_t seed,
                              size_t steps,
                              float guidance,
                              int32_t runtime_mix,
                              const uint32_t *labels,
                              float *out,
                              size_t out_len);

/**
 * Copies the calling thread's last error message (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding NUL.
 *
 * # Safety
 * `buf` must be null or hold `len` bytes.
 */
size_t remix_last_error(char *buf, size_t len);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *remix_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REMIX_H */
