#ifndef SBCTM_H
#define SBCTM_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SbctmStatus {
  SBCTM_STATUS_OK = 0,
  SBCTM_STATUS_NULL_POINTER = 1,
  SBCTM_STATUS_INVALID_ARGUMENT = 2,
  SBCTM_STATUS_IO = 3,
  SBCTM_STATUS_CONFIG = 4,
  SBCTM_STATUS_NUMERIC = 5,
  SBCTM_STATUS_INTERNAL = 6,
} SbctmStatus;

/**
 * A loaded enhancement model. Opaque to C.
 */
typedef struct SbctmEnhancer SbctmEnhancer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a teacher or student checkpoint. On success `*out` owns a handle
 * to be released with [`sbctm_enhancer_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SbctmStatus sbctm_enhancer_load(const char *path, struct SbctmEnhancer **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `h` must come from [`sbctm_enhancer_load`] and not be used afterwards.
 */
void sbctm_enhancer_free(struct SbctmEnhancer *h);

/**
 * Sample rate the model expects, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
uint32_t sbctm_enhancer_sample_rate(const struct SbctmEnhancer *h);

/**
 * Number of points on the model's time grid, the largest accepted NFE.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t sbctm_enhancer_max_nfe(const struct SbctmEnhancer *h);

/**
 * Enhances `len` mono samples into `output`, which must hold `len` floats.
 * Teacher checkpoints are sampled with the bridge solver.
 *
 * # Safety
 * `input` and `output` must point to `len` floats; they may alias.
 */
enum SbctmStatus sbctm_enhance(const struct SbctmEnhancer *h,
                               const float *input,
                               size_t len,
                               size_t nfe,
                               float *output);

/**
 * Scale-invariant SDR in dB of `estimate` against `reference`.
 *
 * # Safety
 * Both buffers must hold `len` floats; `out` must be valid.
 */
enum SbctmStatus sbctm_si_sdr(const float *reference,
                              const float *estimate,
                              size_t len,
                              double *out);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t sbctm_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sbctm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBCTM_H */
