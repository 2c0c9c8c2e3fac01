#ifndef MFENET_H
#define MFENET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum MfeStatus {
  MFE_STATUS_OK = 0,
  MFE_STATUS_NULL_POINTER = 1,
  /**
   * Sizes, shapes or other arguments out of range.
   */
  MFE_STATUS_INVALID_ARGUMENT = 2,
  MFE_STATUS_IO = 3,
  /**
   * Malformed checkpoint or image bytes.
   */
  MFE_STATUS_FORMAT = 4,
  /**
   * Checkpoint tensors do not match its model configuration.
   */
  MFE_STATUS_PARAMETER_MISMATCH = 5,
  MFE_STATUS_NON_FINITE = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  MFE_STATUS_INTERNAL = 7,
} MfeStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct MfeModel MfeModel;

/**
 * Quality of a restored image against its reference, on 8-bit values.
 * `psnr` is `+inf` for identical images.
 */
typedef struct MfeMetrics {
  double psnr;
  double ssim;
  double vif;
  double mse;
} MfeMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *mfe_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mfe_version(void);

/**
 * Loads a checkpoint file into a new model stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MfeStatus mfe_model_load(const char *path, struct MfeModel **out);

/**
 * Like [`mfe_model_load`] from an in-memory checkpoint image.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be writable.
 */
enum MfeStatus mfe_model_from_bytes(const uint8_t *data, size_t len, struct MfeModel **out);

/**
 * Releases a model. Null is a no-op.
 *
 * # Safety
 * `model` must come from a load function and not have been freed.
 */
void mfe_model_free(struct MfeModel *model);

/**
 * Number of trainable scalars in the model.
 *
 * # Safety
 * `model` must be a live model and `out` writable.
 */
enum MfeStatus mfe_model_param_count(const struct MfeModel *model, size_t *out);

/**
 * Deblurs one RGB image of any size into `out_rgb` (same size).
 *
 * # Safety
 * `model` must be live; `rgb` and `out_rgb` must each hold
 * `width * height * 3` bytes and may alias.
 */
enum MfeStatus mfe_model_infer(const struct MfeModel *model,
                               const uint8_t *rgb,
                               size_t width,
                               size_t height,
                               uint8_t *out_rgb);

/**
 * PSNR, SSIM and VIF of `restored` against `reference`. Both images need
 * at least 32 pixels per side for VIF.
 *
 * # Safety
 * Both buffers must hold `width * height * 3` bytes; `out` must be writable.
 */
enum MfeStatus mfe_metrics(const uint8_t *restored,
                           const uint8_t *reference,
                           size_t width,
                           size_t height,
                           struct MfeMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFENET_H */
