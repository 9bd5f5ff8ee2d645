#ifndef POINTSPOT_H
#define POINTSPOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_ARGUMENT = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  PS_STATUS_IO = 3,
  PS_STATUS_CHECKPOINT = 4,
  PS_STATUS_IMAGE = 5,
  PS_STATUS_OUT_OF_RANGE = 6,
  PS_STATUS_INTERNAL = 7,
} PsStatus;

/**
 * Loaded model. Opaque to C.
 */
typedef struct PsModel PsModel;

/**
 * Predictions of one image. Opaque to C.
 */
typedef struct PsPredictions PsPredictions;

/**
 * One prediction. `transcript` stays valid until the owning
 * [`PsPredictions`] is freed.
 */
typedef struct PsPrediction {
  double x;
  double y;
  /**
   * Zero for transcription-only decoding, where `x` and `y` are unset.
   */
  int32_t has_point;
  double score;
  const char *transcript;
} PsPrediction;

typedef struct PsLoopCounts {
  size_t joint;
  size_t split;
  size_t reduction;
  double reduction_rate;
} PsLoopCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread; empty after a
 * successful one. Valid until the next call on the same thread.
 */
const char *ps_last_error(void);

/**
 * Load the checkpoint directory at `path` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

/**
 * # Safety
 * `model` must come from [`ps_model_load`] and not be freed twice.
 */
void ps_model_free(struct PsModel *model);

/**
 * Square canvas side the model decodes at.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_model_image_side(const struct PsModel *model, size_t *out);

/**
 * Decode a row-major 8-bit grayscale image. Points are reported in the
 * image's own pixel coordinates; predictions scoring below `threshold`
 * are dropped.
 *
 * # Safety
 * `pixels` must hold `height * width` bytes; `model` must be live and
 * `out` valid.
 */
enum PsStatus ps_decode_gray(const struct PsModel *model,
                             const uint8_t *pixels,
                             size_t height,
                             size_t width,
                             double threshold,
                             struct PsPredictions **out);

/**
 * # Safety
 * `preds` must be null or a live handle.
 */
size_t ps_predictions_len(const struct PsPredictions *preds);

/**
 * Copy prediction `index` into `*out`.
 *
 * # Safety
 * `preds` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_prediction_get(const struct PsPredictions *preds,
                                size_t index,
                                struct PsPrediction *out);

/**
 * # Safety
 * `preds` must come from [`ps_decode_gray`] and not be freed twice.
 */
void ps_predictions_free(struct PsPredictions *preds);

/**
 * Decoding loops for `n` instances of up to `k` characters, single-stream
 * versus split.
 */
struct PsLoopCounts ps_loop_counts(size_t n, size_t k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POINTSPOT_H */
