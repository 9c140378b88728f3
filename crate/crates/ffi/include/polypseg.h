#ifndef POLYPSEG_H
#define POLYPSEG_H

/* Generated from the polypseg-ffi crate source by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a fallible C-ABI call.
 */
typedef enum PsgStatus {
  /**
   * The call succeeded.
   */
  PSG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PSG_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument failed validation (bad side, bad path encoding, ...).
   */
  PSG_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The checkpoint file could not be read or decoded.
   */
  PSG_STATUS_IO_ERROR = 3,
  /**
   * A numeric failure, or a caught internal panic.
   */
  PSG_STATUS_RUNTIME_ERROR = 4,
} PsgStatus;

/**
 * A loaded segmentation model. Opaque; create with [`psg_model_load`]
 * and destroy with [`psg_model_free`].
 */
typedef struct PsgModel PsgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the toolkit ABI as a static NUL-terminated string.
 */
const char *psg_version(void);

/**
 * Message for the most recent failing call on this thread, or null if
 * the last call succeeded. The pointer is valid until the next fallible
 * call on the same thread.
 */
const char *psg_last_error(void);

/**
 * Loads a model from a checkpoint file written by the `polypseg` trainer.
 * On success `*out_model` owns the handle.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out_model` to a
 * writable pointer slot.
 */
enum PsgStatus psg_model_load(const char *path, struct PsgModel **out_model);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must have come from [`psg_model_load`] and not been freed.
 */
void psg_model_free(struct PsgModel *model);

/**
 * Number of trainable parameters in the model.
 *
 * # Safety
 * `model` must be a live handle and `out_count` writable.
 */
enum PsgStatus psg_model_param_count(const struct PsgModel *model, uint64_t *out_count);

/**
 * Segments one image: argmax over the class probabilities, written as
 * 0 (background) / 1 (polyp) into `out_mask`.
 *
 * `image` holds `3 * side * side` values, channel-first; `out_mask`
 * receives `side * side` bytes. `side` must be divisible by the model's
 * pooling factor (2 per encoder stage).
 *
 * # Safety
 * All pointers must be valid for the advertised lengths.
 */
enum PsgStatus psg_model_predict(const struct PsgModel *model,
                                 const double *image,
                                 uint32_t side,
                                 uint8_t *out_mask);

/**
 * Grad-CAM heatmap for one image, taken from the last decoder block and
 * upsampled to input resolution. `out_heatmap` receives `side * side`
 * values in `[0,1]` (all zeros when the raw map is constant).
 *
 * # Safety
 * All pointers must be valid for the advertised lengths.
 */
enum PsgStatus psg_model_gradcam(const struct PsgModel *model,
                                 const double *image,
                                 uint32_t side,
                                 double *out_heatmap);

/**
 * Intersection-over-union of two `side * side` masks (nonzero = polyp).
 * Both masks empty scores 1.
 *
 * # Safety
 * `pred` and `truth` must each hold `side * side` bytes.
 */
enum PsgStatus psg_iou(const uint8_t *pred, const uint8_t *truth, uint32_t side, double *out_value);

/**
 * Dice coefficient (F-score) of two `side * side` masks (nonzero =
 * polyp). Both masks empty scores 1.
 *
 * # Safety
 * `pred` and `truth` must each hold `side * side` bytes.
 */
enum PsgStatus psg_dice(const uint8_t *pred,
                        const uint8_t *truth,
                        uint32_t side,
                        double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLYPSEG_H */
