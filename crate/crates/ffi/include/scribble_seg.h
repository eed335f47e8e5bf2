#ifndef SCRIBBLE_SEG_H
#define SCRIBBLE_SEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ScsStatus {
  SCS_STATUS_OK = 0,
  SCS_STATUS_NULL_POINTER = 1,
  SCS_STATUS_INVALID_ARGUMENT = 2,
  SCS_STATUS_IO = 3,
  SCS_STATUS_FORMAT = 4,
  SCS_STATUS_NUMERICAL = 5,
  SCS_STATUS_PANIC = 6,
} ScsStatus;

typedef enum ScsDecoder {
  SCS_DECODER_MAIN = 0,
  SCS_DECODER_AUX = 1,
} ScsDecoder;

/**
 * A loaded network.
 */
typedef struct ScsModel ScsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *scs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *scs_version(void);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScsStatus scs_model_load(const char *path, struct ScsModel **out);

/**
 * Creates a freshly initialized model (single input channel).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ScsStatus scs_model_init(size_t levels,
                              size_t base_width,
                              size_t num_classes,
                              uint64_t seed,
                              struct ScsModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void scs_model_free(struct ScsModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t scs_model_num_classes(const struct ScsModel *model);

/**
 * Segments a `[depth, height, width]` volume slice by slice into `out_labels`.
 *
 * # Safety
 * `image` and `out_labels` must each hold `depth * height * width` elements.
 */
enum ScsStatus scs_model_segment(const struct ScsModel *model,
                                 const float *image,
                                 size_t depth,
                                 size_t height,
                                 size_t width,
                                 size_t input_size,
                                 enum ScsDecoder decoder,
                                 uint8_t *out_labels);

/**
 * Dice coefficient of two masks (nonzero is foreground).
 *
 * # Safety
 * `pred` and `gt` must each hold `depth * height * width` bytes; `out` must be valid.
 */
enum ScsStatus scs_dsc3d(const uint8_t *pred,
                         const uint8_t *gt,
                         size_t depth,
                         size_t height,
                         size_t width,
                         double *out);

/**
 * 95th-percentile symmetric surface distance in mm. `spacing` points to
 * three values `(z, y, x)`. `out_sentinel` (optional) is set when exactly
 * one mask is empty and the volume diagonal was returned.
 *
 * # Safety
 * `pred` and `gt` must each hold `depth * height * width` bytes, `spacing`
 * three doubles; `out_mm` must be valid and `out_sentinel` null or valid.
 */
enum ScsStatus scs_hd95(const uint8_t *pred,
                        const uint8_t *gt,
                        size_t depth,
                        size_t height,
                        size_t width,
                        const double *spacing,
                        double *out_mm,
                        bool *out_sentinel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCRIBBLE_SEG_H */
