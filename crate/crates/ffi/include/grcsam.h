/* Generated by cbindgen from crates/ffi/src/lib.rs. */

#ifndef GRCSAM_H
#define GRCSAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GrcDtype {
  GRC_DTYPE_F32 = 0,
  GRC_DTYPE_F64 = 1,
} GrcDtype;

typedef enum GrcMechanism {
  GRC_MECHANISM_MSA = 0,
  GRC_MECHANISM_WMSA = 1,
  GRC_MECHANISM_WSSA = 2,
} GrcMechanism;

typedef enum GrcStatus {
  GRC_STATUS_OK = 0,
  GRC_STATUS_NULL_POINTER = 1,
  GRC_STATUS_INVALID_ARGUMENT = 2,
  GRC_STATUS_SHAPE = 3,
  GRC_STATUS_NON_FINITE = 4,
  GRC_STATUS_OVERFLOW = 5,
  GRC_STATUS_FORMAT = 6,
  GRC_STATUS_CONFIG = 7,
  GRC_STATUS_IO = 8,
  GRC_STATUS_BUFFER_TOO_SMALL = 9,
  GRC_STATUS_PANIC = 10,
} GrcStatus;

/*
 Opaque pipeline handle: a configuration plus the outputs of the last run.
 */
typedef struct GrcPipeline GrcPipeline;

/*
 Opaque tensor handle.
 */
typedef struct GrcTensor GrcTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failing call on this thread, or an empty string.
 The pointer stays valid until the next failing call on this thread.
 */
const char *grc_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *grc_version(void);

/*
 Creates a tensor from `rank` extents and `product(shape)` row-major
 values. Values are rounded to `dtype`.

 # Safety
 `shape` must point to `rank` readable extents and `data` to
 `product(shape)` readable values; `out` must be writable.
 */
enum GrcStatus grc_tensor_new(enum GrcDtype dtype,
                              const size_t *shape,
                              size_t rank,
                              const double *data,
                              struct GrcTensor **out);

/*
 Releases a tensor handle; null is ignored.

 # Safety
 `t` must be null or a handle from this library that has not been freed.
 */
void grc_tensor_free(struct GrcTensor *t);

/*
 Writes the rank to `out_rank`.

 # Safety
 `t` must be a live handle and `out_rank` writable.
 */
enum GrcStatus grc_tensor_rank(const struct GrcTensor *t, size_t *out_rank);

/*
 Writes the element count to `out_numel`.

 # Safety
 `t` must be a live handle and `out_numel` writable.
 */
enum GrcStatus grc_tensor_numel(const struct GrcTensor *t, size_t *out_numel);

/*
 Writes the element type to `out_dtype`.

 # Safety
 `t` must be a live handle and `out_dtype` writable.
 */
enum GrcStatus grc_tensor_dtype(const struct GrcTensor *t, enum GrcDtype *out_dtype);

/*
 Copies the extents into `out_shape`, which holds `capacity` entries.

 # Safety
 `t` must be a live handle and `out_shape` writable for `capacity` entries.
 */
enum GrcStatus grc_tensor_shape(const struct GrcTensor *t, size_t *out_shape, size_t capacity);

/*
 Copies the row-major values into `out_data`, which holds `capacity` entries.

 # Safety
 `t` must be a live handle and `out_data` writable for `capacity` entries.
 */
enum GrcStatus grc_tensor_copy_data(const struct GrcTensor *t, double *out_data, size_t capacity);

/*
 Reads a GRCT tensor file.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum GrcStatus grc_tensor_read(const char *path, struct GrcTensor **out);

/*
 Writes a GRCT tensor file.

 # Safety
 `t` must be a live handle and `path` a NUL-terminated string.
 */
enum GrcStatus grc_tensor_write(const struct GrcTensor *t, const char *path);

/*
 Attention multiply count as an exact integer. `swin_convention` adds
 the channel factor to the windowed terms; `rho` is used by W-SSA only.

 # Safety
 `out` must be writable.
 */
enum GrcStatus grc_flops(enum GrcMechanism mechanism,
                         size_t h,
                         size_t w,
                         size_t channels,
                         size_t window,
                         double rho,
                         bool swin_convention,
                         uint64_t *out);

/*
 Focal loss of probabilities `pred` against binary `target`.

 # Safety
 `pred` and `target` must be live handles and `out` writable.
 */
enum GrcStatus grc_focal_loss(const struct GrcTensor *pred,
                              const struct GrcTensor *target,
                              double gamma,
                              double alpha,
                              double *out);

/*
 Mean binary cross-entropy plus smoothed Dice loss.

 # Safety
 `pred` and `target` must be live handles and `out` writable.
 */
enum GrcStatus grc_bce_dice_loss(const struct GrcTensor *pred,
                                 const struct GrcTensor *target,
                                 double *out);

/*
 Label-smoothed cross-entropy of `B×K×H×W` logits against `B·H·W`
 labels; label 255 is ignored.

 # Safety
 `logits` must be a live handle, `labels` readable for `count` entries
 and `out` writable.
 */
enum GrcStatus grc_ce_label_smoothing(const struct GrcTensor *logits,
                                      const uint32_t *labels,
                                      size_t count,
                                      double smoothing,
                                      double *out);

/*
 Weighted sum of the three stage losses.

 # Safety
 `out` must be writable.
 */
enum GrcStatus grc_total_loss(double coarse,
                              double fine,
                              double final_,
                              double weight_coarse,
                              double weight_fine,
                              double weight_final,
                              double *out);

/*
 Creates a pipeline with the default configuration.

 # Safety
 `out` must be writable.
 */
enum GrcStatus grc_pipeline_new(struct GrcPipeline **out);

/*
 Releases a pipeline handle; null is ignored.

 # Safety
 `p` must be null or a handle from this library that has not been freed.
 */
void grc_pipeline_free(struct GrcPipeline *p);

/*
 Sets one configuration key, as in `key = value` config files.

 # Safety
 `p` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum GrcStatus grc_pipeline_set(struct GrcPipeline *p, const char *key, const char *value);

/*
 Replaces the configuration with the contents of a config file.

 # Safety
 `p` must be a live handle and `path` a NUL-terminated string.
 */
enum GrcStatus grc_pipeline_load_config(struct GrcPipeline *p, const char *path);

/*
 Runs both stages on synthetic inputs. On success the coarse and fine
 masks are returned as new handles (either out-pointer may be null to
 skip it) and the run is kept for [`grc_pipeline_write_outputs`].

 # Safety
 `p` must be a live handle; non-null out-pointers must be writable.
 */
enum GrcStatus grc_pipeline_run(struct GrcPipeline *p,
                                struct GrcTensor **out_coarse_mask,
                                struct GrcTensor **out_fine_mask);

/*
 Writes the GRCT, PGM, config and report files of the last run into `dir`.

 # Safety
 `p` must be a live handle and `dir` a NUL-terminated string.
 */
enum GrcStatus grc_pipeline_write_outputs(const struct GrcPipeline *p, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRCSAM_H */
