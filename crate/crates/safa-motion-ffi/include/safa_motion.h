#ifndef SAFA_MOTION_H
#define SAFA_MOTION_H

/* Generated by cbindgen from safa-motion-ffi; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every C entry point.
 */
typedef enum SafaStatus {
  SAFA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SAFA_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  SAFA_STATUS_INVALID_UTF8 = 2,
  /**
   * File could not be read or written.
   */
  SAFA_STATUS_IO_ERROR = 3,
  /**
   * File contents or model tensors are malformed.
   */
  SAFA_STATUS_FORMAT_ERROR = 4,
  /**
   * Buffer or tensor dimensions disagree.
   */
  SAFA_STATUS_DIMENSION_ERROR = 5,
  /**
   * A Jacobian or transform was numerically singular.
   */
  SAFA_STATUS_SINGULAR_ERROR = 6,
  /**
   * The fit diverged to a non-finite objective.
   */
  SAFA_STATUS_DIVERGED_ERROR = 7,
  /**
   * An argument value was out of range.
   */
  SAFA_STATUS_INVALID_ARGUMENT = 8,
  /**
   * An unexpected internal failure (caught panic).
   */
  SAFA_STATUS_INTERNAL = 9,
} SafaStatus;

/**
 * Opaque morphable-model handle.
 */
typedef struct SafaModel SafaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *safa_version(void);

/**
 * Message for the most recent failure on this thread, or null if the last
 * call succeeded. The pointer stays valid until the next library call on
 * the same thread.
 */
const char *safa_last_error(void);

/**
 * Load a morphable model from an NPZ archive.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer; on
 * `Ok` the caller owns the handle and must release it with
 * [`safa_model_free`].
 */
enum SafaStatus safa_model_load(const char *path, struct SafaModel **out);

/**
 * Build the deterministic synthetic sphere model used by the toy
 * pipeline fixtures.
 *
 * # Safety
 * `out` must be a valid pointer; ownership as in [`safa_model_load`].
 */
enum SafaStatus safa_model_toy(uint64_t seed,
                               size_t rings,
                               size_t segments,
                               size_t shape_dim,
                               size_t expr_dim,
                               struct SafaModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a handle produced by this library that has not been
 * freed yet.
 */
void safa_model_free(struct SafaModel *model);

/**
 * Model dimensions. Any output pointer may be null to skip that field.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be valid.
 */
enum SafaStatus safa_model_counts(const struct SafaModel *model,
                                  size_t *n_vertices,
                                  size_t *n_faces,
                                  size_t *n_joints,
                                  size_t *shape_dim,
                                  size_t *expr_dim,
                                  size_t *n_landmarks);

/**
 * Decode parameters into posed vertices, written as `n_vertices * 3`
 * doubles.
 *
 * # Safety
 * Array arguments must match the declared lengths; `vertices_out` must
 * hold `n_vertices * 3` doubles.
 */
enum SafaStatus safa_model_decode(const struct SafaModel *model,
                                  const double *shape,
                                  size_t shape_len,
                                  const double *expression,
                                  size_t expression_len,
                                  const double *pose,
                                  size_t pose_len,
                                  double *vertices_out);

/**
 * Decode and project the model's landmarks, written as `n_landmarks * 2`
 * doubles in normalized image coordinates.
 *
 * # Safety
 * As in [`safa_model_decode`]; `landmarks_out` must hold
 * `n_landmarks * 2` doubles.
 */
enum SafaStatus safa_model_landmarks(const struct SafaModel *model,
                                     const double *shape,
                                     size_t shape_len,
                                     const double *expression,
                                     size_t expression_len,
                                     const double *pose,
                                     size_t pose_len,
                                     double camera_scale,
                                     double camera_tx,
                                     double camera_ty,
                                     double *landmarks_out);

/**
 * Fit model parameters to `n_landmarks x 2` target landmarks.
 *
 * `max_iterations = 0` keeps the default schedule. Outputs are the
 * fitted parameter buffers (`shape_dim`, `expr_dim`, `3 * n_joints`, and
 * 3 camera doubles as scale, tx, ty); `final_loss_out` and
 * `iterations_out` may be null.
 *
 * # Safety
 * Buffer lengths must match the model dimensions reported by
 * [`safa_model_counts`].
 */
enum SafaStatus safa_fit_landmarks(const struct SafaModel *model,
                                   const double *landmarks,
                                   size_t n_landmarks,
                                   size_t max_iterations,
                                   double *shape_out,
                                   double *expression_out,
                                   double *pose_out,
                                   double *camera_out,
                                   double *final_loss_out,
                                   size_t *iterations_out);

/**
 * Backward-warp an image by an absolute sampling map.
 *
 * `source` is `height * width * channels` doubles; `map` is
 * `height * width * 2` normalized sampling coordinates; `out` receives
 * `height * width * channels` doubles.
 *
 * # Safety
 * Buffers must match the declared dimensions.
 */
enum SafaStatus safa_warp_image(const double *source,
                                size_t height,
                                size_t width,
                                size_t channels,
                                const double *map,
                                double *out);

/**
 * First-order affine motion field for one keypoint pair, written as a
 * `height * width * 2` absolute sampling map.
 *
 * Keypoints are 2 doubles; Jacobians are 2 x 2 row-major.
 *
 * # Safety
 * Buffers must match the declared dimensions.
 */
enum SafaStatus safa_affine_motion(const double *p_source,
                                   const double *j_source,
                                   const double *p_driving,
                                   const double *j_driving,
                                   size_t height,
                                   size_t width,
                                   double *map_out);

/**
 * L1, PSNR (capped at 100 dB), and SSIM between two images of identical
 * shape. Any output pointer may be null to skip that metric.
 *
 * # Safety
 * Buffers must match the declared dimensions.
 */
enum SafaStatus safa_image_metrics(const double *image_a,
                                   const double *image_b,
                                   size_t height,
                                   size_t width,
                                   size_t channels,
                                   double *l1_out,
                                   double *psnr_out,
                                   double *ssim_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFA_MOTION_H */
