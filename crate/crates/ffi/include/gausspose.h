#ifndef GAUSSPOSE_H
#define GAUSSPOSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum GpStatus {
  GP_STATUS_OK = 0,
  GP_STATUS_NULL_POINTER = 1,
  GP_STATUS_INVALID_ARGUMENT = 2,
  GP_STATUS_SCHEMA = 3,
  GP_STATUS_REFERENCE = 4,
  GP_STATUS_GEOMETRY = 5,
  GP_STATUS_SINGULAR_TRANSFORM = 6,
  GP_STATUS_SHAPE_MISMATCH = 7,
  GP_STATUS_NON_FINITE = 8,
  GP_STATUS_IO = 9,
  GP_STATUS_FORMAT = 10,
  GP_STATUS_SAMPLING_EXHAUSTED = 11,
  GP_STATUS_BUFFER_TOO_SMALL = 12,
  GP_STATUS_PANIC = 13,
} GpStatus;

/*
 Opaque fit result.
 */
typedef struct GpFitResult GpFitResult;

/*
 Opaque part-map stack (`channels x size x size`).
 */
typedef struct GpPartMaps GpPartMaps;

/*
 Opaque template handle.
 */
typedef struct GpTemplate GpTemplate;

typedef struct GpLossConfig {
  double lambda1;
  double lambda2;
  double boundary_b;
  /*
   Average-pooling factor applied before the L1 comparison; 0 or 1
   compares raw map values.
   */
  uintptr_t avg_pool;
} GpLossConfig;

typedef struct GpLossBreakdown {
  double recon;
  double anchor;
  double boundary;
  double total;
} GpLossBreakdown;

typedef struct GpFitConfig {
  double learning_rate;
  double beta1;
  double beta2;
  double epsilon;
  uintptr_t max_iters;
  double convergence_tol;
  uintptr_t patience;
  uint64_t seed;
  struct GpLossConfig loss;
  uintptr_t resolution;
} GpFitConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message (NUL-terminated, truncated
 to fit) into `buf` and returns the buffer size needed for the whole
 message including the terminator. `buf` may be null when `len` is 0.
 */
uintptr_t gp_last_error_message(char *buf, uintptr_t len);

/*
 The built-in 18-part human template.
 */
enum GpStatus gp_template_canonical(struct GpTemplate **out);

/*
 Parses a TOML template.
 */
enum GpStatus gp_template_parse(const char *text, struct GpTemplate **out);

void gp_template_free(struct GpTemplate *template_);

/*
 Number of parts, or 0 for a null handle.
 */
uintptr_t gp_template_num_parts(const struct GpTemplate *template_);

uintptr_t gp_template_num_anchor_pairs(const struct GpTemplate *template_);

uintptr_t gp_template_num_keypoints(const struct GpTemplate *template_);

/*
 Copies the id of keypoint `index` like [`gp_last_error_message`] and
 stores the size needed (including the terminator) in `needed`.
 */
enum GpStatus gp_template_keypoint_id(const struct GpTemplate *template_,
                                      uintptr_t index,
                                      char *buf,
                                      uintptr_t len,
                                      uintptr_t *needed);

/*
 Analytic rendering of the transformed template.
 */
enum GpStatus gp_render_analytic(const struct GpTemplate *template_,
                                 const double *params,
                                 uintptr_t n_params,
                                 uintptr_t resolution,
                                 struct GpPartMaps **out);

/*
 Rendering by warping the canonical maps.
 */
enum GpStatus gp_render_warped(const struct GpTemplate *template_,
                               const double *params,
                               uintptr_t n_params,
                               uintptr_t resolution,
                               struct GpPartMaps **out);

enum GpStatus gp_partmaps_dims(const struct GpPartMaps *maps, uintptr_t *channels, uintptr_t *size);

/*
 Copies all `channels * size * size` values, channel-major then row-major.
 */
enum GpStatus gp_partmaps_copy(const struct GpPartMaps *maps, double *buf, uintptr_t len);

/*
 Builds maps from `channels * size * size` values in `[0, 1]`.
 */
enum GpStatus gp_partmaps_from_data(const double *data,
                                    uintptr_t channels,
                                    uintptr_t size,
                                    struct GpPartMaps **out);

enum GpStatus gp_partmaps_read(const char *path, struct GpPartMaps **out);

enum GpStatus gp_partmaps_write(const struct GpPartMaps *maps, const char *path);

void gp_partmaps_free(struct GpPartMaps *maps);

enum GpStatus gp_anchor_loss(const struct GpTemplate *template_,
                             const double *params,
                             uintptr_t n_params,
                             double *out);

enum GpStatus gp_boundary_loss(const struct GpTemplate *template_,
                               const double *params,
                               uintptr_t n_params,
                               double bound,
                               double *out);

/*
 All loss terms for the given transforms against `target`.
 */
enum GpStatus gp_total_loss(const struct GpTemplate *template_,
                            const double *params,
                            uintptr_t n_params,
                            const struct GpPartMaps *target,
                            const struct GpLossConfig *config,
                            struct GpLossBreakdown *out);

/*
 Library defaults (learning rate 1e-4).
 */
enum GpStatus gp_fit_config_default(struct GpFitConfig *out);

/*
 Settings calibrated on synthetic poses (learning rate 1e-2, 300 iterations).
 */
enum GpStatus gp_fit_config_synthetic(struct GpFitConfig *out);

/*
 Fits part transforms to `target` starting from the canonical pose.
 */
enum GpStatus gp_fit_pose(const struct GpTemplate *template_,
                          const struct GpPartMaps *target,
                          const struct GpFitConfig *config,
                          struct GpFitResult **out);

void gp_fit_result_free(struct GpFitResult *result);

/*
 Copies the best transforms (six values per part) into `buf`.
 */
enum GpStatus gp_fit_result_transforms(const struct GpFitResult *result,
                                       double *buf,
                                       uintptr_t len);

/*
 Copies keypoints as `x, y` pairs in template keypoint order.
 */
enum GpStatus gp_fit_result_keypoints(const struct GpFitResult *result, double *buf, uintptr_t len);

enum GpStatus gp_fit_result_summary(const struct GpFitResult *result,
                                    struct GpLossBreakdown *best,
                                    uintptr_t *iterations,
                                    bool *converged);

/*
 Number of entries in the loss trace (iterations evaluated, including the start).
 */
uintptr_t gp_fit_result_trace_len(const struct GpFitResult *result);

enum GpStatus gp_fit_result_trace(const struct GpFitResult *result,
                                  struct GpLossBreakdown *buf,
                                  uintptr_t len);

/*
 Keypoints of the given transforms as `x, y` pairs in template order.
 */
enum GpStatus gp_keypoints_from_transforms(const struct GpTemplate *template_,
                                           const double *params,
                                           uintptr_t n_params,
                                           double *buf,
                                           uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAUSSPOSE_H */
