#ifndef SPAR_H
#define SPAR_H

/* Generated by cbindgen from spar-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible call.
typedef enum SparStatus {
  SPAR_STATUS_OK = 0,
  SPAR_STATUS_NULL_POINTER = 1,
  SPAR_STATUS_INVALID_ARGUMENT = 2,
  SPAR_STATUS_SHAPE_MISMATCH = 3,
  SPAR_STATUS_IO_ERROR = 4,
  SPAR_STATUS_DATA_ERROR = 5,
  SPAR_STATUS_INTERNAL_ERROR = 6,
} SparStatus;

// Opaque dense grid handle (`height x width x channels`, row-major,
// channel-last, f64).
typedef struct SparGrid SparGrid;

// Opaque model handle bundling architecture config and parameters.
typedef struct SparModel SparModel;

// Architecture description used to create models over the ABI.
typedef struct SparModelConfig {
  uint32_t patch_size;
  uint32_t native_side;
  uint32_t channels;
  uint32_t num_blocks;
  uint32_t num_heads;
  double mlp_ratio;
  bool last_attention_identity;
} SparModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent error on this thread. The pointer stays
// valid until the next failing call on the same thread.
const char *spar_last_error_message(void);

// Static library version string.
const char *spar_version(void);

// Creates a grid. `data` may be null for an all-zero grid; otherwise it
// must hold `height * width * channels` doubles.
//
// # Safety
// `data`, when non-null, must point to `height * width * channels`
// readable doubles; `out` must be a valid destination pointer.
enum SparStatus spar_grid_create(uintptr_t height,
                                 uintptr_t width,
                                 uintptr_t channels,
                                 const double *data,
                                 struct SparGrid **out);

// Writes the grid shape through the out-pointers (each may be null).
//
// # Safety
// `grid` must be a live handle from this library.
enum SparStatus spar_grid_dims(const struct SparGrid *grid,
                               uintptr_t *height,
                               uintptr_t *width,
                               uintptr_t *channels);

// Borrowed pointer to the grid's row-major channel-last payload; valid
// while the handle lives. Returns null for a null handle.
//
// # Safety
// `grid` must be a live handle from this library.
const double *spar_grid_data(const struct SparGrid *grid);

// Releases a grid handle; null is a no-op.
//
// # Safety
// `grid` must be null or a handle from this library, not yet freed.
void spar_grid_free(struct SparGrid *grid);

// Half-pixel bilinear resize into a new grid.
//
// # Safety
// `grid` must be a live handle; `out` a valid destination pointer.
enum SparStatus spar_bilinear_resize(const struct SparGrid *grid,
                                     uintptr_t out_h,
                                     uintptr_t out_w,
                                     struct SparGrid **out);

// Channel-wise l2 normalization (vectors below `epsilon` pass through).
//
// # Safety
// `grid` must be a live handle; `out` a valid destination pointer.
enum SparStatus spar_l2_normalize(const struct SparGrid *grid,
                                  double epsilon,
                                  struct SparGrid **out);

// Mean squared error between two identically shaped grids.
//
// # Safety
// `a` and `b` must be live handles; `out` a valid destination pointer.
enum SparStatus spar_mse(const struct SparGrid *a, const struct SparGrid *b, double *out);

// Deterministically initializes a model from the config and seed.
//
// # Safety
// `config` must point to a valid config; `out` must be a valid
// destination pointer.
enum SparStatus spar_model_init(const struct SparModelConfig *config,
                                uint64_t seed,
                                struct SparModel **out);

// Loads a `SPARVIT1` checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid destination.
enum SparStatus spar_model_load(const char *path, struct SparModel **out);

// Saves the model as a `SPARVIT1` checkpoint.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum SparStatus spar_model_save(const struct SparModel *model, const char *path);

// Copies the model's architecture description into `out`.
//
// # Safety
// `model` must be a live handle; `out` a valid destination pointer.
enum SparStatus spar_model_config(const struct SparModel *model, struct SparModelConfig *out);

// Releases a model handle; null is a no-op.
//
// # Safety
// `model` must be null or a handle from this library, not yet freed.
void spar_model_free(struct SparModel *model);

// Single-pass forward over a 3-channel, patch-divisible image.
//
// # Safety
// `model` and `image` must be live handles; `out` a valid destination.
enum SparStatus spar_forward(const struct SparModel *model,
                             const struct SparGrid *image,
                             struct SparGrid **out);

// Native-resolution forward over one `K x K` window.
//
// # Safety
// `model` and `window` must be live handles; `out` a valid destination.
enum SparStatus spar_forward_window(const struct SparModel *model,
                                    const struct SparGrid *window,
                                    struct SparGrid **out);

// Smallest r with `patch % r == 0` and `stride % (patch / r) == 0`.
uint32_t spar_min_upsample_factor(uint32_t stride, uint32_t patch);

// Number of windows the planner enumerates for this geometry.
//
// # Safety
// `out_m` must be a valid destination pointer.
enum SparStatus spar_plan_window_count(uintptr_t image_h,
                                       uintptr_t image_w,
                                       uintptr_t window,
                                       uintptr_t stride,
                                       uintptr_t patch,
                                       uintptr_t *out_m);

// Stitches per-window feature maps (plan order, row-major origins) into
// the single-pass layout for the given geometry.
//
// # Safety
// `window_feats` must point to `count` live grid handles; `out` must be
// a valid destination pointer.
enum SparStatus spar_stitch_features(const struct SparGrid *const *window_feats,
                                     uintptr_t count,
                                     uintptr_t image_h,
                                     uintptr_t image_w,
                                     uintptr_t window,
                                     uintptr_t stride,
                                     uintptr_t patch,
                                     struct SparGrid **out);

// Cosine similarities between feature cells and `num_classes` vectors of
// length `dim` (row-major).
//
// # Safety
// `features` must be a live handle; `class_vectors` must hold
// `num_classes * dim` doubles; `out` must be a valid destination.
enum SparStatus spar_class_similarities(const struct SparGrid *features,
                                        const double *class_vectors,
                                        uintptr_t num_classes,
                                        uintptr_t dim,
                                        struct SparGrid **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPAR_H */
