#ifndef AMGAN_H
#define AMGAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum AmganStatus {
  AMGAN_STATUS_OK = 0,
  AMGAN_STATUS_NULL_POINTER = 1,
  AMGAN_STATUS_INVALID_ARGUMENT = 2,
  AMGAN_STATUS_DIMENSION = 3,
  AMGAN_STATUS_IO = 4,
  AMGAN_STATUS_CHECKPOINT = 5,
  AMGAN_STATUS_TOPOLOGY_MISMATCH = 6,
  AMGAN_STATUS_UNKNOWN_ACTION = 7,
  AMGAN_STATUS_BUFFER_TOO_SMALL = 8,
  AMGAN_STATUS_PANIC = 9,
  AMGAN_STATUS_OTHER = 10,
} AmganStatus;

/**
 * A trained sequence model.
 */
typedef struct AmganModel AmganModel;

/**
 * A trained next-pose model for action transfer.
 */
typedef struct AmganNextPose AmganNextPose;

/**
 * Per-action models loaded from a registry manifest.
 */
typedef struct AmganRegistry AmganRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call on this thread.
 */
const char *amgan_last_error(void);

/**
 * Library version as a static string.
 */
const char *amgan_version(void);

/**
 * Loads a model checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum AmganStatus amgan_model_load(const char *path, struct AmganModel **out);

/**
 * # Safety
 * `model` must come from [`amgan_model_load`] and not be used afterwards.
 */
void amgan_model_free(struct AmganModel *model);

/**
 * Writes pose width, observed length and predicted length.
 *
 * # Safety
 * `model` must be a live handle; each output pointer may be null.
 */
enum AmganStatus amgan_model_dims(const struct AmganModel *model,
                                  size_t *pose_dim,
                                  size_t *observed_len,
                                  size_t *predict_len);

/**
 * Predicts `predict_len x pose_dim` frames from `rows x pose_dim` observed
 * frames (at least `observed_len`; the last ones are used).
 *
 * # Safety
 * `observed` must hold `rows * pose_dim` values and `out` `out_len` values.
 */
enum AmganStatus amgan_model_predict(const struct AmganModel *model,
                                     const double *observed,
                                     size_t rows,
                                     double *out,
                                     size_t out_len);

/**
 * Loads a next-pose checkpoint.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum AmganStatus amgan_next_pose_load(const char *path, struct AmganNextPose **out);

/**
 * # Safety
 * `vae` must come from [`amgan_next_pose_load`] and not be used afterwards.
 */
void amgan_next_pose_free(struct AmganNextPose *vae);

/**
 * Generates `n_frames` linear-schedule transition poses from the end of
 * `source` into the window ending `target`, written as `n_frames x pose_dim`.
 *
 * # Safety
 * Buffers must hold the stated number of `pose_dim`-wide rows.
 */
enum AmganStatus amgan_transfer(const struct AmganNextPose *vae,
                                const double *source,
                                size_t source_rows,
                                const double *target,
                                size_t target_rows,
                                size_t n_frames,
                                double *out,
                                size_t out_len);

/**
 * Writes the `n_frames` latents strictly between `z1` and `z2`
 * (`n_frames x len`, linear schedule).
 *
 * # Safety
 * `z1` and `z2` must hold `len` values, `out` `out_len` values.
 */
enum AmganStatus amgan_interpolate_latents(const double *z1,
                                           const double *z2,
                                           size_t len,
                                           size_t n_frames,
                                           double *out,
                                           size_t out_len);

/**
 * Loads every model listed in a registry manifest.
 *
 * # Safety
 * `manifest` must be a valid C string and `out` a valid pointer.
 */
enum AmganStatus amgan_registry_load(const char *manifest, struct AmganRegistry **out);

/**
 * # Safety
 * `registry` must come from [`amgan_registry_load`] and not be used afterwards.
 */
void amgan_registry_free(struct AmganRegistry *registry);

/**
 * Mean-latent prediction with the base action's model in which chain
 * `chains[i]` (1-5) is taken from action `actions[i]`'s model.
 *
 * # Safety
 * `chains` and `actions` must hold `n_overrides` entries; `observed` must
 * hold `rows * pose_dim` values and `out` `out_len` values.
 */
enum AmganStatus amgan_control(const struct AmganRegistry *registry,
                               const char *base_action,
                               const uint8_t *chains,
                               const char *const *actions,
                               size_t n_overrides,
                               const double *observed,
                               size_t rows,
                               double *out,
                               size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMGAN_H */
