#ifndef PROTO_LAB_H
#define PROTO_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PlStatus {
  PL_STATUS_OK = 0,
  PL_STATUS_NULL_POINTER = 1,
  PL_STATUS_INVALID_ARGUMENT = 2,
  PL_STATUS_SHAPE_MISMATCH = 3,
  PL_STATUS_IO = 4,
  PL_STATUS_FORMAT = 5,
  PL_STATUS_PANIC = 6,
  PL_STATUS_INTERNAL = 7,
} PlStatus;

/**
 * Loaded model. Only ever handled through a pointer.
 */
typedef struct PlModel PlModel;

/**
 * Dimensions of a loaded model.
 */
typedef struct PlModelInfo {
  size_t image_channels;
  size_t image_height;
  size_t image_width;
  size_t classes;
  size_t prototypes;
  size_t latent_height;
  size_t latent_width;
} PlModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *pl_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pl_last_error_message(void);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum PlStatus pl_model_load(const char *path, struct PlModel **out);

/**
 * Releases a handle from `pl_model_load`. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle, freed at most once.
 */
void pl_model_free(struct PlModel *model);

/**
 * # Safety
 * `model` must be a live handle and `info` a valid pointer.
 */
enum PlStatus pl_model_info(const struct PlModel *model, struct PlModelInfo *info);

/**
 * Classifies one image. Writes `classes` logits and the predicted class.
 *
 * # Safety
 * `image` must point to `image_len` values, `logits` to `logits_len`
 * writable values, and `predicted` must be valid or null.
 */
enum PlStatus pl_model_forward(const struct PlModel *model,
                               const double *image,
                               size_t image_len,
                               double *logits,
                               size_t logits_len,
                               size_t *predicted);

/**
 * Writes the latent_height x latent_width similarity map of one prototype.
 *
 * # Safety
 * `image` must point to `image_len` values and `out` to `out_len`
 * writable values.
 */
enum PlStatus pl_model_similarity_map(const struct PlModel *model,
                                      const double *image,
                                      size_t image_len,
                                      size_t prototype,
                                      double *out,
                                      size_t out_len);

/**
 * Compresses and decompresses a 3-channel image with the built-in codec.
 *
 * # Safety
 * `image` and `out` must each point to `3 * height * width` values.
 */
enum PlStatus pl_codec_roundtrip(const double *image,
                                 size_t height,
                                 size_t width,
                                 uint8_t quality,
                                 bool chroma_subsampling,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTO_LAB_H */
