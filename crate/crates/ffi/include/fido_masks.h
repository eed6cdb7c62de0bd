#ifndef FIDO_MASKS_H
#define FIDO_MASKS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum FmStatus {
  FM_STATUS_OK = 0,
  FM_STATUS_NULL_POINTER = 1,
  FM_STATUS_INVALID_ARGUMENT = 2,
  FM_STATUS_IO = 3,
  FM_STATUS_FORMAT = 4,
  FM_STATUS_NON_FINITE = 5,
  FM_STATUS_BUFFER_SIZE = 6,
  FM_STATUS_PANIC = 7,
  FM_STATUS_INTERNAL = 8,
} FmStatus;

typedef enum FmFormulation {
  FM_FORMULATION_ORIGINAL = 0,
  FM_FORMULATION_SIMPLIFIED = 1,
} FmFormulation;

typedef enum FmPrecision {
  FM_PRECISION_SINGLE = 0,
  FM_PRECISION_DOUBLE = 1,
} FmPrecision;

/**
 * Opaque classifier handle.
 */
typedef struct FmModel FmModel;

/**
 * Mask optimization settings. Start from [`fm_explain_options_default`].
 */
typedef struct FmExplainOptions {
  /**
   * An [`FmFormulation`] value.
   */
  uint32_t formulation;
  /**
   * An [`FmPrecision`] value.
   */
  uint32_t precision;
  size_t batch_size;
  size_t steps;
  double temperature;
  double lambda;
  double tv_weight;
  double learning_rate;
  uint64_t seed;
  /**
   * Non-zero aborts on the first non-finite value instead of recording it.
   */
  uint8_t strict;
} FmExplainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *fm_last_error_message(void);

/**
 * Loads weights written by `fido-masks train`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum FmStatus fm_model_load(const char *path, struct FmModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`fm_model_load`] and not be used afterwards.
 */
void fm_model_free(struct FmModel *model);

/**
 * Input shape and class count of a model. Any output pointer may be NULL.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be valid.
 */
enum FmStatus fm_model_shape(const struct FmModel *model,
                             size_t *channels,
                             size_t *height,
                             size_t *width,
                             size_t *classes);

/**
 * Softmax class probabilities for one image.
 *
 * # Safety
 * `image` must hold `image_len` doubles and `probs` `probs_len` doubles.
 */
enum FmStatus fm_model_predict_proba(const struct FmModel *model,
                                     const double *image,
                                     size_t image_len,
                                     double *probs,
                                     size_t probs_len);

struct FmExplainOptions fm_explain_options_default(void);

/**
 * Runs both objectives for `class_index` and writes the `H x W` retain maps
 * (SSR, SDR) and the joint map. Output pointers may be NULL to skip a map;
 * each non-null one must hold `map_len >= H * W` doubles. `options` may be
 * NULL for the defaults.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum FmStatus fm_explain(const struct FmModel *model,
                         const double *image,
                         size_t image_len,
                         size_t class_index,
                         const struct FmExplainOptions *options,
                         double *theta_ssr,
                         double *theta_sdr,
                         double *theta_joint,
                         size_t map_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIDO_MASKS_H */
