#ifndef DAPPER_H
#define DAPPER_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum DapperStatus {
  DAPPER_STATUS_OK = 0,
  DAPPER_STATUS_NULL_ARGUMENT = 1,
  DAPPER_STATUS_INVALID_INPUT = 2,
  DAPPER_STATUS_SHAPE = 3,
  DAPPER_STATUS_CONFIG = 4,
  DAPPER_STATUS_IO = 5,
  DAPPER_STATUS_FORMAT = 6,
  DAPPER_STATUS_VERSION = 7,
  DAPPER_STATUS_MISSING_ARTIFACT = 8,
  DAPPER_STATUS_NUMERICAL = 9,
  DAPPER_STATUS_PANIC = 10,
} DapperStatus;

/**
 * Opaque handle to a loaded estimator.
 */
typedef struct DapperEstimator DapperEstimator;

/**
 * Label-free summary of one prediction matrix.
 */
typedef struct DapperFeatures {
  /**
   * Entropy of the mean prediction.
   */
  double global_diversity;
  /**
   * Mean per-row entropy.
   */
  double individual_uncertainty;
  /**
   * Their difference.
   */
  double mutual_information;
} DapperFeatures;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on this thread.
 */
const char *dapper_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dapper_version(void);

/**
 * Loads an estimator checkpoint. On success `*out` owns a handle that must
 * be released with [`dapper_estimator_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DapperStatus dapper_estimator_load(const char *path, struct DapperEstimator **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `handle` must come from [`dapper_estimator_load`] and not be used again.
 */
void dapper_estimator_free(struct DapperEstimator *handle);

/**
 * Number of classes the estimator expects.
 *
 * # Safety
 * `handle` must be a live handle and `out` a valid pointer.
 */
enum DapperStatus dapper_estimator_num_classes(const struct DapperEstimator *handle, size_t *out);

/**
 * Estimates the accuracy change at each epoch from the model's softmax
 * outputs on the same unlabeled validation set after every epoch.
 *
 * `probs` holds `epochs * rows * classes` values, epoch-major then
 * row-major; epoch 0 is the model before adaptation. Writes `epochs`
 * values to `out_delta`, the first of which is 0.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum DapperStatus dapper_estimate(const struct DapperEstimator *handle,
                                  const double *probs,
                                  size_t epochs,
                                  size_t rows,
                                  size_t classes,
                                  double *out_delta);

/**
 * Computes [`DapperFeatures`] for a `rows x classes` row-major matrix of
 * probabilities.
 *
 * # Safety
 * `probs` must hold `rows * classes` values; `out` must be valid.
 */
enum DapperStatus dapper_features(const double *probs,
                                  size_t rows,
                                  size_t classes,
                                  struct DapperFeatures *out);

/**
 * One minus the mean absolute difference of two accuracy-change traces over
 * epochs after the first; estimates are clamped to [-1, 1].
 *
 * # Safety
 * Both buffers must hold `len` values; `out` must be valid.
 */
enum DapperStatus dapper_similarity(const double *truth,
                                    const double *estimate,
                                    size_t len,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAPPER_H */
