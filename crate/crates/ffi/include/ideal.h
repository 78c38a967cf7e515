#ifndef IDEAL_FFI_H
#define IDEAL_FFI_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IdealStatus {
  IDEAL_STATUS_OK = 0,
  IDEAL_STATUS_NULL_POINTER = 1,
  IDEAL_STATUS_INVALID_ARGUMENT = 2,
  IDEAL_STATUS_SHAPE = 3,
  IDEAL_STATUS_IO = 4,
  IDEAL_STATUS_WEIGHT_FORMAT = 5,
  IDEAL_STATUS_BUDGET_EXHAUSTED = 6,
  IDEAL_STATUS_UNAUTHORIZED = 7,
  IDEAL_STATUS_TRANSPORT = 8,
  IDEAL_STATUS_PROTOCOL = 9,
  IDEAL_STATUS_INTERNAL = 10,
} IdealStatus;

/**
 * A trained classifier loaded from a weight file.
 */
typedef struct IdealClassifier IdealClassifier;

/**
 * A metered hard-label oracle, local or remote.
 */
typedef struct IdealOracle IdealOracle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *ideal_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ideal_version(void);

/**
 * Loads a classifier weight file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IdealStatus ideal_classifier_load(const char *path, struct IdealClassifier **out);

/**
 * # Safety
 * `handle` must come from `ideal_classifier_load` or be null.
 */
void ideal_classifier_free(struct IdealClassifier *handle);

/**
 * Writes `(channels, height, width)` to `shape[0..3]` and the class count
 * to `classes`.
 *
 * # Safety
 * `handle` must be live; `shape` must hold 3 elements.
 */
enum IdealStatus ideal_classifier_info(const struct IdealClassifier *handle,
                                       size_t *shape,
                                       size_t *classes);

/**
 * Predicted labels for `n` images laid out as `n × c × h × w` floats in
 * `[-1, 1]`, in the classifier's own input shape.
 *
 * # Safety
 * `data` must hold `n·c·h·w` floats and `labels` `n` slots.
 */
enum IdealStatus ideal_classifier_predict(const struct IdealClassifier *handle,
                                          const float *data,
                                          size_t n,
                                          uint32_t *labels);

/**
 * Wraps a teacher weight file in an in-process oracle with `budget` queries.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IdealStatus ideal_oracle_open_local(const char *path, size_t budget, struct IdealOracle **out);

/**
 * Connects to a running oracle service.
 *
 * # Safety
 * `url` and `api_key` must be NUL-terminated strings and `out` valid.
 */
enum IdealStatus ideal_oracle_connect(const char *url,
                                      const char *api_key,
                                      struct IdealOracle **out);

/**
 * # Safety
 * `handle` must come from an `ideal_oracle_*` constructor or be null.
 */
void ideal_oracle_free(struct IdealOracle *handle);

/**
 * Buys hard labels for `n` images of shape `(c, h, w)`. All or nothing: if
 * the budget cannot cover `n`, nothing is charged and
 * `IDEAL_STATUS_BUDGET_EXHAUSTED` is returned.
 *
 * # Safety
 * `data` must hold `n·c·h·w` floats and `labels` `n` slots.
 */
enum IdealStatus ideal_oracle_query(struct IdealOracle *handle,
                                    const float *data,
                                    size_t n,
                                    size_t c,
                                    size_t h,
                                    size_t w,
                                    uint32_t *labels);

/**
 * Queries used and remaining, as last known to this handle.
 *
 * # Safety
 * `handle` must be live; `used` and `remaining` valid pointers.
 */
enum IdealStatus ideal_oracle_budget(const struct IdealOracle *handle,
                                     size_t *used,
                                     size_t *remaining);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IDEAL_FFI_H */
