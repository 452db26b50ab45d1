#ifndef UNHATE_H
#define UNHATE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UnhateStatus {
  UNHATE_STATUS_OK = 0,
  UNHATE_STATUS_NULL_POINTER = 1,
  UNHATE_STATUS_INVALID_ARGUMENT = 2,
  UNHATE_STATUS_IO = 3,
  UNHATE_STATUS_BAD_FORMAT = 4,
  UNHATE_STATUS_DIM_MISMATCH = 5,
  UNHATE_STATUS_EMPTY_INDEX = 6,
  UNHATE_STATUS_INSUFFICIENT_EXAMPLES = 7,
  UNHATE_STATUS_PARSE = 8,
  UNHATE_STATUS_SINGLE_CLASS = 9,
  UNHATE_STATUS_DUPLICATE = 10,
  UNHATE_STATUS_NOT_FOUND = 11,
  UNHATE_STATUS_NOT_ASSIGNED = 12,
  UNHATE_STATUS_EVAL = 13,
  UNHATE_STATUS_PANIC = 99,
} UnhateStatus;

typedef enum UnhateReviewState {
  UNHATE_REVIEW_STATE_PENDING = 0,
  UNHATE_REVIEW_STATE_NEEDS_TIEBREAK = 1,
  UNHATE_REVIEW_STATE_DECIDED = 2,
} UnhateReviewState;

/**
 * Opaque ranked hit list.
 */
typedef struct UnhateHits UnhateHits;

/**
 * Opaque embedding index.
 */
typedef struct UnhateIndex UnhateIndex;

/**
 * Opaque verdict store.
 */
typedef struct UnhateStore UnhateStore;

/**
 * Parsed model answer.
 */
typedef struct UnhateDetection {
  /**
   * 0 non-hateful, 1 hateful.
   */
  uint8_t label;
  double probability;
  /**
   * Nonzero when no probability was found and one was derived from the label.
   */
  uint8_t probability_fallback;
} UnhateDetection;

typedef struct UnhateReviewStatus {
  enum UnhateReviewState state;
  size_t received;
  /**
   * Decided answers; only meaningful when `state` is decided.
   */
  uint8_t q1;
  uint8_t q2;
  uint8_t shareable;
} UnhateReviewStatus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *unhate_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *unhate_version(void);

/**
 * Release a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void unhate_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum UnhateStatus unhate_index_new(size_t dim, struct UnhateIndex **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum UnhateStatus unhate_index_load(const char *path, struct UnhateIndex **out);

/**
 * # Safety
 * `index` must be a live handle and `path` a NUL-terminated string.
 */
enum UnhateStatus unhate_index_save(const struct UnhateIndex *index, const char *path);

/**
 * # Safety
 * `index` must be NULL or a handle not yet freed.
 */
void unhate_index_free(struct UnhateIndex *index);

/**
 * Dimension of the index, 0 for NULL.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
size_t unhate_index_dim(const struct UnhateIndex *index);

/**
 * Entry count, 0 for NULL.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
size_t unhate_index_len(const struct UnhateIndex *index);

/**
 * Insert a vector (normalized on insert). `class_tag` is 0 (non-hateful),
 * 1 (hateful) or -1 (untagged).
 *
 * # Safety
 * `index` must be a live handle, `id` a NUL-terminated string and `values`
 * point to `len` floats.
 */
enum UnhateStatus unhate_index_insert(struct UnhateIndex *index,
                                      const char *id,
                                      const float *values,
                                      size_t len,
                                      int32_t class_tag);

/**
 * Exhaustive cosine top-k, ties broken by id.
 *
 * # Safety
 * `index` must be a live handle, `values` point to `len` floats and `out`
 * be a valid pointer.
 */
enum UnhateStatus unhate_index_top_k(const struct UnhateIndex *index,
                                     const float *values,
                                     size_t len,
                                     size_t k,
                                     struct UnhateHits **out);

/**
 * Class-balanced demonstration selection: `shots / 2` nearest entries of
 * each class.
 *
 * # Safety
 * As for [`unhate_index_top_k`].
 */
enum UnhateStatus unhate_index_rices(const struct UnhateIndex *index,
                                     const float *values,
                                     size_t len,
                                     size_t shots,
                                     struct UnhateHits **out);

/**
 * # Safety
 * `hits` must be NULL or a live handle.
 */
size_t unhate_hits_len(const struct UnhateHits *hits);

/**
 * Id of hit `i`, borrowed from the hit list; NULL when out of range.
 *
 * # Safety
 * `hits` must be NULL or a live handle.
 */
const char *unhate_hits_id(const struct UnhateHits *hits, size_t i);

/**
 * Cosine similarity of hit `i`; NaN when out of range.
 *
 * # Safety
 * `hits` must be NULL or a live handle.
 */
double unhate_hits_similarity(const struct UnhateHits *hits, size_t i);

/**
 * # Safety
 * `hits` must be NULL or a handle not yet freed.
 */
void unhate_hits_free(struct UnhateHits *hits);

/**
 * Area under the ROC curve; `labels` holds 0 (non-hateful) or 1 (hateful).
 *
 * # Safety
 * `scores` and `labels` must point to `n` elements and `out` be valid.
 */
enum UnhateStatus unhate_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Parse a detection response into label and probability.
 *
 * # Safety
 * `raw` must be a NUL-terminated string and `out` a valid pointer.
 */
enum UnhateStatus unhate_parse_detection(const char *raw, struct UnhateDetection *out);

/**
 * Majority of `n` binary answers (0 or 1). Writes the winning answer, or
 * -1 when the answers are evenly split and a tiebreak is needed.
 *
 * # Safety
 * `answers` must point to `n` bytes and `out` be valid.
 */
enum UnhateStatus unhate_majority(const uint8_t *answers, size_t n, int32_t *out);

/**
 * In-memory store over `n` evaluator ids.
 *
 * # Safety
 * `pool` must point to `n` NUL-terminated strings and `out` be valid.
 */
enum UnhateStatus unhate_store_new(const char *const *pool, size_t n, struct UnhateStore **out);

/**
 * Directory-backed store; existing files are replayed.
 *
 * # Safety
 * As for [`unhate_store_new`], plus `dir` must be a NUL-terminated string.
 */
enum UnhateStatus unhate_store_open(const char *dir,
                                    const char *const *pool,
                                    size_t n,
                                    struct UnhateStore **out);

/**
 * # Safety
 * `store` must be NULL or a handle not yet freed.
 */
void unhate_store_free(struct UnhateStore *store);

/**
 * Register a variant and assign three evaluators. `split` is 0 unimodal
 * text, 1 unimodal image, 2 unimodal both, 3 multimodal.
 *
 * # Safety
 * `store` must be a live handle and `variant` a NUL-terminated string.
 */
enum UnhateStatus unhate_store_enqueue(struct UnhateStore *store,
                                       const char *variant,
                                       uint8_t split);

/**
 * Record a verdict. `q1` is 0 non-hateful / 1 hateful, `q2` is 0 not
 * coherent / 1 coherent. When the verdict leaves an even split, the newly
 * assigned tiebreaker id is written to `tiebreaker` (free it with
 * [`unhate_string_free`]); otherwise NULL is written.
 *
 * # Safety
 * `store` must be a live handle, the strings NUL-terminated, and
 * `tiebreaker` NULL or valid.
 */
enum UnhateStatus unhate_store_submit(struct UnhateStore *store,
                                      const char *variant,
                                      const char *evaluator,
                                      uint8_t q1,
                                      uint8_t q2,
                                      uint64_t ts,
                                      char **tiebreaker);

/**
 * # Safety
 * `store` must be a live handle, `variant` NUL-terminated and `out` valid.
 */
enum UnhateStatus unhate_store_status(const struct UnhateStore *store,
                                      const char *variant,
                                      struct UnhateReviewStatus *out);

/**
 * Aggregate report as JSON; free the result with [`unhate_string_free`].
 *
 * # Safety
 * `store` must be a live handle and `out` valid.
 */
enum UnhateStatus unhate_store_report_json(const struct UnhateStore *store, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNHATE_H */
