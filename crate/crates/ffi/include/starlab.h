#ifndef STARLAB_H
#define STARLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StarStatus {
  STAR_STATUS_OK = 0,
  STAR_STATUS_NULL_POINTER = 1,
  STAR_STATUS_INVALID_ARGUMENT = 2,
  STAR_STATUS_INPUT = 3,
  STAR_STATUS_IO = 4,
  STAR_STATUS_FORMAT = 5,
  STAR_STATUS_NUMERIC = 6,
  STAR_STATUS_BUFFER_TOO_SMALL = 7,
  STAR_STATUS_PANIC = 8,
} StarStatus;

typedef enum StarVariant {
  STAR_VARIANT_HISTORY = 0,
  STAR_VARIANT_FUTURE = 1,
  STAR_VARIANT_BOTH = 2,
} StarVariant;

/**
 * Opaque corpus handle.
 */
typedef struct StarCorpus StarCorpus;

/**
 * Opaque model handle.
 */
typedef struct StarModel StarModel;

/**
 * Indicator settings; see [`star_indicator_config_default`].
 */
typedef struct StarIndicatorConfig {
  double lambda;
  double tau;
  double epsilon;
  bool renorm_star;
  enum StarVariant variant;
} StarIndicatorConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *star_version(void);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `cap` bytes. Returns the full length including the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `cap` writable bytes.
 */
size_t star_last_error(char *buf, size_t cap);

struct StarIndicatorConfig star_indicator_config_default(void);

/**
 * Loads a checkpoint. `*out` is null unless the call succeeds.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum StarStatus star_model_load(const char *path, struct StarModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`star_model_load`] and not be used afterwards.
 */
void star_model_free(struct StarModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be valid for writes.
 */
enum StarStatus star_model_vocab_size(const struct StarModel *model, uint32_t *out);

/**
 * Loads a corpus file. `*out` is null unless the call succeeds.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum StarStatus star_corpus_load(const char *path, struct StarCorpus **out);

/**
 * Releases a corpus; null is ignored.
 *
 * # Safety
 * `corpus` must come from [`star_corpus_load`] and not be used afterwards.
 */
void star_corpus_free(struct StarCorpus *corpus);

/**
 * # Safety
 * `corpus` must be a live handle; `out` must be valid for writes.
 */
enum StarStatus star_corpus_len(const struct StarCorpus *corpus, size_t *out);

/**
 * Reference tokens of utterance `index`.
 *
 * # Safety
 * Handles must be live; `buf` valid for `cap` tokens; `len_out` valid for writes.
 */
enum StarStatus star_corpus_reference(const struct StarCorpus *corpus,
                                      size_t index,
                                      uint32_t *buf,
                                      size_t cap,
                                      size_t *len_out);

/**
 * Greedy hypothesis of utterance `index`: content tokens without prompt
 * or eos.
 *
 * # Safety
 * Handles must be live; `buf` valid for `cap` tokens; `len_out` valid for writes.
 */
enum StarStatus star_decode_greedy(const struct StarModel *model,
                                   const struct StarCorpus *corpus,
                                   size_t index,
                                   uint32_t *buf,
                                   size_t cap,
                                   size_t *len_out);

/**
 * Normalized confidence, attentive and combined scores of the greedy
 * hypothesis of utterance `index`, one per scored position (content
 * tokens then eos). The three buffers share `cap`.
 *
 * # Safety
 * Handles must be live; `config` valid; each buffer valid for `cap` values.
 */
enum StarStatus star_score_utterance(const struct StarModel *model,
                                     const struct StarCorpus *corpus,
                                     size_t index,
                                     const struct StarIndicatorConfig *config,
                                     double *conf,
                                     double *attn,
                                     double *star,
                                     size_t cap,
                                     size_t *len_out);

/**
 * Combined scores of `n` (confidence, attentive) pairs.
 *
 * # Safety
 * `conf`, `attn` and `out` must be valid for `n` values; `config` valid.
 */
enum StarStatus star_combine(const double *conf,
                             const double *attn,
                             size_t n,
                             const struct StarIndicatorConfig *config,
                             double *out);

/**
 * Levenshtein distance between two token sequences.
 *
 * # Safety
 * `a` and `b` must be valid for `na` and `nb` tokens; `out` valid for writes.
 */
enum StarStatus star_edit_distance(const uint32_t *a,
                                   size_t na,
                                   const uint32_t *b,
                                   size_t nb,
                                   size_t *out);

/**
 * Normalized cross-entropy of scores against correctness labels.
 *
 * # Safety
 * `scores` and `labels` must be valid for `n` values; `out` valid for writes.
 */
enum StarStatus star_nce(const double *scores, const bool *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STARLAB_H */
