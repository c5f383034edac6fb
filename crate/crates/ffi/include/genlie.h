#ifndef GENLIE_H
#define GENLIE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GenlieStatus {
  GENLIE_STATUS_OK = 0,
  GENLIE_STATUS_NULL_POINTER = 1,
  GENLIE_STATUS_INVALID_UTF8 = 2,
  GENLIE_STATUS_IO = 3,
  GENLIE_STATUS_PARSE = 4,
  GENLIE_STATUS_VALIDATION = 5,
  GENLIE_STATUS_DIMENSION = 6,
  GENLIE_STATUS_UNDEFINED_AUC = 7,
  GENLIE_STATUS_BUFFER_TOO_SMALL = 8,
  GENLIE_STATUS_OUT_OF_RANGE = 9,
  GENLIE_STATUS_PANIC = 10,
} GenlieStatus;

typedef enum GenlieStrategy {
  GENLIE_STRATEGY_UNIFORM = 0,
  GENLIE_STRATEGY_AU = 1,
  GENLIE_STRATEGY_MICRO_EXPRESSION = 2,
  GENLIE_STRATEGY_GAZE = 3,
  GENLIE_STRATEGY_POSTURE = 4,
  GENLIE_STRATEGY_FUSION = 5,
} GenlieStrategy;

/**
 * A loaded corpus manifest with its cue tracks.
 */
typedef struct GenlieCorpus GenlieCorpus;

/**
 * Trained model parameters.
 */
typedef struct GenlieModel GenlieModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next
 * call into the library from the same thread. Never null.
 */
const char *genlie_last_error(void);

/**
 * # Safety
 * `manifest_path` must be a nul-terminated string and `out` a valid pointer.
 */
enum GenlieStatus genlie_corpus_load(const char *manifest_path, struct GenlieCorpus **out);

/**
 * # Safety
 * `corpus` must come from [`genlie_corpus_load`] and not be used afterwards.
 */
void genlie_corpus_free(struct GenlieCorpus *corpus);

/**
 * # Safety
 * `corpus` and `out` must be valid pointers.
 */
enum GenlieStatus genlie_corpus_len(const struct GenlieCorpus *corpus, size_t *out);

/**
 * Selects frames for the `video_index`-th video (manifest order, sorted by
 * id). Writes the flat list of selected frame indices to `out_indices`.
 * `out_len` always receives the required length; when it exceeds
 * `capacity` nothing is written and `BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `out_indices` must hold `capacity` elements; other pointers must be valid.
 */
enum GenlieStatus genlie_select_frames(const struct GenlieCorpus *corpus,
                                       size_t video_index,
                                       enum GenlieStrategy strategy,
                                       size_t n_segments,
                                       size_t frames_per_segment,
                                       size_t *out_indices,
                                       size_t capacity,
                                       size_t *out_len);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum GenlieStatus genlie_model_load(const char *path, struct GenlieModel **out);

/**
 * # Safety
 * `model` must come from [`genlie_model_load`] and not be used afterwards.
 */
void genlie_model_free(struct GenlieModel *model);

/**
 * # Safety
 * All pointers must be valid.
 */
enum GenlieStatus genlie_model_dims(const struct GenlieModel *model,
                                    size_t *d,
                                    size_t *hidden,
                                    size_t *d_out,
                                    size_t *n_speakers);

/**
 * Deceptive-class probability for one pooled segment feature.
 *
 * # Safety
 * `pooled` must hold `len` values; `out_probability` must be valid.
 */
enum GenlieStatus genlie_model_predict(const struct GenlieModel *model,
                                       const double *pooled,
                                       size_t len,
                                       int use_reembedding,
                                       double *out_probability);

/**
 * ROC AUC in percent.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be valid.
 */
enum GenlieStatus genlie_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Positive-class F1 in percent.
 *
 * # Safety
 * `predictions` and `labels` must hold `n` values; `out` must be valid.
 */
enum GenlieStatus genlie_f1(const uint8_t *predictions,
                            const uint8_t *labels,
                            size_t n,
                            double *out);

/**
 * Accuracy in percent.
 *
 * # Safety
 * `predictions` and `labels` must hold `n` values; `out` must be valid.
 */
enum GenlieStatus genlie_accuracy(const uint8_t *predictions,
                                  const uint8_t *labels,
                                  size_t n,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GENLIE_H */
