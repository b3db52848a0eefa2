#ifndef ATX_H
#define ATX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AtxStatus {
  ATX_STATUS_OK = 0,
  ATX_STATUS_NULL_POINTER = 1,
  ATX_STATUS_INVALID_ARGUMENT = 2,
  ATX_STATUS_SHAPE = 3,
  ATX_STATUS_IO = 4,
  ATX_STATUS_PARSE = 5,
  ATX_STATUS_CHECKPOINT = 6,
  ATX_STATUS_NON_FINITE = 7,
  ATX_STATUS_METRIC = 8,
  ATX_STATUS_CONFIG = 9,
  ATX_STATUS_TRAINING = 10,
  ATX_STATUS_PANIC = 11,
  ATX_STATUS_OTHER = 12,
} AtxStatus;

/**
 * Opaque dataset manifest handle.
 */
typedef struct AtxManifest AtxManifest;

/**
 * Opaque model handle.
 */
typedef struct AtxModel AtxModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in bytes,
 * excluding the terminator.
 */
size_t atx_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *atx_version(void);

/**
 * Learning rate halved every `period` epochs.
 */
double atx_lr_schedule(size_t epoch, double base_lr, size_t period);

/**
 * ROC-AUC of `n` scores against 0/1 labels.
 */
enum AtxStatus atx_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *auc);

/**
 * Unweighted mean of per-class AUCs. `scores` and `labels` are row-major
 * `[n_samples, n_classes]`.
 */
enum AtxStatus atx_mean_multilabel_auc(const double *scores,
                                       const uint8_t *labels,
                                       size_t n_samples,
                                       size_t n_classes,
                                       double *mean_auc);

/**
 * Support-weighted F1 of predicted against true class indices.
 */
enum AtxStatus atx_weighted_f1(const uint32_t *predicted,
                               const uint32_t *truth,
                               size_t n,
                               size_t n_classes,
                               double *f1);

/**
 * Attention-transfer loss between two `[n, c, h, w]` activation tensors.
 */
enum AtxStatus atx_attention_loss(const double *student,
                                  const double *teacher,
                                  size_t n,
                                  size_t c,
                                  size_t h,
                                  size_t w,
                                  double *loss);

/**
 * Loads a checkpoint in evaluation mode.
 */
enum AtxStatus atx_model_load(const char *path, struct AtxModel **model);

void atx_model_free(struct AtxModel *model);

enum AtxStatus atx_model_param_count(const struct AtxModel *model, size_t *count);

enum AtxStatus atx_model_num_classes(const struct AtxModel *model, size_t *classes);

enum AtxStatus atx_model_in_channels(const struct AtxModel *model, size_t *channels);

/**
 * Shape of the attention tap for an `height` x `width` input.
 */
enum AtxStatus atx_model_attention_shape(const struct AtxModel *model,
                                         size_t height,
                                         size_t width,
                                         size_t *c,
                                         size_t *h,
                                         size_t *w);

/**
 * Class probabilities for a normalised `[n, channels, height, width]`
 * batch. `probs` must hold `n * num_classes` values.
 */
enum AtxStatus atx_model_predict(const struct AtxModel *model,
                                 const float *images,
                                 size_t n,
                                 size_t height,
                                 size_t width,
                                 double *probs,
                                 size_t probs_len);

enum AtxStatus atx_manifest_load(const char *path, struct AtxManifest **manifest);

void atx_manifest_free(struct AtxManifest *manifest);

enum AtxStatus atx_manifest_len(const struct AtxManifest *manifest, size_t *len);

enum AtxStatus atx_manifest_num_classes(const struct AtxManifest *manifest, size_t *classes);

/**
 * Patient-level split by fractions. Writes the record counts of the train,
 * validation and test splits into `counts[0..3]`.
 */
enum AtxStatus atx_manifest_split_counts(const struct AtxManifest *manifest,
                                         double train,
                                         double validation,
                                         double test,
                                         uint64_t seed,
                                         size_t *counts);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATX_H */
