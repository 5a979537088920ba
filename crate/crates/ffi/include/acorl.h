#ifndef ACORL_H
#define ACORL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AcorlStatus {
  ACORL_STATUS_OK = 0,
  ACORL_STATUS_CONFIG = 2,
  ACORL_STATUS_DATA = 3,
  ACORL_STATUS_CONTRACT = 4,
  ACORL_STATUS_NULL_POINTER = 5,
  ACORL_STATUS_INTERNAL = 6,
} AcorlStatus;

/**
 * Opaque dataset handle.
 */
typedef struct AcorlDataset AcorlDataset;

/**
 * Opaque model handle.
 */
typedef struct AcorlModel AcorlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *acorl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *acorl_version(void);

/**
 * Load a model checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AcorlStatus acorl_model_load(const char *path, struct AcorlModel **out);

/**
 * Save a model to a checkpoint file.
 *
 * # Safety
 * `model` must come from [`acorl_model_load`]; `path` must be NUL-terminated.
 */
enum AcorlStatus acorl_model_save(const struct AcorlModel *model, const char *path);

/**
 * Release a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`acorl_model_load`] and not be used afterwards.
 */
void acorl_model_free(struct AcorlModel *model);

/**
 * Input width, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t acorl_model_input_dim(const struct AcorlModel *model);

/**
 * Representation width, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t acorl_model_repr_dim(const struct AcorlModel *model);

/**
 * Width of the task output: the number of classes for classifiers, the
 * representation width for embedding models. 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t acorl_model_output_dim(const struct AcorlModel *model);

/**
 * 1 when the model has an embedding head, 0 otherwise.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
int32_t acorl_model_is_embedding(const struct AcorlModel *model);

/**
 * Task output (logits or unit embeddings) for `rows` inputs of width
 * `input_dim`; `out_len` must equal `rows * output_dim`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum AcorlStatus acorl_model_forward(const struct AcorlModel *model,
                                     const double *inputs,
                                     size_t rows,
                                     double *out,
                                     size_t out_len);

/**
 * Representation for `rows` inputs; `out_len` must equal `rows * repr_dim`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum AcorlStatus acorl_model_representation(const struct AcorlModel *model,
                                            const double *inputs,
                                            size_t rows,
                                            double *out,
                                            size_t out_len);

/**
 * Load a CSV dataset into `*out`.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum AcorlStatus acorl_dataset_load(const char *path, struct AcorlDataset **out);

/**
 * Release a dataset. NULL is ignored.
 *
 * # Safety
 * `data` must come from [`acorl_dataset_load`] and not be used afterwards.
 */
void acorl_dataset_free(struct AcorlDataset *data);

/**
 * Number of rows, or 0 for NULL.
 *
 * # Safety
 * `data` must be NULL or a live handle.
 */
size_t acorl_dataset_rows(const struct AcorlDataset *data);

/**
 * Feature width, or 0 for NULL.
 *
 * # Safety
 * `data` must be NULL or a live handle.
 */
size_t acorl_dataset_dim(const struct AcorlDataset *data);

/**
 * Copy features (`rows * dim` doubles) and labels (`rows` values) out. Either
 * destination may be NULL to skip it.
 *
 * # Safety
 * Non-NULL buffers must hold the stated number of elements.
 */
enum AcorlStatus acorl_dataset_copy(const struct AcorlDataset *data,
                                    double *features,
                                    size_t features_len,
                                    uint64_t *labels,
                                    size_t labels_len);

/**
 * Equal error rate of `n` scores; `genuine[i]` is nonzero for genuine trials.
 * `threshold` may be NULL.
 *
 * # Safety
 * `scores` and `genuine` must hold `n` elements; `out_eer` must be valid.
 */
enum AcorlStatus acorl_eer(const double *scores,
                           const uint8_t *genuine,
                           size_t n,
                           double *out_eer,
                           double *out_threshold);

/**
 * Top-1 accuracy of `rows × cols` logits against `labels`.
 *
 * # Safety
 * `logits` must hold `rows * cols` doubles and `labels` `rows` values.
 */
enum AcorlStatus acorl_top1_accuracy(const double *logits,
                                     size_t rows,
                                     size_t cols,
                                     const uint64_t *labels,
                                     double *out);

/**
 * Integrated gradients of a class logit. `x`, `baseline` and `out` hold
 * `input_dim` doubles; `out_gap` (nullable) receives the completeness gap.
 *
 * # Safety
 * Buffers must hold `input_dim` doubles.
 */
enum AcorlStatus acorl_ig_class(const struct AcorlModel *model,
                                size_t class_index,
                                const double *x,
                                const double *baseline,
                                size_t steps,
                                double *out,
                                double *out_gap);

/**
 * Integrated gradients of the cosine between the embedding and `reference`
 * (`repr_dim` doubles).
 *
 * # Safety
 * `reference` must hold `repr_dim` doubles; the other buffers `input_dim`.
 */
enum AcorlStatus acorl_ig_cosine(const struct AcorlModel *model,
                                 const double *reference,
                                 size_t reference_len,
                                 const double *x,
                                 const double *baseline,
                                 size_t steps,
                                 double *out,
                                 double *out_gap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACORL_H */
