#ifndef ORD2SEQ_H
#define ORD2SEQ_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ord2seq_status {
  ORD2SEQ_STATUS_OK = 0,
  ORD2SEQ_STATUS_NULL_POINTER = 1,
  ORD2SEQ_STATUS_INVALID_ARGUMENT = 2,
  ORD2SEQ_STATUS_INVALID_CATEGORY = 3,
  ORD2SEQ_STATUS_IO = 4,
  ORD2SEQ_STATUS_CHECKPOINT = 5,
  ORD2SEQ_STATUS_BUFFER_TOO_SMALL = 6,
  ORD2SEQ_STATUS_INTERNAL = 7,
} ord2seq_status;

/**
 * Opaque trained model loaded from a checkpoint.
 */
typedef struct ord2seq_model ord2seq_model;

/**
 * Opaque dichotomic tree.
 */
typedef struct ord2seq_tree ord2seq_tree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ord2seq_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap - 1` bytes) and returns the full message
 * length excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t ord2seq_last_error(char *buf, size_t cap);

/**
 * Builds the tree over `categories` ordered categories.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum ord2seq_status ord2seq_tree_new(size_t categories, struct ord2seq_tree **out);

/**
 * # Safety
 * `tree` must be null or a handle from [`ord2seq_tree_new`] not yet freed.
 */
void ord2seq_tree_free(struct ord2seq_tree *tree);

/**
 * Tree depth, or 0 for a null handle.
 *
 * # Safety
 * `tree` must be null or a live tree handle.
 */
size_t ord2seq_tree_depth(const struct ord2seq_tree *tree);

/**
 * Number of categories, or 0 for a null handle.
 *
 * # Safety
 * `tree` must be null or a live tree handle.
 */
size_t ord2seq_tree_categories(const struct ord2seq_tree *tree);

/**
 * Writes the depth-length bit path of `category` into `bits`.
 *
 * # Safety
 * `tree` must be a live tree handle and `bits` must hold `cap` bytes.
 */
enum ord2seq_status ord2seq_tree_encode(const struct ord2seq_tree *tree,
                                        size_t category,
                                        uint8_t *bits,
                                        size_t cap);

/**
 * Maps a bit path of length `len` back to its category.
 *
 * # Safety
 * `tree` must be a live tree handle, `bits` must hold `len` bytes and
 * `category` must be writable.
 */
enum ord2seq_status ord2seq_tree_decode(const struct ord2seq_tree *tree,
                                        const uint8_t *bits,
                                        size_t len,
                                        size_t *category);

/**
 * Writes the `depth × categories` multi-hot matrix of `category`,
 * row-major, into `out`.
 *
 * # Safety
 * `tree` must be a live tree handle and `out` must hold `cap` doubles.
 */
enum ord2seq_status ord2seq_tree_multihot(const struct ord2seq_tree *tree,
                                          size_t category,
                                          double *out,
                                          size_t cap);

/**
 * Masked sigmoid probabilities: `sigmoid(logits)` scaled by `alpha` where
 * `prev_multihot` is 0. Pass a null `prev_multihot` for the first step.
 *
 * # Safety
 * `logits` and `out` must hold `n` doubles; `prev_multihot` must be null
 * or hold `n` doubles.
 */
enum ord2seq_status ord2seq_apply_mask(const double *logits,
                                       const double *prev_multihot,
                                       size_t n,
                                       double alpha,
                                       double *out);

/**
 * Loads a model from a checkpoint file written by `ord2seq train`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid handle slot.
 */
enum ord2seq_status ord2seq_model_load(const char *path, struct ord2seq_model **out);

/**
 * # Safety
 * `model` must be null or a handle from [`ord2seq_model_load`] not yet freed.
 */
void ord2seq_model_free(struct ord2seq_model *model);

/**
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t ord2seq_model_categories(const struct ord2seq_model *model);

/**
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t ord2seq_model_feature_dim(const struct ord2seq_model *model);

/**
 * Mask factor the model decodes with.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
double ord2seq_model_alpha(const struct ord2seq_model *model);

/**
 * Replaces the mask factor used for decoding; must lie in (0, 1].
 *
 * # Safety
 * `model` must be a live model handle.
 */
enum ord2seq_status ord2seq_model_set_alpha(struct ord2seq_model *model, double alpha);

/**
 * Predicts a category for each of `rows` feature vectors stored row-major
 * in `features` (`rows × feature_dim` doubles).
 *
 * # Safety
 * `model` must be a live model handle, `features` must hold
 * `rows * feature_dim` doubles and `categories` must hold `rows` values.
 */
enum ord2seq_status ord2seq_model_predict(const struct ord2seq_model *model,
                                          const double *features,
                                          size_t rows,
                                          size_t *categories);

/**
 * Greedy-decodes one feature vector. Writes the category, and if
 * `probs` is non-null the masked probabilities of every step
 * (`depth × categories` doubles, row-major).
 *
 * # Safety
 * `model` must be a live model handle, `features` must hold `feature_dim`
 * doubles, `category` must be writable and `probs` must be null or hold
 * `probs_cap` doubles.
 */
enum ord2seq_status ord2seq_model_decode(const struct ord2seq_model *model,
                                         const double *features,
                                         size_t *category,
                                         double *probs,
                                         size_t probs_cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORD2SEQ_H */
