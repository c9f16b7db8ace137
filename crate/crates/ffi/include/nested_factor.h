#ifndef NESTED_FACTOR_H
#define NESTED_FACTOR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NfStatus {
  NF_STATUS_OK = 0,
  NF_STATUS_NULL_POINTER = 1,
  NF_STATUS_INVALID_ARGUMENT = 2,
  NF_STATUS_IO = 3,
  NF_STATUS_FORMAT = 4,
  NF_STATUS_MODEL = 5,
  NF_STATUS_METRICS = 6,
  NF_STATUS_PANIC = 7,
} NfStatus;

// A dataset container loaded in memory.
typedef struct NfDataset NfDataset;

// A trained model loaded from a checkpoint.
typedef struct NfModel NfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *nf_last_error_message(void);

// Library version as a static nul-terminated string.
const char *nf_version(void);

// # Safety
// `scores` must point to `n` doubles and `out` to one writable double.
enum NfStatus nf_adjusted_parity(const double *scores, size_t n, double *out);

// # Safety
// `out` must point to one writable double.
enum NfStatus nf_normalize_score(double acc, size_t n_classes, double *out);

// # Safety
// `pred` and `truth` must point to `n` values; `out` to one double.
enum NfStatus nf_macro_f1(const size_t *pred,
                          const size_t *truth,
                          size_t n,
                          size_t n_classes,
                          double *out);

// Accuracy of 2-means change detection on row distances between two
// row-major `n × dim` embedding sets.
//
// # Safety
// `a` and `b` must point to `n * dim` doubles, `changed` to `n` bytes and
// `out` to one double.
enum NfStatus nf_change_detection_accuracy(const double *a,
                                           const double *b,
                                           size_t n,
                                           size_t dim,
                                           const uint8_t *changed,
                                           double *out);

// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum NfStatus nf_dataset_load(const char *path, struct NfDataset **out);

// Number of items, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t nf_dataset_len(const struct NfDataset *ds);

// # Safety
// `ds` must be a live handle; the outputs must be writable.
enum NfStatus nf_dataset_item_shape(const struct NfDataset *ds,
                                    size_t *channels,
                                    size_t *height,
                                    size_t *width);

// Copies class and domain labels into caller buffers of `len` items each;
// `len` must equal the dataset length. Either buffer may be null.
//
// # Safety
// `ds` must be a live handle; non-null buffers must hold `len` values.
enum NfStatus nf_dataset_labels(const struct NfDataset *ds,
                                int32_t *class_out,
                                int32_t *domain_out,
                                size_t len);

// # Safety
// `ds` must be null or a handle from [`nf_dataset_load`], freed once.
void nf_dataset_free(struct NfDataset *ds);

// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum NfStatus nf_model_load(const char *path, struct NfModel **out);

// Width of the representation returned by the embed functions.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum NfStatus nf_model_embedding_dim(const struct NfModel *model, size_t *out);

// Embeds `n` row-major images of the model's input shape into `out`
// (`n × embedding_dim` doubles).
//
// # Safety
// `images` must hold `n · C · H · W` doubles and `out` `out_len` doubles.
enum NfStatus nf_model_embed(const struct NfModel *model,
                             const double *images,
                             size_t n,
                             double *out,
                             size_t out_len);

// Embeds every item of a dataset.
//
// # Safety
// Both handles must be live and `out` must hold `out_len` doubles.
enum NfStatus nf_model_embed_dataset(const struct NfModel *model,
                                     const struct NfDataset *ds,
                                     double *out,
                                     size_t out_len);

// # Safety
// `model` must be null or a handle from [`nf_model_load`], freed once.
void nf_model_free(struct NfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NESTED_FACTOR_H */
