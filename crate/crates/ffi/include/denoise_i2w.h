/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef DENOISE_I2W_H
#define DENOISE_I2W_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Di2wStatus {
  DI2W_STATUS_OK = 0,
  DI2W_STATUS_NULL_POINTER = 1,
  DI2W_STATUS_INVALID_ARGUMENT = 2,
  DI2W_STATUS_IO = 3,
  DI2W_STATUS_BAD_MAGIC = 4,
  DI2W_STATUS_UNSUPPORTED_VERSION = 5,
  DI2W_STATUS_TRUNCATED = 6,
  DI2W_STATUS_NON_FINITE = 7,
  DI2W_STATUS_DIMENSION_MISMATCH = 8,
  DI2W_STATUS_ZERO_NORM = 9,
  DI2W_STATUS_UNKNOWN_WORD = 10,
  DI2W_STATUS_INVALID_CONFIG = 11,
  DI2W_STATUS_EMPTY = 12,
  DI2W_STATUS_BUFFER_TOO_SMALL = 13,
  DI2W_STATUS_INTERNAL = 14,
  DI2W_STATUS_PANIC = 15,
} Di2wStatus;

typedef enum Di2wTemplate {
  // `a photo of [*]`
  DI2W_TEMPLATE_GLOBAL = 0,
  // `a photo of [*] , <words>`
  DI2W_TEMPLATE_COMPOSE = 1,
  // `a <word> of [*]`
  DI2W_TEMPLATE_DOMAIN = 2,
  // `a photo of [*] , w1 and w2 , and w3 ...`
  DI2W_TEMPLATE_OBJECT_COMPOSITION = 3,
  // `a photo of [*] , <words>` with the words as one sentence.
  DI2W_TEMPLATE_SENTENCE = 4,
} Di2wTemplate;

// Trained mapping network with the frozen text side it was trained against.
typedef struct Di2wModel Di2wModel;

// Store records plus a normalized gallery of their image embeddings.
typedef struct Di2wStore Di2wStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message from the last call on this thread, empty after a success. The
// pointer stays valid until the next call into this library on the thread.
const char *di2w_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *di2w_version(void);

// Opens a `.di2w` store. On success `*out` owns a handle for
// [`di2w_store_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum Di2wStatus di2w_store_open(const char *path, struct Di2wStore **out);

// # Safety
// `store` must come from [`di2w_store_open`] and not be used afterwards.
void di2w_store_free(struct Di2wStore *store);

// Number of records and embedding dimension.
//
// # Safety
// `store` must be a live handle; `len` and `dim` valid pointers.
enum Di2wStatus di2w_store_info(const struct Di2wStore *store, size_t *len, size_t *dim);

// Copies the image embedding of record `index` into `out[0..dim]`.
//
// # Safety
// `out` must hold `out_len` doubles.
enum Di2wStatus di2w_store_image_embedding(const struct Di2wStore *store,
                                           size_t index,
                                           double *out,
                                           size_t out_len);

// Writes up to `k` record indices into `out`, by descending cosine similarity
// to `query` with ties to the lower index, and their count into `written`.
//
// # Safety
// `query` must hold `query_len` doubles and `out` at least `k` entries.
enum Di2wStatus di2w_rank(const struct Di2wStore *store,
                          const double *query,
                          size_t query_len,
                          size_t k,
                          size_t *out,
                          size_t *written);

// Loads a training checkpoint and the encoders file it was trained with.
//
// # Safety
// Both paths must be NUL-terminated strings and `out` a valid pointer.
enum Di2wStatus di2w_model_open(const char *checkpoint_path,
                                const char *encoders_path,
                                struct Di2wModel **out);

// # Safety
// `model` must come from [`di2w_model_open`] and not be used afterwards.
void di2w_model_free(struct Di2wModel *model);

// Image embedding dimension the model expects and the query dimension it
// produces.
//
// # Safety
// `model` must be a live handle; outputs valid pointers.
enum Di2wStatus di2w_model_info(const struct Di2wModel *model,
                                size_t *input_dim,
                                size_t *query_dim);

// Maps `reference` to a pseudo word, places it in the template with the
// space-separated `words` (may be null for the global template), encodes the
// prompt and writes the unit-norm query into `out`.
//
// # Safety
// `reference` must hold `reference_len` doubles, `out` `out_len` doubles and
// `words` must be null or a NUL-terminated string.
enum Di2wStatus di2w_compose_query(const struct Di2wModel *model,
                                   const double *reference,
                                   size_t reference_len,
                                   enum Di2wTemplate template_,
                                   const char *words,
                                   double *out,
                                   size_t out_len);

// Scales `v` to unit L2 norm in place.
//
// # Safety
// `v` must hold `len` doubles.
enum Di2wStatus di2w_l2_normalize(double *v, size_t len);

// Finite-difference check of the full objective's gradient on a random
// problem. Writes the largest relative error and whether it is within
// `tolerance`.
//
// # Safety
// `max_rel_err` and `passed` must be valid pointers.
enum Di2wStatus di2w_gradcheck(size_t d,
                               size_t token_dim,
                               size_t batch,
                               uint64_t seed,
                               double h,
                               double tolerance,
                               double *max_rel_err,
                               bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DENOISE_I2W_H */
