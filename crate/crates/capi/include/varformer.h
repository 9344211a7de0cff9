#ifndef VARFORMER_H
#define VARFORMER_H

/* Generated by cbindgen from varformer-capi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * A loaded checkpoint: parameters plus the architecture they encode.
 */
typedef struct VfModel {
  uint8_t _private[0];
} VfModel;

/**
 * A loaded vocabulary (token <-> id table).
 */
typedef struct VfVocab {
  uint8_t _private[0];
} VfVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL if the last
 * call succeeded. The pointer is valid until the next varformer call on
 * the same thread; do not free it.
 */
const char *vf_last_error(void);

/**
 * Crate version as a static string; do not free it.
 */
const char *vf_version(void);

/**
 * Loads a checkpoint written by the `varformer` CLI. Returns NULL on
 * failure (see `vf_last_error`).
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string.
 */
struct VfModel *vf_model_load(const char *path);

/**
 * Frees a model handle; NULL is a no-op.
 *
 * # Safety
 * `model` must come from `vf_model_load` and not be used afterwards.
 */
void vf_model_free(struct VfModel *model);

/**
 * The model's variant name ("baseline", "gvt", or "svt") as a new string;
 * free it with `vf_string_free`. Returns NULL on failure.
 *
 * # Safety
 * `model` must be a live handle from `vf_model_load`.
 */
char *vf_model_variant(const struct VfModel *model);

/**
 * Loads a vocabulary file written by the `varformer` CLI. Returns NULL on
 * failure.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string.
 */
struct VfVocab *vf_vocab_load(const char *path);

/**
 * Frees a vocabulary handle; NULL is a no-op.
 *
 * # Safety
 * `vocab` must come from `vf_vocab_load` and not be used afterwards.
 */
void vf_vocab_free(struct VfVocab *vocab);

/**
 * Number of entries in the vocabulary, or 0 on failure.
 *
 * # Safety
 * `vocab` must be a live handle from `vf_vocab_load`.
 */
uintptr_t vf_vocab_len(const struct VfVocab *vocab);

/**
 * Frees a string returned by this library; NULL is a no-op.
 *
 * # Safety
 * `s` must come from a varformer function documented to return a new
 * string, and must not be used afterwards.
 */
void vf_string_free(char *s);

/**
 * Greedy-decodes a response to `context` (whitespace-tokenized UTF-8).
 *
 * `meta` is an optional metadata label the model was trained with, or
 * NULL. When `sample` is true the latent is drawn from the prior with
 * `seed` (the baseline ignores it); otherwise the prior mean is used.
 * `max_new` of 0 means the model's trained response budget. Returns a new
 * string to free with `vf_string_free`, or NULL on failure.
 *
 * # Safety
 * `model` and `vocab` must be live handles; `context` must be a
 * NUL-terminated UTF-8 string; `meta` must be NULL or the same.
 */
char *vf_generate(const struct VfModel *model,
                  const struct VfVocab *vocab,
                  const char *context,
                  const char *meta,
                  uint64_t seed,
                  bool sample,
                  uintptr_t max_new);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* VARFORMER_H */
