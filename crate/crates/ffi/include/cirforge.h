#ifndef CIRFORGE_H
#define CIRFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CirforgeStatus {
  CIRFORGE_STATUS_OK = 0,
  CIRFORGE_STATUS_NULL_POINTER = 1,
  CIRFORGE_STATUS_INVALID_UTF8 = 2,
  CIRFORGE_STATUS_INVALID_ARGUMENT = 3,
  CIRFORGE_STATUS_IO = 4,
  CIRFORGE_STATUS_PARSE = 5,
  CIRFORGE_STATUS_BUFFER_TOO_SMALL = 6,
  CIRFORGE_STATUS_PANIC = 7,
} CirforgeStatus;

/**
 * Loaded CLIP BPE vocabulary.
 */
typedef struct CirforgeTokenizer CirforgeTokenizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Owned by the
 * library and valid until the next call on the same thread.
 */
const char *cirforge_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void cirforge_string_free(char *s);

/**
 * # Safety
 * Paths must be NUL-terminated; `out_tok` must be writable.
 */
enum CirforgeStatus cirforge_tokenizer_load(const char *vocab_path,
                                            const char *merges_path,
                                            struct CirforgeTokenizer **out_tok);

/**
 * # Safety
 * `tok` must be null or a handle from [`cirforge_tokenizer_load`], not yet freed.
 */
void cirforge_tokenizer_free(struct CirforgeTokenizer *tok);

/**
 * Encodes `text` with start and end markers. Writes at most `cap` ids and
 * always reports the full length in `out_len`; returns `BufferTooSmall`
 * when `cap` is short. `ids` may be null when `cap` is 0.
 *
 * # Safety
 * `ids` must have room for `cap` values.
 */
enum CirforgeStatus cirforge_tokenizer_encode(const struct CirforgeTokenizer *tok,
                                              const char *text,
                                              uint32_t *ids,
                                              size_t cap,
                                              size_t *out_len);

/**
 * Token count as checked against the caption budget.
 *
 * # Safety
 * `text` must be NUL-terminated; `out_count` must be writable.
 */
enum CirforgeStatus cirforge_tokenizer_count(const struct CirforgeTokenizer *tok,
                                             const char *text,
                                             bool count_special,
                                             size_t *out_count);

/**
 * # Safety
 * `a` and `b` must each point to `len` doubles.
 */
enum CirforgeStatus cirforge_cosine(const double *a, const double *b, size_t len, double *out_sim);

/**
 * 64-bit pHash of a row-major 8-bit grayscale buffer, at least 32x32.
 *
 * # Safety
 * `pixels` must point to `width * height` bytes.
 */
enum CirforgeStatus cirforge_phash_gray(const uint8_t *pixels,
                                        size_t width,
                                        size_t height,
                                        uint64_t *out_hash);

uint32_t cirforge_hamming(uint64_t a, uint64_t b);

/**
 * Joins two or three captions into one compound caption.
 *
 * # Safety
 * `parts` must point to `n` NUL-terminated strings. Free the result with
 * [`cirforge_string_free`].
 */
enum CirforgeStatus cirforge_join(const char *const *parts, size_t n, char **out_text);

/**
 * # Safety
 * `text` must be NUL-terminated; `out_found` must be writable.
 */
enum CirforgeStatus cirforge_has_forbidden_verb(const char *text, bool *out_found);

/**
 * AP@k of one ranking, normalised by `min(k, n_relevant)`.
 *
 * # Safety
 * `ranking` and `relevant` must point to `n_ranking` and `n_relevant` strings.
 */
enum CirforgeStatus cirforge_average_precision(const char *const *ranking,
                                               size_t n_ranking,
                                               const char *const *relevant,
                                               size_t n_relevant,
                                               size_t k,
                                               double *out_ap);

/**
 * Recall@k and mAP@k over a run. Both inputs are JSON arrays:
 * `[{"query_id", "ranking"}]` and `[{"query_id", "relevant"}]`.
 *
 * # Safety
 * Strings must be NUL-terminated; out-pointers must be writable.
 */
enum CirforgeStatus cirforge_evaluate(const char *run_json,
                                      const char *relevance_json,
                                      size_t k,
                                      double *out_recall,
                                      double *out_map);

/**
 * Atomic and compound captions for one pair. `captions_json` is a JSON array
 * of strings; `config_json` is null for defaults or a permute config object.
 * The result is a JSON array of caption objects.
 *
 * # Safety
 * Strings must be NUL-terminated. Free the result with [`cirforge_string_free`].
 */
enum CirforgeStatus cirforge_permute(const struct CirforgeTokenizer *tok,
                                     const char *captions_json,
                                     const char *config_json,
                                     const char *pair_id,
                                     char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CIRFORGE_H */
