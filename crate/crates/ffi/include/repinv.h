/* C interface to repinv: load models, capture hidden states, invert, score. */

#ifndef REPINV_H
#define REPINV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RepinvStatus {
  REPINV_STATUS_OK = 0,
  REPINV_STATUS_NULL_POINTER = 1,
  REPINV_STATUS_INVALID_UTF8 = 2,
  REPINV_STATUS_BUFFER_TOO_SMALL = 3,
  REPINV_STATUS_IO = 4,
  REPINV_STATUS_CHECKPOINT = 5,
  REPINV_STATUS_SHAPE = 6,
  REPINV_STATUS_INDEX = 7,
  REPINV_STATUS_LENGTH = 8,
  REPINV_STATUS_LAYER = 9,
  REPINV_STATUS_CONFIG = 10,
  REPINV_STATUS_NUMERIC = 11,
  REPINV_STATUS_CONTRACT = 12,
  REPINV_STATUS_OTHER = 13,
  REPINV_STATUS_PANIC = 14,
} RepinvStatus;

typedef struct RepinvInverter RepinvInverter;

typedef struct RepinvLm RepinvLm;

typedef struct RepinvTokenizer RepinvTokenizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call on this thread.
 */
const char *repinv_last_error(void);

/**
 * Library version as a static string.
 */
const char *repinv_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library or be null.
 */
void repinv_string_free(char *s);

/**
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum RepinvStatus repinv_tokenizer_load(const char *path, struct RepinvTokenizer **out);

/**
 * # Safety
 * `tok` must come from [`repinv_tokenizer_load`] or be null.
 */
void repinv_tokenizer_free(struct RepinvTokenizer *tok);

/**
 * # Safety
 * Pointers must be valid; `out` must hold `cap` ids.
 */
enum RepinvStatus repinv_tokenizer_encode(const struct RepinvTokenizer *tok,
                                          const char *text,
                                          uint32_t *out,
                                          size_t cap,
                                          size_t *out_len);

/**
 * Decodes ids into a newly allocated string released with
 * [`repinv_string_free`].
 *
 * # Safety
 * Pointers must be valid; `ids` must hold `len` ids.
 */
enum RepinvStatus repinv_tokenizer_decode(const struct RepinvTokenizer *tok,
                                          const uint32_t *ids,
                                          size_t len,
                                          char **out);

/**
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum RepinvStatus repinv_lm_load(const char *path, struct RepinvLm **out);

/**
 * # Safety
 * `lm` must come from [`repinv_lm_load`] or be null.
 */
void repinv_lm_free(struct RepinvLm *lm);

/**
 * Model width, or 0 for a null handle.
 *
 * # Safety
 * `lm` must be a live handle or null.
 */
size_t repinv_lm_d_model(const struct RepinvLm *lm);

/**
 * Number of blocks, or 0 for a null handle.
 *
 * # Safety
 * `lm` must be a live handle or null.
 */
size_t repinv_lm_n_layers(const struct RepinvLm *lm);

/**
 * Last-token residual stream after block `layer` (1-based).
 *
 * # Safety
 * Pointers must be valid; `out` must hold `cap` floats.
 */
enum RepinvStatus repinv_lm_capture(const struct RepinvLm *lm,
                                    const uint32_t *ids,
                                    size_t len,
                                    size_t layer,
                                    float *out,
                                    size_t cap,
                                    size_t *out_len);

/**
 * Loads an adapter, its decoding model, and optionally the decoder's
 * LoRA. The prompt strings default to the training defaults when null.
 *
 * # Safety
 * String arguments must be valid C strings or null where allowed; `tok`
 * and `out` must be valid.
 */
enum RepinvStatus repinv_inverter_load(const char *adapter_path,
                                       const char *decoder_path,
                                       const char *lora_path,
                                       const struct RepinvTokenizer *tok,
                                       const char *prompt_sys,
                                       const char *prompt_user,
                                       struct RepinvInverter **out);

/**
 * # Safety
 * `inv` must come from [`repinv_inverter_load`] or be null.
 */
void repinv_inverter_free(struct RepinvInverter *inv);

/**
 * Greedily reconstructs up to `max_new` tokens from one representation
 * of `d` floats.
 *
 * # Safety
 * Pointers must be valid; `h` must hold `d` floats and `out` `cap` ids.
 */
enum RepinvStatus repinv_invert(const struct RepinvInverter *inv,
                                const float *h,
                                size_t d,
                                size_t max_new,
                                uint32_t *out,
                                size_t cap,
                                size_t *out_len);

/**
 * ROUGE-N F1 over token ids.
 *
 * # Safety
 * `reference` and `candidate` must hold the given counts; `out` valid.
 */
enum RepinvStatus repinv_rouge_n(const uint32_t *reference,
                                 size_t ref_len,
                                 const uint32_t *candidate,
                                 size_t cand_len,
                                 size_t n,
                                 double *out);

/**
 * ROUGE-L F1 over token ids.
 *
 * # Safety
 * `reference` and `candidate` must hold the given counts; `out` valid.
 */
enum RepinvStatus repinv_rouge_l(const uint32_t *reference,
                                 size_t ref_len,
                                 const uint32_t *candidate,
                                 size_t cand_len,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPINV_H */
