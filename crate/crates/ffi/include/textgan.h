#ifndef TEXTGAN_H
#define TEXTGAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define TG_OK 0

/**
 * A required pointer argument was null.
 */
#define TG_ERR_NULL 1

/**
 * An argument was out of range or a string was not UTF-8.
 */
#define TG_ERR_ARGUMENT 2

/**
 * A file could not be read.
 */
#define TG_ERR_IO 3

/**
 * A checkpoint failed its integrity check or has an unsupported version.
 */
#define TG_ERR_CHECKPOINT 4

/**
 * A computation produced a non-finite value.
 */
#define TG_ERR_NUMERIC 5

/**
 * Any other failure, including a caught panic.
 */
#define TG_ERR_INTERNAL 6

/**
 * Trained generator with its vocabulary.
 */
typedef struct TgGan TgGan;

/**
 * Trained language model with its vocabulary.
 */
typedef struct TgLm TgLm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on this thread.
 */
const char *tg_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void tg_string_free(char *s);

/**
 * Loads a language-model checkpoint and the vocabulary file it references.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
int32_t tg_lm_load(const char *path, struct TgLm **out);

/**
 * # Safety
 * `lm` must come from `tg_lm_load` and not have been freed. Null is ignored.
 */
void tg_lm_free(struct TgLm *lm);

/**
 * Vocabulary size, reserved ids included.
 *
 * # Safety
 * `lm` must be a live handle; `out` must be writable.
 */
int32_t tg_lm_vocab_size(const struct TgLm *lm, size_t *out);

/**
 * Perplexity over the non-empty lines of `text`.
 *
 * # Safety
 * `lm` must be a live handle, `text` nul-terminated, `out` writable.
 */
int32_t tg_lm_perplexity(const struct TgLm *lm, const char *text, double *out);

/**
 * Continues `prefix` by up to `max_new` characters sampled at `temperature`
 * (greedy when not positive). Writes the prefix plus continuation to `out`.
 *
 * # Safety
 * `lm` must be a live handle, `prefix` nul-terminated, `out` writable.
 */
int32_t tg_lm_generate(const struct TgLm *lm,
                       const char *prefix,
                       size_t max_new,
                       double temperature,
                       uint64_t seed,
                       char **out);

/**
 * Loads a GAN checkpoint and the vocabulary file it references.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
int32_t tg_gan_load(const char *path, struct TgGan **out);

/**
 * # Safety
 * `gan` must come from `tg_gan_load` and not have been freed. Null is ignored.
 */
void tg_gan_free(struct TgGan *gan);

/**
 * `n` hard generator samples decoded to text, one per line.
 *
 * # Safety
 * `gan` must be a live handle; `out` must be writable.
 */
int32_t tg_gan_sample(const struct TgGan *gan, size_t n, double tau, uint64_t seed, char **out);

/**
 * Jensen-Shannon divergence in nats between two tables over all sequences of
 * `seq_len` tokens from `vocab_size` symbols (`vocab_size^seq_len` entries,
 * first position most significant).
 *
 * # Safety
 * `p` and `q` must hold `vocab_size^seq_len` doubles; `out` must be writable.
 */
int32_t tg_js_divergence(size_t seq_len,
                         size_t vocab_size,
                         const double *p,
                         const double *q,
                         double *out);

/**
 * Optimal discriminator output at sequence `x` for the tables `p_data` and
 * `p_g` laid out as in `tg_js_divergence`.
 *
 * # Safety
 * `p_data` and `p_g` must hold `vocab_size^seq_len` doubles, `x` must hold
 * `seq_len` ids, `out` must be writable.
 */
int32_t tg_optimal_discriminator(size_t seq_len,
                                 size_t vocab_size,
                                 const double *p_data,
                                 const double *p_g,
                                 const size_t *x,
                                 double *out);

/**
 * One Gumbel-Softmax draw over `k` logits at temperature `tau`, written to
 * `out` (`k` doubles). `hard` non-zero gives the one-hot sample.
 *
 * # Safety
 * `logits` must hold `k` doubles and `out` must have room for `k` doubles.
 */
int32_t tg_gumbel_softmax(const double *logits,
                          size_t k,
                          double tau,
                          int32_t hard,
                          uint64_t seed,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEXTGAN_H */
