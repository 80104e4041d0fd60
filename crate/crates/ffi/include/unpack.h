/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef UNPACK_H
#define UNPACK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes.
 */
typedef enum UnpackStatus {
  UNPACK_STATUS_OK = 0,
  UNPACK_STATUS_NULL_POINTER = 1,
  UNPACK_STATUS_INVALID_ARGUMENT = 2,
  UNPACK_STATUS_MODEL = 3,
  UNPACK_STATUS_NUMERIC = 4,
  UNPACK_STATUS_UTF8 = 5,
  UNPACK_STATUS_BUFFER_TOO_SMALL = 6,
  UNPACK_STATUS_PANIC = 7,
} UnpackStatus;

/**
 * A trace configuration. Without a target, traces use the most likely
 * next token at the traced position.
 */
typedef struct UnpackConfig UnpackConfig;

/**
 * The result of a trace or rerooting.
 */
typedef struct UnpackLedger UnpackLedger;

/**
 * A loaded model.
 */
typedef struct UnpackModel UnpackModel;

/**
 * Dimensions of a model.
 */
typedef struct UnpackModelInfo {
  size_t n_layers;
  size_t n_heads;
  size_t d_model;
  size_t vocab_size;
  size_t n_ctx;
  size_t n_components;
  uint32_t bos_token_id;
} UnpackModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *unpack_last_error(void);

/**
 * Library version as a static string.
 */
const char *unpack_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void unpack_string_free(char *s);

/**
 * Loads a model directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum UnpackStatus unpack_model_load(const char *path, struct UnpackModel **out);

/**
 * A seeded random model with the default toy dimensions and a byte-level
 * tokenizer.
 *
 * # Safety
 * `out` must be writable.
 */
enum UnpackStatus unpack_model_new_toy(size_t n_layers,
                                       size_t n_heads,
                                       uint64_t seed,
                                       struct UnpackModel **out);

/**
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void unpack_model_free(struct UnpackModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum UnpackStatus unpack_model_info(const struct UnpackModel *model, struct UnpackModelInfo *out);

/**
 * Tokenizes `text`, prepending BOS when `add_bos` is nonzero.
 *
 * # Safety
 * `text` must be NUL-terminated; `out_ids` must hold `cap` ids.
 */
enum UnpackStatus unpack_tokenize(const struct UnpackModel *model,
                                  const char *text,
                                  int32_t add_bos,
                                  uint32_t *out_ids,
                                  size_t cap,
                                  size_t *out_len);

/**
 * Next-token logits at `position`.
 *
 * # Safety
 * `ids` must hold `n_ids` ids; `out_logits` must hold `cap` floats.
 */
enum UnpackStatus unpack_forward_logits(const struct UnpackModel *model,
                                        const uint32_t *ids,
                                        size_t n_ids,
                                        size_t position,
                                        float *out_logits,
                                        size_t cap,
                                        size_t *out_len);

/**
 * One of the named configurations with default hyperparameters.
 *
 * # Safety
 * `name` must be NUL-terminated and `out` writable.
 */
enum UnpackStatus unpack_config_new(const char *name, struct UnpackConfig **out);

/**
 * # Safety
 * `config` must come from this library and not be freed twice.
 */
void unpack_config_free(struct UnpackConfig *config);

/**
 * # Safety
 * `config` must be a live handle.
 */
enum UnpackStatus unpack_config_set_beta(struct UnpackConfig *config, double beta);

/**
 * Enumeration floor and aggregate pruning floor.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum UnpackStatus unpack_config_set_tau(struct UnpackConfig *config,
                                        double tau,
                                        double tau_aggregate);

/**
 * # Safety
 * `config` must be a live handle.
 */
enum UnpackStatus unpack_config_set_top_k(struct UnpackConfig *config, size_t top_k);

/**
 * Branch weights of the KQV configurations; they must sum to 1.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum UnpackStatus unpack_config_set_weights(struct UnpackConfig *config,
                                            double k,
                                            double q,
                                            double v);

/**
 * Targets the centered logit of `token`.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum UnpackStatus unpack_config_set_target(struct UnpackConfig *config, uint32_t token);

/**
 * Targets the logit difference `token - distractor`.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum UnpackStatus unpack_config_set_logit_diff(struct UnpackConfig *config,
                                               uint32_t token,
                                               uint32_t distractor);

/**
 * Traces the target at `position`.
 *
 * # Safety
 * Handles must be live; `ids` must hold `n_ids` ids; `out` writable.
 */
enum UnpackStatus unpack_trace(const struct UnpackModel *model,
                               const struct UnpackConfig *config,
                               const uint32_t *ids,
                               size_t n_ids,
                               size_t position,
                               struct UnpackLedger **out);

/**
 * Reroots at `component` (`"A1.H0"`, `"MLP0"`) at `position`.
 *
 * # Safety
 * Handles must be live; `component` NUL-terminated; `ids` must hold
 * `n_ids` ids; `out` writable.
 */
enum UnpackStatus unpack_reroot(const struct UnpackModel *model,
                                const struct UnpackConfig *config,
                                const uint32_t *ids,
                                size_t n_ids,
                                const char *component,
                                size_t position,
                                struct UnpackLedger **out);

/**
 * # Safety
 * `ledger` must come from this library and not be freed twice.
 */
void unpack_ledger_free(struct UnpackLedger *ledger);

/**
 * Signed credit per token position.
 *
 * # Safety
 * `ledger` must be live; `out` must hold `cap` doubles.
 */
enum UnpackStatus unpack_ledger_token_credit(const struct UnpackLedger *ledger,
                                             double *out,
                                             size_t cap,
                                             size_t *out_len);

/**
 * Total importance of the roots, or NaN for a null handle.
 *
 * # Safety
 * `ledger` must be live or null.
 */
double unpack_ledger_total(const struct UnpackLedger *ledger);

/**
 * Kept paths as JSON Lines; free with [`unpack_string_free`].
 *
 * # Safety
 * `ledger` must be live and `out` writable.
 */
enum UnpackStatus unpack_ledger_paths_json(const struct UnpackLedger *ledger, char **out);

/**
 * `sign(Σr) * max(|Σr|, beta * Σ|r|)` with `sign(0) = +1`; NaN on a null
 * pointer with nonzero length.
 *
 * # Safety
 * `values` must hold `n` doubles.
 */
double unpack_safe_denom(const double *values, size_t n, double beta);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNPACK_H */
