#ifndef PREFLAB_H
#define PREFLAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PreflabStatus {
  PREFLAB_STATUS_OK = 0,
  PREFLAB_STATUS_NULL_POINTER = 1,
  PREFLAB_STATUS_INVALID_INPUT = 2,
  PREFLAB_STATUS_SHAPE_MISMATCH = 3,
  PREFLAB_STATUS_SUPPORT_VIOLATION = 4,
  PREFLAB_STATUS_DIVERGED = 5,
  PREFLAB_STATUS_CONSTRUCTION = 6,
  PREFLAB_STATUS_IO = 7,
  PREFLAB_STATUS_SERIALIZATION = 8,
  PREFLAB_STATUS_PANIC = 9,
} PreflabStatus;

/**
 * Conditional distribution with rows on the simplex.
 */
typedef struct PreflabConditional PreflabConditional;

/**
 * Weighted preference pairs.
 */
typedef struct PreflabPairSet PreflabPairSet;

/**
 * Softmax policy over logits.
 */
typedef struct PreflabPolicy PreflabPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failure on the same thread.
 */
const char *preflab_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *preflab_version(void);

/**
 * # Safety
 * `logits` must point to `prompts * responses` doubles.
 */
enum PreflabStatus preflab_policy_new(const double *logits,
                                      size_t prompts,
                                      size_t responses,
                                      struct PreflabPolicy **out);

/**
 * Policy whose softmax equals `conditional`.
 *
 * # Safety
 * Pointers must be valid handles or null.
 */
enum PreflabStatus preflab_policy_from_conditional(const struct PreflabConditional *conditional,
                                                   struct PreflabPolicy **out);

/**
 * # Safety
 * `policy` must be a valid handle; the output pointers may be null.
 */
enum PreflabStatus preflab_policy_shape(const struct PreflabPolicy *policy,
                                        size_t *prompts,
                                        size_t *responses);

/**
 * # Safety
 * `out` must hold `len` doubles.
 */
enum PreflabStatus preflab_policy_logits(const struct PreflabPolicy *policy,
                                         double *out,
                                         size_t len);

/**
 * # Safety
 * `out` must hold `len` doubles.
 */
enum PreflabStatus preflab_policy_probs(const struct PreflabPolicy *policy,
                                        double *out,
                                        size_t len);

/**
 * # Safety
 * `policy` must come from this library and not be used afterwards.
 */
void preflab_policy_free(struct PreflabPolicy *policy);

/**
 * Rows must be non-negative and sum to one.
 *
 * # Safety
 * `probs` must point to `prompts * responses` doubles.
 */
enum PreflabStatus preflab_conditional_new(const double *probs,
                                           size_t prompts,
                                           size_t responses,
                                           struct PreflabConditional **out);

/**
 * # Safety
 * `out` must hold `len` doubles.
 */
enum PreflabStatus preflab_conditional_probs(const struct PreflabConditional *conditional,
                                             double *out,
                                             size_t len);

/**
 * # Safety
 * `conditional` must come from this library and not be used afterwards.
 */
void preflab_conditional_free(struct PreflabConditional *conditional);

/**
 * Pair set from `count` weighted `(prompt, chosen, rejected)` entries.
 * Entries with `chosen == rejected` are dropped and the weights are
 * renormalized.
 *
 * # Safety
 * The four arrays must each hold `count` elements.
 */
enum PreflabStatus preflab_pairs_new(size_t prompts,
                                     size_t responses,
                                     const size_t *prompt,
                                     const size_t *chosen,
                                     const size_t *rejected,
                                     const double *mass,
                                     size_t count,
                                     struct PreflabPairSet **out);

/**
 * Number of stored pairs, or 0 for a null handle.
 *
 * # Safety
 * `pairs` must be a valid handle or null.
 */
size_t preflab_pairs_len(const struct PreflabPairSet *pairs);

/**
 * # Safety
 * `pairs` must come from this library and not be used afterwards.
 */
void preflab_pairs_free(struct PreflabPairSet *pairs);

/**
 * # Safety
 * Handles must be valid; `out` must point to one double.
 */
enum PreflabStatus preflab_dpo_loss(const struct PreflabPolicy *policy,
                                    const struct PreflabConditional *reference,
                                    const struct PreflabPairSet *pairs,
                                    double beta_value,
                                    double *out);

/**
 * Gradient of the DPO loss in the logits.
 *
 * # Safety
 * Handles must be valid; `out` must hold `len` doubles.
 */
enum PreflabStatus preflab_dpo_gradient(const struct PreflabPolicy *policy,
                                        const struct PreflabConditional *reference,
                                        const struct PreflabPairSet *pairs,
                                        double beta_value,
                                        double *out,
                                        size_t len);

/**
 * Minimizer of the DPO loss on independent chosen × rejected pairs.
 *
 * # Safety
 * Handles must be valid.
 */
enum PreflabStatus preflab_dpo_closed_form(const struct PreflabConditional *reference,
                                           const struct PreflabConditional *chosen,
                                           const struct PreflabConditional *rejected,
                                           double beta_value,
                                           struct PreflabConditional **out);

/**
 * Reference tilted by `exp(reward/β)`.
 *
 * # Safety
 * `reward` must hold as many doubles as the reference table.
 */
enum PreflabStatus preflab_rlhf_closed_form(const double *reward,
                                            const struct PreflabConditional *reference,
                                            double beta_value,
                                            struct PreflabConditional **out);

/**
 * Plain gradient descent on the DPO loss from `policy`, stopping early
 * once the largest gradient entry drops to 1e-10.
 *
 * # Safety
 * Handles must be valid.
 */
enum PreflabStatus preflab_train_dpo(const struct PreflabPolicy *policy,
                                     const struct PreflabConditional *reference,
                                     const struct PreflabPairSet *pairs,
                                     double learning_rate,
                                     size_t steps,
                                     double beta_value,
                                     struct PreflabPolicy **out);

/**
 * Runs a named verification check and returns its report as JSON. Free
 * the string with [`preflab_string_free`].
 *
 * # Safety
 * `check` must be a NUL-terminated string.
 */
enum PreflabStatus preflab_verify(const char *check, uint64_t seed, char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void preflab_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREFLAB_H */
