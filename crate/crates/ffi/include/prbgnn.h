#ifndef PRBGNN_H
#define PRBGNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum PrbStatus {
  PrbStatus_Ok = 0,
  PrbStatus_NullArgument = 1,
  /**
   * Bad config JSON, unreadable or mismatched policy file.
   */
  PrbStatus_Config = 2,
  PrbStatus_Numeric = 3,
  /**
   * Call out of order, e.g. stepping a finished episode or an invalid action.
   */
  PrbStatus_Contract = 4,
  PrbStatus_Panic = 5,
} PrbStatus;

/**
 * An environment plus the observation window the policies consume.
 */
typedef struct PrbEnv PrbEnv;

/**
 * A loaded policy.
 */
typedef struct PrbPolicy PrbPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *prb_last_error(void);

/**
 * Loads a policy file written by `prbgnn train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PrbStatus prb_policy_load(const char *path, struct PrbPolicy **out);

/**
 * Number of actions of a loaded policy, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or a live handle.
 */
size_t prb_policy_num_actions(const struct PrbPolicy *policy);

/**
 * # Safety
 * `policy` must be null or a handle from [`prb_policy_load`], freed once.
 */
void prb_policy_free(struct PrbPolicy *policy);

/**
 * Creates an environment from a run-config JSON document (null for the
 * defaults) and resets it to episode 0.
 *
 * # Safety
 * `config_json` must be null or NUL-terminated; `out` must be writable.
 */
enum PrbStatus prb_env_new(const char *config_json, uint64_t seed, struct PrbEnv **out);

/**
 * Starts episode `episode` of the handle's seed.
 *
 * # Safety
 * `env` must be a live handle.
 */
enum PrbStatus prb_env_reset(struct PrbEnv *env, uint64_t episode);

/**
 * PRBs the UE needs at the current step.
 *
 * # Safety
 * `env` must be a live handle and `required` writable.
 */
enum PrbStatus prb_env_required(const struct PrbEnv *env, uint32_t *required);

/**
 * Applies `action`. Any of the output pointers may be null.
 *
 * # Safety
 * `env` must be a live handle; non-null outputs must be writable.
 */
enum PrbStatus prb_env_step(struct PrbEnv *env,
                            size_t action,
                            double *reward,
                            int64_t *gap,
                            bool *done);

/**
 * Greedy action of `policy` for the environment's current state window.
 *
 * # Safety
 * Both handles must be live and `action` writable.
 */
enum PrbStatus prb_select_action(struct PrbEnv *env,
                                 const struct PrbPolicy *policy,
                                 size_t *action);

/**
 * # Safety
 * `env` must be null or a handle from [`prb_env_new`], freed once.
 */
void prb_env_free(struct PrbEnv *env);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRBGNN_H */
