/* C ABI for the reachkit control library. Generated by cbindgen; do not edit. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a library call. Zero means success; anything else means the
// call had no effect and `rk_last_error_message()` explains why.
typedef enum rk_status {
  // Success.
  RK_STATUS_OK = 0,
  // A required pointer argument was NULL.
  RK_STATUS_NULL_POINTER = 1,
  // An argument or file was malformed (bad length, bad UTF-8, failed
  // validation, unreadable artifact).
  RK_STATUS_INVALID_ARGUMENT = 2,
  // The operation itself failed (I/O error, numerics went non-finite).
  RK_STATUS_RUNTIME_ERROR = 3,
  // A panic was caught at the boundary. State may be inconsistent;
  // free the handles involved and rebuild them.
  RK_STATUS_PANIC = 4,
} rk_status;

// Transition backend for `rk_env_new`.
typedef enum rk_backend {
  // Learned dynamics model drives the episode.
  RK_BACKEND_MODEL = 0,
  // Synthetic plant drives the episode; the model only fills the
  // observation windows.
  RK_BACKEND_PLANT = 1,
} rk_backend;

// One reaching episode: fixed target, timeout-terminated.
typedef struct rk_env rk_env;

// Loaded dynamics model. Cheap to share: environments and planners built
// from it hold references, so the model may be freed once they exist.
typedef struct rk_model rk_model;

// Sampling planner with cross-call state (shifted plan distribution and
// elite carry-over). Reset it at every episode boundary.
typedef struct rk_planner rk_planner;

// Loaded control policy.
typedef struct rk_policy rk_policy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rk_version(void);

// Message for the most recent failure on this thread, or an empty string
// if the last call succeeded. Valid until the next library call on the
// same thread; copy it if you need to keep it.
const char *rk_last_error_message(void);

// Load a trained dynamics model from `path` and store the handle in
// `*out`.
enum rk_status rk_model_load(const char *path, struct rk_model **out);

// Release a model handle. NULL is a no-op.
void rk_model_free(struct rk_model *model);

// Load a trained policy from `path` and store the handle in `*out`.
enum rk_status rk_policy_load(const char *path, struct rk_policy **out);

// Release a policy handle. NULL is a no-op.
void rk_policy_free(struct rk_policy *policy);

// Observation length the policy expects, written to `*out`.
enum rk_status rk_policy_obs_dim(const struct rk_policy *policy, size_t *out);

// Deterministic action for one observation. `obs` has `obs_len` doubles,
// which must match the policy's observation length; the chosen action is
// written to `out_action[0..4]`.
enum rk_status rk_policy_act(const struct rk_policy *policy,
                             const double *obs,
                             size_t obs_len,
                             int8_t *out_action);

// Create a reaching episode driven by `backend` (`rk_backend` values:
// 0 = learned model, 1 = synthetic plant). The initial configuration and
// target are sampled from `episode_seed` exactly like the first entry of
// an evaluation episode list with that master seed, so a given
// (config, seed) pair names the same episode everywhere. Use
// `rk_env_set_episode` to override them. `config_path` NULL means the
// desk preset. The handle is stored in `*out`.
enum rk_status rk_env_new(const struct rk_model *model,
                          const char *config_path,
                          int backend,
                          uint64_t episode_seed,
                          struct rk_env **out);

// Release an environment handle. NULL is a no-op.
void rk_env_free(struct rk_env *env);

// Restart the environment on a caller-chosen episode: joint configuration
// `initial_q[0..4]`, target configuration `target_q[0..4]`. Both must be
// inside joint limits and the reachable workspace.
enum rk_status rk_env_set_episode(struct rk_env *env,
                                  const double *initial_q,
                                  const double *target_q);

// Swap the target mid-episode without resetting the arm, as in
// sequential-reaching evaluation. `target_q[0..4]` must be inside joint
// limits and the reachable workspace.
enum rk_status rk_env_set_target(struct rk_env *env, const double *target_q);

// Observation length for this environment, written to `*out`.
enum rk_status rk_env_obs_dim(const struct rk_env *env, size_t *out);

// Write the current observation into `out[0..len]`. `len` must equal the
// value reported by `rk_env_obs_dim`.
enum rk_status rk_env_observe(const struct rk_env *env, double *out, size_t len);

// Advance one decision step with `action[0..4]` (entries -1/0/+1). The
// summed reward for the step is written to `*out_reward` and the timeout
// flag to `*out_done`. Stepping past the timeout is allowed and keeps
// reporting `done = true`; call `rk_env_set_episode` for the next episode.
enum rk_status rk_env_step(struct rk_env *env,
                           const int8_t *action,
                           double *out_reward,
                           bool *out_done);

// Current joint configuration, written to `out[0..4]`.
enum rk_status rk_env_q(const struct rk_env *env, double *out);

// Target joint configuration, written to `out[0..4]`.
enum rk_status rk_env_target_q(const struct rk_env *env, double *out);

// Current tool pose, written to `out[0..7]` as x,y,z,qw,qx,qy,qz.
enum rk_status rk_env_pose(const struct rk_env *env, double *out);

// Target tool pose, written to `out[0..7]` as x,y,z,qw,qx,qy,qz.
enum rk_status rk_env_target_pose(const struct rk_env *env, double *out);

// Decision steps taken in the current episode, written to `*out`.
enum rk_status rk_env_steps(const struct rk_env *env, size_t *out);

// Create a sampling planner over `model`. Uses the planner reward (joint
//-space terms only) and the planner section of the config; `config_path`
// NULL means the desk preset. `seed` fixes the sampling stream, so equal
// (model, config, seed, call sequence) gives equal plans. The handle is
// stored in `*out`.
enum rk_status rk_planner_new(const struct rk_model *model,
                              const char *config_path,
                              uint64_t seed,
                              struct rk_planner **out);

// Release a planner handle. NULL is a no-op.
void rk_planner_free(struct rk_planner *planner);

// Drop the planner's carried distribution and elites. Call at every
// episode boundary (after `rk_env_set_episode`).
enum rk_status rk_planner_reset(struct rk_planner *planner);

// Plan from the environment's current state and write the first action of
// the best plan to `out_action[0..4]`. The environment must wrap the same
// dynamics model and config the planner was built with. Does not step the
// environment; pass the action to `rk_env_step` to execute it.
enum rk_status rk_planner_plan(struct rk_planner *planner,
                               const struct rk_env *env,
                               int8_t *out_action);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
