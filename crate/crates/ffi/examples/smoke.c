/* Minimal embedding example: load a trained dynamics model, run a few
 * steps of the reaching environment, and ask the sampling planner for an
 * action. Compile against include/reachkit.h and link libreachkit_ffi.
 *
 * Usage: smoke <model.bin>
 *
 * Exits 0 on success, 1 with a message on the first failed call. Also
 * doubles as the ABI smoke test run by the test suite.
 */

#include "reachkit.h"

#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#define CHECK(expr)                                                           \
    do {                                                                      \
        if (!(expr)) {                                                        \
            fprintf(stderr, "FAIL %s:%d: %s\n  last error: %s\n", __FILE__,   \
                    __LINE__, #expr, rk_last_error_message());                \
            return 1;                                                         \
        }                                                                     \
    } while (0)

int main(int argc, char **argv)
{
    CHECK(rk_version() != NULL && strlen(rk_version()) > 0);
    CHECK(strlen(rk_last_error_message()) == 0);

    /* Failures report a status and a message, and never touch `out`. */
    rk_model *model = NULL;
    CHECK(rk_model_load("/no/such/model.bin", &model) != RK_STATUS_OK);
    CHECK(model == NULL);
    CHECK(strlen(rk_last_error_message()) > 0);
    CHECK(rk_model_load(NULL, &model) == RK_STATUS_NULL_POINTER);

    /* Every _free accepts NULL. */
    rk_model_free(NULL);
    rk_policy_free(NULL);
    rk_env_free(NULL);
    rk_planner_free(NULL);

    if (argc < 2) {
        printf("ok (no model given; skipped the live run)\n");
        return 0;
    }

    CHECK(rk_model_load(argv[1], &model) == RK_STATUS_OK);

    /* NULL config selects the built-in desk preset. Episode 42 is the same
     * episode every caller with this seed gets. */
    rk_env *env = NULL;
    CHECK(rk_env_new(model, NULL, RK_BACKEND_MODEL, 42, &env) == RK_STATUS_OK);

    size_t dim = 0;
    CHECK(rk_env_obs_dim(env, &dim) == RK_STATUS_OK && dim > 0);
    double *obs = malloc(dim * sizeof(double));
    CHECK(obs != NULL);
    CHECK(rk_env_observe(env, obs, dim) == RK_STATUS_OK);

    double q[4], pose[7];
    CHECK(rk_env_q(env, q) == RK_STATUS_OK);
    CHECK(rk_env_pose(env, pose) == RK_STATUS_OK);

    /* Constant command for a handful of decision steps. */
    const int8_t hold[4] = {1, 0, -1, 0};
    double reward = 0.0;
    bool done = false;
    for (int t = 0; t < 10; t++) {
        CHECK(rk_env_step(env, hold, &reward, &done) == RK_STATUS_OK);
        CHECK(!done);
    }

    /* Out-of-range commands are rejected before anything moves. */
    const int8_t bad[4] = {2, 0, 0, 0};
    CHECK(rk_env_step(env, bad, &reward, &done) == RK_STATUS_INVALID_ARGUMENT);

    /* Plan from the current state, then execute the suggestion. */
    rk_planner *planner = NULL;
    CHECK(rk_planner_new(model, NULL, 7, &planner) == RK_STATUS_OK);
    int8_t action[4];
    CHECK(rk_planner_plan(planner, env, action) == RK_STATUS_OK);
    for (int j = 0; j < 4; j++)
        CHECK(action[j] >= -1 && action[j] <= 1);
    CHECK(rk_env_step(env, action, &reward, &done) == RK_STATUS_OK);

    rk_planner_free(planner);
    rk_env_free(env);
    rk_model_free(model);
    free(obs);

    printf("ok\n");
    return 0;
}
