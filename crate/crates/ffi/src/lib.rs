//! C ABI for the reachkit control stack.
//!
//! This crate covers the deployment surface only: load trained artifacts,
//! run the reaching environment against the learned model or the synthetic
//! plant, and act through a policy or the sampling planner. Training,
//! hyperparameter search, and batch evaluation stay behind the `reachkit`
//! CLI.
//!
//! Conventions, which every function below assumes:
//!
//! - Fallible calls return `rk_status`; `RK_STATUS_OK` is zero. On failure
//!   `rk_last_error_message()` describes what went wrong; the message is
//!   thread-local and valid until the next library call on that thread.
//! - Handles (`rk_model`, `rk_policy`, `rk_env`, `rk_planner`) are opaque.
//!   Release each with its matching `_free` function; `_free` accepts NULL.
//!   Handles are not thread-safe; do not share one across threads without
//!   external locking.
//! - Joint vectors have length 4 (radians). Poses have length 7: position
//!   x,y,z in metres, then unit quaternion w,x,y,z. Actions have length 4
//!   with entries -1, 0, or +1.
//! - Where a function takes a config path, NULL selects the built-in desk
//!   preset, matching `configs/desk.toml`.
//! - Panics never unwind across the boundary; they surface as
//!   `RK_STATUS_PANIC`.

#![allow(non_camel_case_types)]
// Safety contract is documented once, above: valid pointers from this
// library, NUL-terminated strings, stated buffer lengths.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::Array2;
use reachkit::config::ToolkitConfig;
use reachkit::dynmodel::DynModel;
use reachkit::env::{make_episode_list, Env, EpisodeSpec, RewardConfig};
use reachkit::icem::Planner;
use reachkit::kinematics::Pose;
use reachkit::ppo::{discretize, Policy};
use reachkit::{Action, Error};

/// Result of a library call. Zero means success; anything else means the
/// call had no effect and `rk_last_error_message()` explains why.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum rk_status {
    /// Success.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// An argument or file was malformed (bad length, bad UTF-8, failed
    /// validation, unreadable artifact).
    InvalidArgument = 2,
    /// The operation itself failed (I/O error, numerics went non-finite).
    RuntimeError = 3,
    /// A panic was caught at the boundary. State may be inconsistent;
    /// free the handles involved and rebuild them.
    Panic = 4,
}

/// Transition backend for `rk_env_new`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum rk_backend {
    /// Learned dynamics model drives the episode.
    Model = 0,
    /// Synthetic plant drives the episode; the model only fills the
    /// observation windows.
    Plant = 1,
}

/// Loaded dynamics model. Cheap to share: environments and planners built
/// from it hold references, so the model may be freed once they exist.
pub struct rk_model {
    inner: Arc<DynModel>,
}

/// Loaded control policy.
pub struct rk_policy {
    inner: Policy,
}

/// One reaching episode: fixed target, timeout-terminated.
pub struct rk_env {
    inner: Env,
}

/// Sampling planner with cross-call state (shifted plan distribution and
/// elite carry-over). Reset it at every episode boundary.
pub struct rk_planner {
    inner: Planner,
}

type Failure = (rk_status, String);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg)
        .unwrap_or_else(|_| CString::new("error message contained a NUL byte").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn null_arg(name: &str) -> Failure {
    (rk_status::NullPointer, format!("{name} must not be NULL"))
}

fn invalid(msg: String) -> Failure {
    (rk_status::InvalidArgument, msg)
}

fn fail(e: Error) -> Failure {
    let status = match e {
        Error::Config(_) | Error::Format(_) => rk_status::InvalidArgument,
        _ => rk_status::RuntimeError,
    };
    (status, e.to_string())
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic in library call".to_string()
    }
}

/// Run `f` with the panic guard and the error-message protocol.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> rk_status {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => rk_status::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            set_error(panic_text(p));
            rk_status::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// NULL selects the desk preset; otherwise load and validate the TOML file.
unsafe fn config_arg(p: *const c_char) -> Result<ToolkitConfig, Failure> {
    if p.is_null() {
        Ok(ToolkitConfig::desk())
    } else {
        let path = path_arg(p, "config_path")?;
        ToolkitConfig::load(&path).map_err(fail)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null_arg(name))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null_arg(name))
}

unsafe fn joints_arg(p: *const f64, name: &str) -> Result<[f64; 4], Failure> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    let s = std::slice::from_raw_parts(p, 4);
    Ok([s[0], s[1], s[2], s[3]])
}

unsafe fn action_arg(p: *const i8, name: &str) -> Result<Action, Failure> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    let s = std::slice::from_raw_parts(p, 4);
    let mut a: Action = [0; 4];
    for (j, &v) in s.iter().enumerate() {
        if !(-1..=1).contains(&v) {
            return Err(invalid(format!("{name}[{j}] = {v}; entries must be -1, 0, or +1")));
        }
        a[j] = v;
    }
    Ok(a)
}

unsafe fn write_pose(out: *mut f64, pose: &Pose) {
    let o = std::slice::from_raw_parts_mut(out, 7);
    o[..3].copy_from_slice(&pose.p);
    let q = pose.r.quaternion();
    o[3] = q.w;
    o[4] = q.i;
    o[5] = q.j;
    o[6] = q.k;
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread, or an empty string
/// if the last call succeeded. Valid until the next library call on the
/// same thread; copy it if you need to keep it.
#[no_mangle]
pub extern "C" fn rk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => b"\0".as_ptr() as *const c_char,
    })
}

/// Load a trained dynamics model from `path` and store the handle in
/// `*out`.
#[no_mangle]
pub unsafe extern "C" fn rk_model_load(path: *const c_char, out: *mut *mut rk_model) -> rk_status {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let model = DynModel::load(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(rk_model { inner: Arc::new(model) }));
        Ok(())
    })
}

/// Release a model handle. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rk_model_free(model: *mut rk_model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Load a trained policy from `path` and store the handle in `*out`.
#[no_mangle]
pub unsafe extern "C" fn rk_policy_load(
    path: *const c_char,
    out: *mut *mut rk_policy,
) -> rk_status {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let policy = Policy::load(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(rk_policy { inner: policy }));
        Ok(())
    })
}

/// Release a policy handle. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rk_policy_free(policy: *mut rk_policy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Observation length the policy expects, written to `*out`.
#[no_mangle]
pub unsafe extern "C" fn rk_policy_obs_dim(
    policy: *const rk_policy,
    out: *mut usize,
) -> rk_status {
    guard(|| {
        let policy = ref_arg(policy, "policy")?;
        let out = mut_arg(out, "out")?;
        *out = policy.inner.obs_dim;
        Ok(())
    })
}

/// Deterministic action for one observation. `obs` has `obs_len` doubles,
/// which must match the policy's observation length; the chosen action is
/// written to `out_action[0..4]`.
#[no_mangle]
pub unsafe extern "C" fn rk_policy_act(
    policy: *const rk_policy,
    obs: *const f64,
    obs_len: usize,
    out_action: *mut i8,
) -> rk_status {
    guard(|| {
        let policy = ref_arg(policy, "policy")?;
        if obs.is_null() {
            return Err(null_arg("obs"));
        }
        if out_action.is_null() {
            return Err(null_arg("out_action"));
        }
        if obs_len != policy.inner.obs_dim {
            return Err(invalid(format!(
                "obs_len {obs_len} does not match policy obs_dim {}",
                policy.inner.obs_dim
            )));
        }
        let row = std::slice::from_raw_parts(obs, obs_len);
        let batch = Array2::from_shape_vec((1, obs_len), row.to_vec())
            .expect("shape matches by construction");
        let proto = policy.inner.act_deterministic(&batch);
        let a = discretize(proto.row(0).as_slice().expect("row is contiguous"));
        let o = std::slice::from_raw_parts_mut(out_action, 4);
        o.copy_from_slice(&a);
        Ok(())
    })
}

/// Create a reaching episode driven by `backend` (`rk_backend` values:
/// 0 = learned model, 1 = synthetic plant). The initial configuration and
/// target are sampled from `episode_seed` exactly like the first entry of
/// an evaluation episode list with that master seed, so a given
/// (config, seed) pair names the same episode everywhere. Use
/// `rk_env_set_episode` to override them. `config_path` NULL means the
/// desk preset. The handle is stored in `*out`.
#[no_mangle]
pub unsafe extern "C" fn rk_env_new(
    model: *const rk_model,
    config_path: *const c_char,
    backend: c_int,
    episode_seed: u64,
    out: *mut *mut rk_env,
) -> rk_status {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let out = mut_arg(out, "out")?;
        let cfg = config_arg(config_path)?;
        let list = make_episode_list(&cfg.chain, &cfg.workspace, episode_seed, 1).map_err(fail)?;
        let entry = &list.episodes[0];
        let episode = EpisodeSpec::new(entry.initial_q, entry.target_q);
        let env = match backend {
            0 => Env::new_model_backend(
                model.inner.clone(),
                cfg.chain.clone(),
                cfg.workspace.clone(),
                cfg.reward.clone(),
                episode,
            ),
            1 => Env::new_plant_backend(
                model.inner.clone(),
                &cfg.plant,
                entry.seed,
                cfg.chain.clone(),
                cfg.workspace.clone(),
                cfg.reward.clone(),
                episode,
            ),
            other => return Err(invalid(format!("backend {other} is not 0 (model) or 1 (plant)"))),
        }
        .map_err(fail)?;
        *out = Box::into_raw(Box::new(rk_env { inner: env }));
        Ok(())
    })
}

/// Release an environment handle. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rk_env_free(env: *mut rk_env) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Restart the environment on a caller-chosen episode: joint configuration
/// `initial_q[0..4]`, target configuration `target_q[0..4]`. Both must be
/// inside joint limits and the reachable workspace.
#[no_mangle]
pub unsafe extern "C" fn rk_env_set_episode(
    env: *mut rk_env,
    initial_q: *const f64,
    target_q: *const f64,
) -> rk_status {
    guard(|| {
        let env = mut_arg(env, "env")?;
        let initial_q = joints_arg(initial_q, "initial_q")?;
        let target_q = joints_arg(target_q, "target_q")?;
        env.inner.reset(EpisodeSpec::new(initial_q, target_q)).map_err(fail)
    })
}

/// Swap the target mid-episode without resetting the arm, as in
/// sequential-reaching evaluation. `target_q[0..4]` must be inside joint
/// limits and the reachable workspace.
#[no_mangle]
pub unsafe extern "C" fn rk_env_set_target(env: *mut rk_env, target_q: *const f64) -> rk_status {
    guard(|| {
        let env = mut_arg(env, "env")?;
        let target_q = joints_arg(target_q, "target_q")?;
        env.inner.set_target(target_q).map_err(fail)
    })
}

/// Observation length for this environment, written to `*out`.
#[no_mangle]
pub unsafe extern "C" fn rk_env_obs_dim(env: *const rk_env, out: *mut usize) -> rk_status {
    guard(|| {
        let env = ref_arg(env, "env")?;
        let out = mut_arg(out, "out")?;
        *out = env.inner.obs_dim();
        Ok(())
    })
}

/// Write the current observation into `out[0..len]`. `len` must equal the
/// value reported by `rk_env_obs_dim`.
#[no_mangle]
pub unsafe extern "C" fn rk_env_observe(
    env: *const rk_env,
    out: *mut f64,
    len: usize,
) -> rk_status {
    guard(|| {
        let env = ref_arg(env, "env")?;
        if out.is_null() {
            return Err(null_arg("out"));
        }
        let want = env.inner.obs_dim();
        if len != want {
            return Err(invalid(format!("len {len} does not match obs_dim {want}")));
        }
        env.inner.observe_into(std::slice::from_raw_parts_mut(out, len));
        Ok(())
    })
}

/// Advance one decision step with `action[0..4]` (entries -1/0/+1). The
/// summed reward for the step is written to `*out_reward` and the timeout
/// flag to `*out_done`. Stepping past the timeout is allowed and keeps
/// reporting `done = true`; call `rk_env_set_episode` for the next episode.
#[no_mangle]
pub unsafe extern "C" fn rk_env_step(
    env: *mut rk_env,
    action: *const i8,
    out_reward: *mut f64,
    out_done: *mut bool,
) -> rk_status {
    guard(|| {
        let env = mut_arg(env, "env")?;
        let action = action_arg(action, "action")?;
        let out_reward = mut_arg(out_reward, "out_reward")?;
        let out_done = mut_arg(out_done, "out_done")?;
        let step = env.inner.step(&action).map_err(fail)?;
        *out_reward = step.reward.total;
        *out_done = step.done;
        Ok(())
    })
}

/// Current joint configuration, written to `out[0..4]`.
#[no_mangle]
pub unsafe extern "C" fn rk_env_q(env: *const rk_env, out: *mut f64) -> rk_status {
    guard(|| {
        let env = ref_arg(env, "env")?;
        if out.is_null() {
            return Err(null_arg("out"));
        }
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&env.inner.q());
        Ok(())
    })
}

/// Target joint configuration, written to `out[0..4]`.
#[no_mangle]
pub unsafe extern "C" fn rk_env_target_q(env: *const rk_env, out: *mut f64) -> rk_status {
    guard(|| {
        let env = ref_arg(env, "env")?;
        if out.is_null() {
            return Err(null_arg("out"));
        }
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&env.inner.episode.target_q);
        Ok(())
    })
}

/// Current tool pose, written to `out[0..7]` as x,y,z,qw,qx,qy,qz.
#[no_mangle]
pub unsafe extern "C" fn rk_env_pose(env: *const rk_env, out: *mut f64) -> rk_status {
    guard(|| {
        let env = ref_arg(env, "env")?;
        if out.is_null() {
            return Err(null_arg("out"));
        }
        write_pose(out, &env.inner.pose());
        Ok(())
    })
}

/// Target tool pose, written to `out[0..7]` as x,y,z,qw,qx,qy,qz.
#[no_mangle]
pub unsafe extern "C" fn rk_env_target_pose(env: *const rk_env, out: *mut f64) -> rk_status {
    guard(|| {
        let env = ref_arg(env, "env")?;
        if out.is_null() {
            return Err(null_arg("out"));
        }
        write_pose(out, &env.inner.target_pose());
        Ok(())
    })
}

/// Decision steps taken in the current episode, written to `*out`.
#[no_mangle]
pub unsafe extern "C" fn rk_env_steps(env: *const rk_env, out: *mut usize) -> rk_status {
    guard(|| {
        let env = ref_arg(env, "env")?;
        let out = mut_arg(out, "out")?;
        *out = env.inner.t;
        Ok(())
    })
}

/// Create a sampling planner over `model`. Uses the planner reward (joint
///-space terms only) and the planner section of the config; `config_path`
/// NULL means the desk preset. `seed` fixes the sampling stream, so equal
/// (model, config, seed, call sequence) gives equal plans. The handle is
/// stored in `*out`.
#[no_mangle]
pub unsafe extern "C" fn rk_planner_new(
    model: *const rk_model,
    config_path: *const c_char,
    seed: u64,
    out: *mut *mut rk_planner,
) -> rk_status {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let out = mut_arg(out, "out")?;
        let cfg = config_arg(config_path)?;
        let rcfg = RewardConfig { use_pose: false, use_bonus: false, ..cfg.reward };
        let planner = Planner::new(
            model.inner.clone(),
            cfg.chain.clone(),
            cfg.workspace.clone(),
            rcfg,
            cfg.icem.clone(),
            seed,
        )
        .map_err(fail)?;
        *out = Box::into_raw(Box::new(rk_planner { inner: planner }));
        Ok(())
    })
}

/// Release a planner handle. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rk_planner_free(planner: *mut rk_planner) {
    if !planner.is_null() {
        drop(Box::from_raw(planner));
    }
}

/// Drop the planner's carried distribution and elites. Call at every
/// episode boundary (after `rk_env_set_episode`).
#[no_mangle]
pub unsafe extern "C" fn rk_planner_reset(planner: *mut rk_planner) -> rk_status {
    guard(|| {
        let planner = mut_arg(planner, "planner")?;
        planner.inner.reset();
        Ok(())
    })
}

/// Plan from the environment's current state and write the first action of
/// the best plan to `out_action[0..4]`. The environment must wrap the same
/// dynamics model and config the planner was built with. Does not step the
/// environment; pass the action to `rk_env_step` to execute it.
#[no_mangle]
pub unsafe extern "C" fn rk_planner_plan(
    planner: *mut rk_planner,
    env: *const rk_env,
    out_action: *mut i8,
) -> rk_status {
    guard(|| {
        let planner = mut_arg(planner, "planner")?;
        let env = ref_arg(env, "env")?;
        if out_action.is_null() {
            return Err(null_arg("out_action"));
        }
        let (action, _diag) = planner
            .inner
            .plan(env.inner.window(), env.inner.prev_action(), &env.inner.episode.target_q)
            .map_err(fail)?;
        std::slice::from_raw_parts_mut(out_action, 4).copy_from_slice(&action);
        Ok(())
    })
}
