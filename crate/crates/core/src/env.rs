//! The reaching task: observation assembly, reward shaping, episodic
//! conditions, and stepping against either the learned dynamics (policy
//! synthesis) or the synthetic plant (transfer evaluation).
//!
//! Episodes never terminate early: a fixed number of decision steps runs
//! out, the success checks are bookkeeping only. Each decision step applies
//! the chosen command for `action_repeat` consecutive control ticks.

use crate::dynmodel::{BatchWindow, DynModel, ModelWindow};
use crate::kinematics::{
    euclidean_distance, forward_kinematics, geodesic_distance, in_target_subset, in_workspace,
    sample_config, wrap_angle, yaw_pitch, KinematicChain, Pose, Subset, Workspace, YawPitch,
};
use crate::observer::{state_dim, LoopTracker};
use crate::plant::{Plant, PlantParams};
use crate::{Action, Error, Joints, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Reward weights, thresholds, and per-term switches. Defaults are the
/// shipped task constants; the switches exist for ablations and for the
/// planner variant that drops the bonus and pose-distance terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub lambda_q: f64,
    pub lambda_a: f64,
    pub lambda_w: f64,
    /// Coarse and fine pose-bonus thresholds (position m, rotation
    /// normalized-geodesic).
    pub eps_p: f64,
    pub eps_r: f64,
    pub eps_p_fine: f64,
    pub eps_r_fine: f64,
    /// Angle bonus threshold, applied to squared yaw/pitch errors (rad^2).
    pub eps_alpha: f64,
    /// Config bonus threshold, applied to squared per-joint errors (rad^2).
    pub eps_q: f64,
    pub w_pose: f64,
    pub w_alpha: f64,
    pub w_config: f64,
    pub use_pose: bool,
    pub use_config: bool,
    pub use_bonus: bool,
    pub use_action: bool,
    pub use_workspace: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_p: 1.0,
            lambda_r: 1.0,
            lambda_q: 1.0,
            lambda_a: 0.5,
            lambda_w: 2.0,
            eps_p: 0.1,
            eps_r: 0.1,
            eps_p_fine: 0.05,
            eps_r_fine: 0.02,
            eps_alpha: 0.0001,
            eps_q: 0.0025,
            w_pose: 0.5,
            w_alpha: 1.0,
            w_config: 1.0,
            use_pose: true,
            use_config: true,
            use_bonus: true,
            use_action: true,
            use_workspace: true,
        }
    }
}

impl RewardConfig {
    /// The planner default: distance-to-pose and bonus terms off.
    pub fn planner_default() -> RewardConfig {
        RewardConfig { use_pose: false, use_bonus: false, ..RewardConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_p,
            self.lambda_r,
            self.lambda_q,
            self.lambda_a,
            self.lambda_w,
            self.w_pose,
            self.w_alpha,
            self.w_config,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("reward: weights must be >= 0".into()));
        }
        let thresholds =
            [self.eps_p, self.eps_r, self.eps_p_fine, self.eps_r_fine, self.eps_alpha, self.eps_q];
        if thresholds.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("reward: thresholds must be > 0".into()));
        }
        Ok(())
    }

    /// Largest attainable reward under this config (all bonuses earned,
    /// zero distances, no action change, inside the region).
    pub fn upper_bound(&self) -> f64 {
        if self.use_bonus {
            self.w_pose * 2.0 + self.w_alpha + self.w_config
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    /// -lambda_p * position distance - lambda_r * rotation distance.
    pub pose: f64,
    /// -lambda_q * joint-space distance.
    pub config: f64,
    /// Accuracy bonuses (coarse+fine pose, angles, config).
    pub bonus: f64,
    /// Action-change penalty.
    pub action: f64,
    /// Workspace-breach penalty.
    pub workspace: f64,
    pub total: f64,
}

fn iverson(p: bool) -> f64 {
    if p {
        1.0
    } else {
        0.0
    }
}

/// The per-step reward. Pitch/yaw errors wrap; the workspace test covers the
/// full region (position sector and pitch bound).
#[allow(clippy::too_many_arguments)]
pub fn reward(
    cfg: &RewardConfig,
    ws: &Workspace,
    q: &Joints,
    pose: &Pose,
    target_q: &Joints,
    target_pose: &Pose,
    target_yp: &YawPitch,
    a_t: &Action,
    a_prev: &Action,
) -> RewardTerms {
    let d = euclidean_distance(&target_pose.p, &pose.p);
    let dg = geodesic_distance(&target_pose.r, &pose.r);

    let mut terms = RewardTerms::default();
    if cfg.use_pose {
        terms.pose = -cfg.lambda_p * d - cfg.lambda_r * dg;
    }
    if cfg.use_config {
        let mut sq = 0.0;
        for j in 0..4 {
            let e = q[j] - target_q[j];
            sq += e * e;
        }
        terms.config = -cfg.lambda_q * sq.sqrt();
    }
    if cfg.use_bonus {
        let b_pose_coarse = iverson(d < cfg.eps_p) * iverson(dg < cfg.eps_r);
        let b_pose_fine = iverson(d < cfg.eps_p_fine) * iverson(dg < cfg.eps_r_fine);
        let yp = yaw_pitch(pose);
        let e_yaw = wrap_angle(yp.yaw - target_yp.yaw);
        let e_pitch = wrap_angle(yp.pitch - target_yp.pitch);
        let b_angle =
            iverson(e_yaw * e_yaw < cfg.eps_alpha) * iverson(e_pitch * e_pitch < cfg.eps_alpha);
        let mut b_config = 1.0;
        for j in 0..4 {
            let e = q[j] - target_q[j];
            b_config *= iverson(e * e < cfg.eps_q);
        }
        terms.bonus = cfg.w_pose * (b_pose_coarse + b_pose_fine)
            + cfg.w_alpha * b_angle
            + cfg.w_config * b_config;
    }
    if cfg.use_action {
        let mut change = 0.0;
        for j in 0..4 {
            change += (a_t[j] as f64 - a_prev[j] as f64).abs();
        }
        terms.action = -cfg.lambda_a * change / 4.0;
    }
    if cfg.use_workspace {
        terms.workspace = -cfg.lambda_w * iverson(!in_workspace(ws, pose));
    }
    terms.total = terms.pose + terms.config + terms.bonus + terms.action + terms.workspace;
    terms
}

/// One episode's conditions. The target pose is always the forward
/// kinematics of `target_q`, so the joint-space reward terms are
/// well-defined without inverse kinematics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub initial_q: Joints,
    pub target_q: Joints,
    pub t_reset: usize,
    pub action_repeat: usize,
}

pub const T_RESET: usize = 500;
pub const ACTION_REPEAT: usize = 4;

impl EpisodeSpec {
    pub fn new(initial_q: Joints, target_q: Joints) -> EpisodeSpec {
        EpisodeSpec { initial_q, target_q, t_reset: T_RESET, action_repeat: ACTION_REPEAT }
    }

    pub fn target_pose(&self, chain: &KinematicChain) -> Pose {
        forward_kinematics(chain, &self.target_q)
    }

    pub fn validate(&self, chain: &KinematicChain, ws: &Workspace) -> Result<()> {
        if self.t_reset == 0 || self.action_repeat == 0 {
            return Err(Error::Config("episode: t_reset and action_repeat must be >= 1".into()));
        }
        chain.validate()?;
        let initial_pose = forward_kinematics(chain, &self.initial_q);
        if !in_workspace(ws, &initial_pose) {
            return Err(Error::Config("episode: initial pose outside the restricted region".into()));
        }
        let target_pose = forward_kinematics(chain, &self.target_q);
        if !in_target_subset(ws, &target_pose) {
            return Err(Error::Config("episode: target pose outside the target subset".into()));
        }
        Ok(())
    }
}

/// Initial config from the full region, target from the target subset.
pub fn sample_episode(
    chain: &KinematicChain,
    ws: &Workspace,
    rng: &mut impl Rng,
) -> Result<EpisodeSpec> {
    let initial_q = sample_config(ws, chain, rng, Subset::Full)?;
    let target_q = sample_config(ws, chain, rng, Subset::Target)?;
    Ok(EpisodeSpec::new(initial_q, target_q))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeEntry {
    /// Per-episode seed (plant noise stream during transfer evaluation).
    pub seed: u64,
    pub initial_q: Joints,
    pub target_q: Joints,
}

/// The shared evaluation set: all controllers and backends face the same
/// episodes, reproducible from the master seed alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeList {
    pub master_seed: u64,
    pub episodes: Vec<EpisodeEntry>,
}

pub fn make_episode_list(
    chain: &KinematicChain,
    ws: &Workspace,
    master_seed: u64,
    n: usize,
) -> Result<EpisodeList> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut episodes = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = rng.random::<u64>();
        let ep = sample_episode(chain, ws, &mut rng)?;
        episodes.push(EpisodeEntry { seed, initial_q: ep.initial_q, target_q: ep.target_q });
    }
    Ok(EpisodeList { master_seed, episodes })
}

impl EpisodeList {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("episode list encode: {e}")))?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EpisodeList> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(|e| Error::Format(format!("episode list decode: {e}")))
    }
}

/// Observation layout: model input, current pose (p, quaternion wxyz),
/// current normalized config, target pose, target normalized config.
pub fn obs_dim(k: usize) -> usize {
    state_dim(k) + 22
}

fn write_pose(out: &mut [f64], pose: &Pose) {
    out[0] = pose.p[0];
    out[1] = pose.p[1];
    out[2] = pose.p[2];
    out[3] = pose.r.w;
    out[4] = pose.r.i;
    out[5] = pose.r.j;
    out[6] = pose.r.k;
}

enum Backend {
    /// Transitions come from the model's own predictions; the lag windows
    /// are fed those predictions, never ground truth.
    Model,
    /// Transitions come from the synthetic plant; the lag windows are fed
    /// plant measurements and tracking-observer velocity estimates.
    Plant { plant: Plant, tracker: LoopTracker, rng: ChaCha8Rng },
}

pub struct Env {
    pub model: Arc<DynModel>,
    pub chain: KinematicChain,
    pub ws: Workspace,
    pub rcfg: RewardConfig,
    pub episode: EpisodeSpec,
    target_pose: Pose,
    target_yp: YawPitch,
    win: ModelWindow,
    backend: Backend,
    prev_action: Action,
    /// Decision steps taken this episode.
    pub t: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Tick {
    pub q: Joints,
    pub pose: Pose,
    pub inside: bool,
}

#[derive(Clone, Debug)]
pub struct StepOut {
    pub reward: RewardTerms,
    /// One entry per control tick (action_repeat of them).
    pub ticks: Vec<Tick>,
    pub done: bool,
}

impl Env {
    pub fn new_model_backend(
        model: Arc<DynModel>,
        chain: KinematicChain,
        ws: Workspace,
        rcfg: RewardConfig,
        episode: EpisodeSpec,
    ) -> Result<Env> {
        rcfg.validate()?;
        episode.validate(&chain, &ws)?;
        let target_pose = episode.target_pose(&chain);
        let target_yp = yaw_pitch(&target_pose);
        let win = ModelWindow::at_rest(&model, &episode.initial_q);
        Ok(Env {
            model,
            chain,
            ws,
            rcfg,
            episode,
            target_pose,
            target_yp,
            win,
            backend: Backend::Model,
            prev_action: [0; 4],
            t: 0,
        })
    }

    pub fn new_plant_backend(
        model: Arc<DynModel>,
        params: &PlantParams,
        seed: u64,
        chain: KinematicChain,
        ws: Workspace,
        rcfg: RewardConfig,
        episode: EpisodeSpec,
    ) -> Result<Env> {
        rcfg.validate()?;
        episode.validate(&chain, &ws)?;
        if (params.dt - model.spec.dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "plant dt {} does not match model dt {}",
                params.dt, model.spec.dt
            )));
        }
        let plant = Plant::new(params.clone(), chain.clone(), episode.initial_q)?;
        let target_pose = episode.target_pose(&chain);
        let target_yp = yaw_pitch(&target_pose);
        let win = ModelWindow::at_rest(&model, &episode.initial_q);
        Ok(Env {
            model,
            chain,
            ws,
            rcfg,
            episode,
            target_pose,
            target_yp,
            win,
            backend: Backend::Plant {
                plant,
                tracker: LoopTracker::default(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            prev_action: [0; 4],
            t: 0,
        })
    }

    /// Begin a new episode in place; windows restart at rest at the new
    /// initial config, the plant (if any) keeps its noise stream.
    pub fn reset(&mut self, episode: EpisodeSpec) -> Result<()> {
        episode.validate(&self.chain, &self.ws)?;
        self.target_pose = episode.target_pose(&self.chain);
        self.target_yp = yaw_pitch(&self.target_pose);
        self.win = ModelWindow::at_rest(&self.model, &episode.initial_q);
        if let Backend::Plant { plant, tracker, .. } = &mut self.backend {
            plant.reset(episode.initial_q);
            tracker.reset();
        }
        self.episode = episode;
        self.prev_action = [0; 4];
        self.t = 0;
        Ok(())
    }

    /// Swap the reaching target without disturbing the arm, window, or
    /// plant state (sequential-targets protocol). The step counter
    /// restarts and the episode's recorded initial config becomes the
    /// current one; the previous action carries over, so the action
    /// penalty stays continuous across the switch.
    pub fn set_target(&mut self, target_q: Joints) -> Result<()> {
        let pose = forward_kinematics(&self.chain, &target_q);
        if !in_target_subset(&self.ws, &pose) {
            return Err(Error::Config(
                "set_target: target pose outside the target subset".into(),
            ));
        }
        self.episode.initial_q = self.win.q;
        self.episode.target_q = target_q;
        self.target_pose = pose;
        self.target_yp = yaw_pitch(&pose);
        self.t = 0;
        Ok(())
    }

    pub fn q(&self) -> Joints {
        self.win.q
    }

    pub fn pose(&self) -> Pose {
        forward_kinematics(&self.chain, &self.win.q)
    }

    pub fn target_pose(&self) -> Pose {
        self.target_pose
    }

    pub fn window(&self) -> &ModelWindow {
        &self.win
    }

    pub fn prev_action(&self) -> Action {
        self.prev_action
    }

    pub fn obs_dim(&self) -> usize {
        obs_dim(self.model.spec.k)
    }

    /// Assemble the observation. The model-input part is built as if the
    /// previous decision's command were applied now — that is the command
    /// actually in effect while the policy deliberates; at episode start it
    /// is zero, so the action block starts all-zero.
    pub fn observe_into(&self, out: &mut [f64]) {
        let sd = state_dim(self.model.spec.k);
        debug_assert_eq!(out.len(), sd + 22);
        self.win.build_x(&self.prev_action, &self.model.q_norm(&self.win.q), &mut out[..sd]);
        let pose = self.pose();
        write_pose(&mut out[sd..sd + 7], &pose);
        let qn = self.model.q_norm(&self.win.q);
        out[sd + 7..sd + 11].copy_from_slice(&qn);
        write_pose(&mut out[sd + 11..sd + 18], &self.target_pose);
        let tqn = self.model.q_norm(&self.episode.target_q);
        out[sd + 18..sd + 22].copy_from_slice(&tqn);
    }

    pub fn observe(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_dim()];
        self.observe_into(&mut out);
        out
    }

    /// Apply one decision: the command runs for `action_repeat` ticks, the
    /// reward is computed on the post-repeat state, per-tick workspace
    /// breaches are reported for metrics.
    pub fn step(&mut self, a: &Action) -> Result<StepOut> {
        let repeat = self.episode.action_repeat;
        let mut ticks = Vec::with_capacity(repeat);
        for _ in 0..repeat {
            let q = match &mut self.backend {
                Backend::Model => self.win.step(&self.model, a)?,
                Backend::Plant { plant, tracker, rng } => {
                    plant.step(a, rng);
                    let q_meas = plant.q();
                    let qd_est = tracker.update(&q_meas);
                    self.win.push_measured(&self.model, a, &q_meas, &qd_est);
                    q_meas
                }
            };
            let pose = forward_kinematics(&self.chain, &q);
            let inside = in_workspace(&self.ws, &pose);
            ticks.push(Tick { q, pose, inside });
        }
        let last = *ticks.last().expect("action_repeat >= 1");
        let r = reward(
            &self.rcfg,
            &self.ws,
            &last.q,
            &last.pose,
            &self.episode.target_q,
            &self.target_pose,
            &self.target_yp,
            a,
            &self.prev_action,
        );
        self.prev_action = *a;
        self.t += 1;
        Ok(StepOut { reward: r, ticks, done: self.t >= self.episode.t_reset })
    }
}

/// Synchronously-batched model-backend environments for policy training and
/// batched evaluation. All instances share the episode clock, so resets are
/// batch-wide (episodes are fixed-length). Transitions go through the
/// batched window (one GEMM per tick for the whole set).
pub struct VecEnv {
    pub model: Arc<DynModel>,
    pub chain: KinematicChain,
    pub ws: Workspace,
    pub rcfg: RewardConfig,
    pub n: usize,
    pub t_reset: usize,
    pub action_repeat: usize,
    batch: BatchWindow,
    episodes: Vec<EpisodeSpec>,
    target_poses: Vec<Pose>,
    target_yps: Vec<YawPitch>,
    prev_actions: Vec<Action>,
    t: usize,
    /// None: fixed episode list, no resampling at the boundary.
    resample_rng: Option<ChaCha8Rng>,
}

pub struct VecStep {
    pub rewards: Vec<f64>,
    pub reward_terms: Vec<RewardTerms>,
    /// Envs that breached the region on the post-repeat tick.
    pub oow: Vec<bool>,
    /// Episode boundary reached: observations now describe fresh episodes
    /// (when resampling) and `final_obs` holds the pre-reset observation.
    pub done: bool,
    pub final_obs: Option<Array2<f64>>,
}

impl VecEnv {
    /// Training constructor: episodes sampled from `seed`, resampled at
    /// every boundary.
    pub fn sampled(
        model: Arc<DynModel>,
        chain: KinematicChain,
        ws: Workspace,
        rcfg: RewardConfig,
        n: usize,
        seed: u64,
    ) -> Result<VecEnv> {
        rcfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let episodes: Result<Vec<EpisodeSpec>> =
            (0..n).map(|_| sample_episode(&chain, &ws, &mut rng)).collect();
        Self::build(model, chain, ws, rcfg, episodes?, Some(rng))
    }

    /// Evaluation constructor: a fixed episode list, stepped once through.
    pub fn fixed(
        model: Arc<DynModel>,
        chain: KinematicChain,
        ws: Workspace,
        rcfg: RewardConfig,
        episodes: Vec<EpisodeSpec>,
    ) -> Result<VecEnv> {
        rcfg.validate()?;
        Self::build(model, chain, ws, rcfg, episodes, None)
    }

    fn build(
        model: Arc<DynModel>,
        chain: KinematicChain,
        ws: Workspace,
        rcfg: RewardConfig,
        episodes: Vec<EpisodeSpec>,
        resample_rng: Option<ChaCha8Rng>,
    ) -> Result<VecEnv> {
        if episodes.is_empty() {
            return Err(Error::Config("vec env needs at least one episode".into()));
        }
        let t_reset = episodes[0].t_reset;
        let action_repeat = episodes[0].action_repeat;
        for ep in &episodes {
            ep.validate(&chain, &ws)?;
            if ep.t_reset != t_reset || ep.action_repeat != action_repeat {
                return Err(Error::Config(
                    "vec env episodes must share t_reset and action_repeat".into(),
                ));
            }
        }
        let n = episodes.len();
        let windows: Vec<ModelWindow> =
            episodes.iter().map(|ep| ModelWindow::at_rest(&model, &ep.initial_q)).collect();
        let batch = BatchWindow::from_windows(&model, &windows);
        let target_poses: Vec<Pose> =
            episodes.iter().map(|ep| ep.target_pose(&chain)).collect();
        let target_yps: Vec<YawPitch> = target_poses.iter().map(yaw_pitch).collect();
        Ok(VecEnv {
            model,
            chain,
            ws,
            rcfg,
            n,
            t_reset,
            action_repeat,
            batch,
            episodes,
            target_poses,
            target_yps,
            prev_actions: vec![[0; 4]; n],
            t: 0,
            resample_rng,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn episodes(&self) -> &[EpisodeSpec] {
        &self.episodes
    }

    pub fn q(&self, row: usize) -> Joints {
        let mut q = [0.0; 4];
        for i in 0..4 {
            q[i] = self.batch.q[(row, i)];
        }
        q
    }

    pub fn obs_dim(&self) -> usize {
        obs_dim(self.model.spec.k)
    }

    pub fn observe(&self) -> Array2<f64> {
        let sd = state_dim(self.model.spec.k);
        let mut out = Array2::zeros((self.n, self.obs_dim()));
        self.batch.write_x(
            &self.model,
            &self.prev_actions,
            &mut out.slice_mut(ndarray::s![.., 0..sd]),
        );
        for r in 0..self.n {
            let q = self.q(r);
            let pose = forward_kinematics(&self.chain, &q);
            let row = out.row_mut(r).into_slice().expect("row-major observation buffer");
            write_pose(&mut row[sd..sd + 7], &pose);
            let qn = self.model.q_norm(&q);
            row[sd + 7..sd + 11].copy_from_slice(&qn);
            write_pose(&mut row[sd + 11..sd + 18], &self.target_poses[r]);
            let tqn = self.model.q_norm(&self.episodes[r].target_q);
            row[sd + 18..sd + 22].copy_from_slice(&tqn);
        }
        out
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<VecStep> {
        if actions.len() != self.n {
            return Err(Error::Config(format!(
                "vec env: {} actions for {} instances",
                actions.len(),
                self.n
            )));
        }
        let mut am = Array2::zeros((self.n, 4));
        for (r, a) in actions.iter().enumerate() {
            for i in 0..4 {
                am[(r, i)] = a[i] as f64;
            }
        }
        for _ in 0..self.action_repeat {
            self.batch.step(&self.model, &am);
        }
        let mut rewards = Vec::with_capacity(self.n);
        let mut reward_terms = Vec::with_capacity(self.n);
        let mut oow = Vec::with_capacity(self.n);
        for r in 0..self.n {
            let q = self.q(r);
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("vec env instance {r}")));
            }
            let pose = forward_kinematics(&self.chain, &q);
            let terms = reward(
                &self.rcfg,
                &self.ws,
                &q,
                &pose,
                &self.episodes[r].target_q,
                &self.target_poses[r],
                &self.target_yps[r],
                &actions[r],
                &self.prev_actions[r],
            );
            rewards.push(terms.total);
            reward_terms.push(terms);
            oow.push(!in_workspace(&self.ws, &pose));
        }
        self.prev_actions.copy_from_slice(actions);
        self.t += 1;

        let done = self.t >= self.t_reset;
        let mut final_obs = None;
        if done {
            final_obs = Some(self.observe());
            if let Some(mut rng) = self.resample_rng.take() {
                let episodes: Result<Vec<EpisodeSpec>> =
                    (0..self.n).map(|_| sample_episode(&self.chain, &self.ws, &mut rng)).collect();
                let episodes = episodes?;
                let windows: Vec<ModelWindow> = episodes
                    .iter()
                    .map(|ep| ModelWindow::at_rest(&self.model, &ep.initial_q))
                    .collect();
                self.batch = BatchWindow::from_windows(&self.model, &windows);
                self.target_poses =
                    episodes.iter().map(|ep| ep.target_pose(&self.chain)).collect();
                self.target_yps = self.target_poses.iter().map(yaw_pitch).collect();
                self.episodes = episodes;
                self.prev_actions = vec![[0; 4]; self.n];
                self.t = 0;
                self.resample_rng = Some(rng);
            }
        }
        Ok(VecStep { rewards, reward_terms, oow, done, final_obs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynmodel::{DynSpec, ParamFamily};
    use crate::observer::NormBounds;
    use approx::assert_abs_diff_eq;

    fn test_bounds() -> NormBounds {
        NormBounds {
            q_min: [-1.3, -0.9, -1.4, -1.2],
            q_max: [1.3, 0.6, 0.4, 1.2],
            qd_min: [-0.6; 4],
            qd_max: [0.6; 4],
        }
    }

    fn small_model(zeroed: bool) -> Arc<DynModel> {
        let spec = DynSpec {
            k: 4,
            arch: ParamFamily::Mlp { hidden: vec![16] },
            ..DynSpec::mlp_delta_q()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut model = DynModel::new(spec, test_bounds(), &mut rng).unwrap();
        if zeroed {
            let z = vec![0.0; model.net.param_count()];
            model.net.set_flat(&z);
        }
        Arc::new(model)
    }

    fn fixture() -> (KinematicChain, Workspace, EpisodeSpec) {
        let chain = KinematicChain::default();
        let ws = Workspace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ep = sample_episode(&chain, &ws, &mut rng).unwrap();
        (chain, ws, ep)
    }

    #[test]
    fn reward_at_target_is_exactly_three() {
        let (chain, ws, ep) = fixture();
        let cfg = RewardConfig::default();
        let pose = forward_kinematics(&chain, &ep.target_q);
        let yp = yaw_pitch(&pose);
        let a = [0i8; 4];
        let r = reward(&cfg, &ws, &ep.target_q, &pose, &ep.target_q, &pose, &yp, &a, &a);
        assert_eq!(r.total, 3.0);
        assert_eq!(r.bonus, 3.0);
        assert_eq!(r.pose, 0.0);
        assert_eq!(r.config, 0.0);
        assert_eq!(r.action, 0.0);
        assert_eq!(r.workspace, 0.0);
        assert_eq!(cfg.upper_bound(), 3.0);
    }

    #[test]
    fn one_meter_position_error_costs_one() {
        let (chain, ws, ep) = fixture();
        let cfg = RewardConfig::default();
        let target_pose = forward_kinematics(&chain, &ep.target_q);
        let yp = yaw_pitch(&target_pose);
        let mut pose = target_pose;
        pose.p[2] += 1.0;
        let a = [0i8; 4];
        let r = reward(&cfg, &ws, &ep.target_q, &pose, &ep.target_q, &target_pose, &yp, &a, &a);
        assert_abs_diff_eq!(r.pose, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn full_action_flip_costs_one() {
        let (chain, ws, ep) = fixture();
        let cfg = RewardConfig::default();
        let pose = forward_kinematics(&chain, &ep.target_q);
        let yp = yaw_pitch(&pose);
        let r = reward(
            &cfg,
            &ws,
            &ep.target_q,
            &pose,
            &ep.target_q,
            &pose,
            &yp,
            &[1, 1, 1, 1],
            &[-1, -1, -1, -1],
        );
        assert_eq!(r.action, -1.0);
    }

    #[test]
    fn outside_region_costs_two() {
        let (chain, ws, ep) = fixture();
        let cfg = RewardConfig::default();
        let target_pose = forward_kinematics(&chain, &ep.target_q);
        let yp = yaw_pitch(&target_pose);
        let mut pose = target_pose;
        pose.p[2] = -0.1; // below the floor: outside by construction
        let a = [0i8; 4];
        let r = reward(&cfg, &ws, &ep.target_q, &pose, &ep.target_q, &target_pose, &yp, &a, &a);
        assert_eq!(r.workspace, -2.0);
    }

    #[test]
    fn reward_never_exceeds_upper_bound() {
        let (chain, ws, _) = fixture();
        let cfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..500 {
            let mut q = [0.0; 4];
            let mut tq = [0.0; 4];
            for j in 0..4 {
                q[j] = rng.random_range(chain.q_min[j]..=chain.q_max[j]);
                tq[j] = rng.random_range(chain.q_min[j]..=chain.q_max[j]);
            }
            let pose = forward_kinematics(&chain, &q);
            let tpose = forward_kinematics(&chain, &tq);
            let typ = yaw_pitch(&tpose);
            let pick = |r: &mut ChaCha8Rng| [-1i8, 0, 1][r.random_range(0..3)];
            let a = [pick(&mut rng), pick(&mut rng), pick(&mut rng), pick(&mut rng)];
            let ap = [pick(&mut rng), pick(&mut rng), pick(&mut rng), pick(&mut rng)];
            let r = reward(&cfg, &ws, &q, &pose, &tq, &tpose, &typ, &a, &ap);
            assert!(r.total <= cfg.upper_bound() + 1e-12);
        }
    }

    #[test]
    fn fine_pose_bonus_implies_coarse() {
        // With default thresholds the fine window is nested in the coarse
        // one, so the pose bonus can only be 0, w, or 2w — never w from the
        // fine term alone.
        let (chain, ws, ep) = fixture();
        let cfg = RewardConfig {
            use_config: false,
            use_pose: false,
            use_action: false,
            use_workspace: false,
            ..RewardConfig::default()
        };
        let target_pose = forward_kinematics(&chain, &ep.target_q);
        let yp = yaw_pitch(&target_pose);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = [0i8; 4];
        for _ in 0..300 {
            let mut q = ep.target_q;
            for j in 0..4 {
                q[j] += rng.random_range(-0.2..0.2);
            }
            let pose = forward_kinematics(&chain, &q);
            let r = reward(&cfg, &ws, &q, &pose, &ep.target_q, &target_pose, &yp, &a, &a);
            let pose_bonus = r.bonus
                - cfg.w_alpha
                    * iverson({
                        let cyp = yaw_pitch(&pose);
                        let ey = wrap_angle(cyp.yaw - yp.yaw);
                        let epi = wrap_angle(cyp.pitch - yp.pitch);
                        ey * ey < cfg.eps_alpha && epi * epi < cfg.eps_alpha
                    })
                - cfg.w_config
                    * iverson((0..4).all(|j| {
                        let e = q[j] - ep.target_q[j];
                        e * e < cfg.eps_q
                    }));
            let in_units = pose_bonus / cfg.w_pose;
            assert!(
                (in_units - 0.0).abs() < 1e-9
                    || (in_units - 1.0).abs() < 1e-9
                    || (in_units - 2.0).abs() < 1e-9
            );
            if (in_units - 1.0).abs() < 1e-9 {
                // The single unit must come from the coarse threshold.
                let d = euclidean_distance(&target_pose.p, &pose.p);
                let dg = geodesic_distance(&target_pose.r, &pose.r);
                assert!(d < cfg.eps_p && dg < cfg.eps_r);
                assert!(!(d < cfg.eps_p_fine && dg < cfg.eps_r_fine));
            }
        }
    }

    #[test]
    fn reward_is_invariant_under_common_swing_rotation() {
        let (chain, ws, _) = fixture();
        let cfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tested = 0;
        while tested < 100 {
            let mut q = [0.0; 4];
            let mut tq = [0.0; 4];
            // Keep swing away from the sector edges so a small common
            // rotation cannot change region membership.
            q[0] = rng.random_range(-0.9..0.9);
            tq[0] = rng.random_range(-0.9..0.9);
            for j in 1..4 {
                q[j] = rng.random_range(chain.q_min[j]..=chain.q_max[j]);
                tq[j] = rng.random_range(chain.q_min[j]..=chain.q_max[j]);
            }
            let delta = rng.random_range(-0.25..0.25);
            let shift = |mut c: Joints, d: f64| {
                c[0] += d;
                c
            };
            let pose = forward_kinematics(&chain, &q);
            let tpose = forward_kinematics(&chain, &tq);
            if !in_workspace(&ws, &pose) || !in_workspace(&ws, &tpose) {
                continue;
            }
            let q2 = shift(q, delta);
            let tq2 = shift(tq, delta);
            let pose2 = forward_kinematics(&chain, &q2);
            let tpose2 = forward_kinematics(&chain, &tq2);
            if !in_workspace(&ws, &pose2) || !in_workspace(&ws, &tpose2) {
                continue;
            }
            let a = [1i8, 0, -1, 0];
            let ap = [0i8; 4];
            let r1 =
                reward(&cfg, &ws, &q, &pose, &tq, &tpose, &yaw_pitch(&tpose), &a, &ap);
            let r2 =
                reward(&cfg, &ws, &q2, &pose2, &tq2, &tpose2, &yaw_pitch(&tpose2), &a, &ap);
            assert_abs_diff_eq!(r1.total, r2.total, epsilon = 1e-9);
            tested += 1;
        }
    }

    #[test]
    fn episode_list_is_reproducible_and_targets_valid() {
        let chain = KinematicChain::default();
        let ws = Workspace::default();
        let a = make_episode_list(&chain, &ws, 42, 20).unwrap();
        let b = make_episode_list(&chain, &ws, 42, 20).unwrap();
        for (i, (x, y)) in a.episodes.iter().zip(&b.episodes).enumerate() {
            assert_eq!(x.seed, y.seed, "episode {i}");
            for j in 0..4 {
                assert_eq!(x.initial_q[j].to_bits(), y.initial_q[j].to_bits(), "episode {i}");
                assert_eq!(x.target_q[j].to_bits(), y.target_q[j].to_bits(), "episode {i}");
            }
        }
        for e in &a.episodes {
            let tpose = forward_kinematics(&chain, &e.target_q);
            assert!(in_target_subset(&ws, &tpose));
            let ipose = forward_kinematics(&chain, &e.initial_q);
            assert!(in_workspace(&ws, &ipose));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.json");
        a.save(&path).unwrap();
        let back = EpisodeList::load(&path).unwrap();
        // Save/load must be bit-exact (depends on exact float parsing in
        // the JSON layer).
        for (x, y) in a.episodes.iter().zip(&back.episodes) {
            assert_eq!(x.seed, y.seed);
            for j in 0..4 {
                assert_eq!(x.initial_q[j].to_bits(), y.initial_q[j].to_bits());
                assert_eq!(x.target_q[j].to_bits(), y.target_q[j].to_bits());
            }
        }
    }

    #[test]
    fn first_observation_has_zero_action_block_and_unit_quaternions() {
        let (chain, ws, ep) = fixture();
        let model = small_model(false);
        let env = Env::new_model_backend(
            model.clone(),
            chain,
            ws,
            RewardConfig::default(),
            ep.clone(),
        )
        .unwrap();
        let obs = env.observe();
        let k1 = model.spec.k + 1;
        assert_eq!(obs.len(), obs_dim(model.spec.k));
        for i in 4 * k1..8 * k1 {
            assert_eq!(obs[i], 0.0, "action block must start all-zero");
        }
        let sd = state_dim(model.spec.k);
        for base in [sd + 3, sd + 14] {
            let n2: f64 = obs[base..base + 4].iter().map(|v| v * v).sum();
            assert_abs_diff_eq!(n2, 1.0, epsilon = 1e-12);
        }
        // Current normalized config appears both at the end of the model
        // input and in its dedicated slot.
        assert_eq!(&obs[sd - 4..sd], &obs[sd + 7..sd + 11]);
        assert!(obs.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_model_zero_action_is_a_fixpoint_with_zero_action_penalty() {
        let (chain, ws, ep) = fixture();
        let model = small_model(true);
        let mut env =
            Env::new_model_backend(model, chain, ws, RewardConfig::default(), ep.clone()).unwrap();
        let obs0 = env.observe();
        let out = env.step(&[0; 4]).unwrap();
        assert_eq!(env.q(), ep.initial_q);
        assert_eq!(out.reward.action, 0.0);
        assert_eq!(out.ticks.len(), ACTION_REPEAT);
        assert_eq!(env.observe(), obs0);
    }

    #[test]
    fn plant_backend_is_seed_deterministic_and_tracks_measurements() {
        let (chain, ws, ep) = fixture();
        let model = small_model(false);
        let params = PlantParams::default();
        let run = || {
            let mut env = Env::new_plant_backend(
                model.clone(),
                &params,
                31,
                chain.clone(),
                ws.clone(),
                RewardConfig::default(),
                ep.clone(),
            )
            .unwrap();
            let mut qs = Vec::new();
            for t in 0..20 {
                let a: Action = [[1, 0, -1][t % 3], [0, 1][t % 2], -1, [1, -1][t % 2]];
                let out = env.step(&a).unwrap();
                qs.push(out.ticks.last().unwrap().q);
            }
            (qs, env.q())
        };
        let (qa, qend_a) = run();
        let (qb, qend_b) = run();
        for (x, y) in qa.iter().zip(&qb) {
            for i in 0..4 {
                assert_eq!(x[i].to_bits(), y[i].to_bits());
            }
        }
        // The env's current config is the plant measurement, not a model
        // prediction.
        assert_eq!(qend_a, qend_b);
        assert_ne!(qend_a, ep.initial_q, "plant must have moved under nonzero commands");
    }

    #[test]
    fn backend_swap_preserves_observation_layout() {
        let (chain, ws, ep) = fixture();
        let model = small_model(false);
        let env_m = Env::new_model_backend(
            model.clone(),
            chain.clone(),
            ws.clone(),
            RewardConfig::default(),
            ep.clone(),
        )
        .unwrap();
        let env_p = Env::new_plant_backend(
            model.clone(),
            &PlantParams::default(),
            1,
            chain,
            ws,
            RewardConfig::default(),
            ep,
        )
        .unwrap();
        // Identical initial observations: same windows, same episode.
        assert_eq!(env_m.observe(), env_p.observe());
    }

    #[test]
    fn vec_env_matches_scalar_envs() {
        let chain = KinematicChain::default();
        let ws = Workspace::default();
        let model = small_model(false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let episodes: Vec<EpisodeSpec> =
            (0..3).map(|_| sample_episode(&chain, &ws, &mut rng).unwrap()).collect();

        let mut venv = VecEnv::fixed(
            model.clone(),
            chain.clone(),
            ws.clone(),
            RewardConfig::default(),
            episodes.clone(),
        )
        .unwrap();
        let mut scalars: Vec<Env> = episodes
            .iter()
            .map(|ep| {
                Env::new_model_backend(
                    model.clone(),
                    chain.clone(),
                    ws.clone(),
                    RewardConfig::default(),
                    ep.clone(),
                )
                .unwrap()
            })
            .collect();

        let obs_b = venv.observe();
        for (r, env) in scalars.iter().enumerate() {
            let obs_s = env.observe();
            for (c, v) in obs_s.iter().enumerate() {
                assert_abs_diff_eq!(obs_b[(r, c)], *v, epsilon = 1e-12);
            }
        }

        for t in 0..10 {
            let actions: Vec<Action> = (0..3)
                .map(|r| {
                    [
                        [1, 0, -1][(t + r) % 3],
                        [0, 1][(t + r) % 2],
                        -1,
                        [1, -1][t % 2],
                    ]
                })
                .collect();
            let out = venv.step(&actions).unwrap();
            for (r, env) in scalars.iter_mut().enumerate() {
                let s = env.step(&actions[r]).unwrap();
                assert_abs_diff_eq!(out.rewards[r], s.reward.total, epsilon = 1e-10);
                let qv = venv.q(r);
                let qs = env.q();
                for i in 0..4 {
                    assert_abs_diff_eq!(qv[i], qs[i], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn vec_env_auto_reset_resamples_episodes() {
        let chain = KinematicChain::default();
        let ws = Workspace::default();
        let model = small_model(true);
        let mut venv = VecEnv::sampled(
            model,
            chain,
            ws,
            RewardConfig::default(),
            2,
            11,
        )
        .unwrap();
        // Shrink episodes for the test.
        for ep in &mut venv.episodes {
            ep.t_reset = 3;
        }
        venv.t_reset = 3;
        let before = venv.episodes.clone();
        let mut resets = 0;
        for _ in 0..3 {
            let out = venv.step(&[[0; 4], [0; 4]]).unwrap();
            if out.done {
                assert!(out.final_obs.is_some());
                resets += 1;
            } else {
                assert!(out.final_obs.is_none());
            }
        }
        assert_eq!(resets, 1);
        assert_eq!(venv.t(), 0);
        let after = venv.episodes.clone();
        assert!(
            before.iter().zip(&after).any(|(a, b)| a.initial_q != b.initial_q
                || a.target_q != b.target_q),
            "auto-reset must draw fresh episodes"
        );
        // New episodes restore the default horizon from the sampler.
        assert_eq!(after[0].t_reset, T_RESET);
    }

    #[test]
    fn fixed_vec_env_does_not_resample() {
        let chain = KinematicChain::default();
        let ws = Workspace::default();
        let model = small_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut ep = sample_episode(&chain, &ws, &mut rng).unwrap();
        ep.t_reset = 2;
        let mut venv =
            VecEnv::fixed(model, chain, ws, RewardConfig::default(), vec![ep.clone()]).unwrap();
        venv.step(&[[0; 4]]).unwrap();
        let out = venv.step(&[[0; 4]]).unwrap();
        assert!(out.done);
        assert_eq!(venv.episodes()[0].initial_q, ep.initial_q);
    }

    #[test]
    fn mismatched_dt_is_rejected() {
        let (chain, ws, ep) = fixture();
        let model = small_model(false);
        let params = PlantParams { dt: 0.01, ..PlantParams::default() };
        assert!(Env::new_plant_backend(
            model,
            &params,
            0,
            chain,
            ws,
            RewardConfig::default(),
            ep
        )
        .is_err());
    }

    #[test]
    fn velocity_variant_envs_run_and_observe_consistently() {
        let (chain, ws, ep) = fixture();
        let spec = DynSpec {
            k: 3,
            arch: ParamFamily::Mlp { hidden: vec![12] },
            ..DynSpec::mlp_delta_qd()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let model = Arc::new(DynModel::new(spec, test_bounds(), &mut rng).unwrap());
        let mut env = Env::new_model_backend(
            model.clone(),
            chain,
            ws,
            RewardConfig::default(),
            ep,
        )
        .unwrap();
        for t in 0..12 {
            let a: Action = [[1, -1][t % 2], 0, [0, 1][t % 2], -1];
            let out = env.step(&a).unwrap();
            assert!(out.reward.total.is_finite());
        }
        let obs = env.observe();
        assert_eq!(obs.len(), obs_dim(3));
        assert!(obs.iter().all(|v| v.is_finite()));
    }
}
