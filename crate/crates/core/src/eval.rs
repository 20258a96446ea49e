//! Evaluation harness: runs controllers over fixed episode lists on either
//! the learned-model or the plant backend, records per-tick logs, and
//! reduces them to success-rate matrices, workspace-violation rates, and
//! path-length metrics. Every metric is a pure function of the logs, so a
//! stored log reproduces its report exactly.

use crate::dynmodel::DynModel;
use crate::env::{Env, EpisodeList, EpisodeSpec, RewardConfig, RewardTerms};
use crate::icem::{PlanDiag, Planner};
use crate::kinematics::{
    euclidean_distance, forward_kinematics, wrap_angle, yaw_pitch, KinematicChain, Workspace,
};
use crate::plant::PlantParams;
use crate::ppo::{discretize, Policy};
use crate::{Action, Error, Joints, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Position thresholds of the success-rate matrix, meters.
pub fn sr_eps_p() -> Vec<f64> {
    (1..=17).map(|i| i as f64 * 0.02).collect()
}

/// Pitch thresholds of the success-rate matrix, radians.
pub fn sr_eps_alpha() -> Vec<f64> {
    (1..=8).map(|i| i as f64 * 0.02).collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TickLog {
    pub q: Joints,
    pub p: [f64; 3],
    /// End-effector orientation; the chain has no roll axis, so yaw and
    /// pitch describe it completely.
    pub yaw: f64,
    pub pitch: f64,
    pub action: Action,
    pub inside: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecisionLog {
    pub action: Action,
    pub terms: RewardTerms,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: EpisodeSpec,
    /// Plant noise seed (0 on the deterministic model backend).
    pub seed: u64,
    pub backend: String,
    pub controller: String,
    pub ticks: Vec<TickLog>,
    pub decisions: Vec<DecisionLog>,
}

impl EpisodeLog {
    pub fn validate(&self) -> Result<()> {
        let expect = self.episode.t_reset * self.episode.action_repeat;
        if self.ticks.len() != expect {
            return Err(Error::Format(format!(
                "episode log holds {} ticks, timeout-only episodes have {}",
                self.ticks.len(),
                expect
            )));
        }
        Ok(())
    }

    pub fn episode_return(&self) -> f64 {
        self.decisions.iter().map(|d| d.terms.total).sum()
    }
}

/// Existential success: some tick is simultaneously within the position
/// threshold and the (wrapped) pitch threshold, both strict.
pub fn success(log: &EpisodeLog, chain: &KinematicChain, eps_p: f64, eps_alpha: f64) -> bool {
    let target = log.episode.target_pose(chain);
    let target_pitch = yaw_pitch(&target).pitch;
    log.ticks.iter().any(|t| {
        euclidean_distance(&t.p, &target.p) < eps_p
            && wrap_angle(t.pitch - target_pitch).abs() < eps_alpha
    })
}

/// Cumulative end-effector travel (from the episode's initial pose) until
/// the tick of first success at the stated thresholds, or through the whole
/// episode when it never succeeds.
pub fn path_length(
    log: &EpisodeLog,
    chain: &KinematicChain,
    eps_p: f64,
    eps_alpha: f64,
) -> f64 {
    let target = log.episode.target_pose(chain);
    let target_pitch = yaw_pitch(&target).pitch;
    let mut prev = forward_kinematics(chain, &log.episode.initial_q).p;
    let mut total = 0.0;
    for t in &log.ticks {
        total += euclidean_distance(&prev, &t.p);
        prev = t.p;
        if euclidean_distance(&t.p, &target.p) < eps_p
            && wrap_angle(t.pitch - target_pitch).abs() < eps_alpha
        {
            break;
        }
    }
    total
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct WorkspaceRates {
    /// Fraction of episodes with at least one tick outside the region.
    pub oow: f64,
    /// Fraction of episodes with at least one tick below the region floor.
    pub ooz: f64,
    /// Lowest end-effector height over all ticks of all episodes.
    pub min_z: f64,
}

pub fn workspace_rates(logs: &[EpisodeLog], ws: &Workspace) -> WorkspaceRates {
    let mut oow = 0usize;
    let mut ooz = 0usize;
    let mut min_z = f64::INFINITY;
    for log in logs {
        let mut any_out = false;
        let mut any_low = false;
        for t in &log.ticks {
            min_z = min_z.min(t.p[2]);
            any_out |= !t.inside;
            any_low |= t.p[2] < ws.z_min;
        }
        oow += any_out as usize;
        ooz += any_low as usize;
    }
    let n = logs.len().max(1) as f64;
    let rates = WorkspaceRates { oow: oow as f64 / n, ooz: ooz as f64 / n, min_z };
    // A tick below the floor is by definition outside the region.
    assert!(rates.ooz <= rates.oow + 1e-15, "OOZ exceeded OOW");
    rates
}

/// Success fraction at every (eps_p, eps_alpha) grid point, shape 17x8.
pub fn sr_matrix(logs: &[EpisodeLog], chain: &KinematicChain) -> Vec<Vec<f64>> {
    let eps_p = sr_eps_p();
    let eps_a = sr_eps_alpha();
    let n = logs.len().max(1) as f64;
    // A cell (i, j) succeeds if any single tick satisfies both of its
    // thresholds: mark, per tick, every cell at or above the tick's
    // tightest indices (thresholds grow with the index, so satisfaction is
    // upward-closed along both axes).
    let mut counts = vec![vec![0usize; eps_a.len()]; eps_p.len()];
    for log in logs {
        let target = log.episode.target_pose(chain);
        let target_pitch = yaw_pitch(&target).pitch;
        let mut hit = vec![vec![false; eps_a.len()]; eps_p.len()];
        for t in &log.ticks {
            let d = euclidean_distance(&t.p, &target.p);
            let a = wrap_angle(t.pitch - target_pitch).abs();
            if let (Some(pi), Some(ai)) =
                (eps_p.iter().position(|e| d < *e), eps_a.iter().position(|e| a < *e))
            {
                for hit_row in hit.iter_mut().skip(pi) {
                    for cell in hit_row.iter_mut().skip(ai) {
                        *cell = true;
                    }
                }
            }
        }
        for (count_row, hit_row) in counts.iter_mut().zip(&hit) {
            for (c, h) in count_row.iter_mut().zip(hit_row) {
                *c += *h as usize;
            }
        }
    }
    counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpisodeSummary {
    pub index: usize,
    pub success_tight: bool,
    pub success_loose: bool,
    pub episode_return: f64,
    pub path_length: f64,
    pub oow: bool,
    pub min_z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub controller: String,
    pub backend: String,
    pub protocol: String,
    pub episodes: usize,
    pub avg_return: f64,
    pub eps_p: Vec<f64>,
    pub eps_alpha: Vec<f64>,
    /// sr[i][j] = success rate at (eps_p[i], eps_alpha[j]).
    pub sr: Vec<Vec<f64>>,
    pub oow: f64,
    pub ooz: f64,
    pub min_z: f64,
    /// Mean end-effector path length at the (0.02, 0.02) thresholds.
    pub mean_path_length: f64,
    pub per_episode: Vec<EpisodeSummary>,
}

impl MetricsReport {
    /// Success rate at the grid point nearest to (eps_p, eps_alpha).
    pub fn sr_at(&self, eps_p: f64, eps_alpha: f64) -> f64 {
        let find = |grid: &[f64], v: f64| {
            grid.iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 - v).abs().partial_cmp(&(b.1 - v).abs()).expect("finite grid")
                })
                .map(|(i, _)| i)
                .expect("non-empty grid")
        };
        self.sr[find(&self.eps_p, eps_p)][find(&self.eps_alpha, eps_alpha)]
    }
}

pub fn build_report(
    logs: &[EpisodeLog],
    chain: &KinematicChain,
    ws: &Workspace,
    protocol: &str,
) -> MetricsReport {
    let sr = sr_matrix(logs, chain);
    // The success region grows with either threshold; the matrix must.
    for row in &sr {
        for w in row.windows(2) {
            assert!(w[1] >= w[0], "SR matrix fell along the pitch axis");
        }
    }
    for i in 1..sr.len() {
        for j in 0..sr[i].len() {
            assert!(sr[i][j] >= sr[i - 1][j], "SR matrix fell along the position axis");
        }
    }
    let rates = workspace_rates(logs, ws);
    let per_episode: Vec<EpisodeSummary> = logs
        .iter()
        .enumerate()
        .map(|(index, log)| {
            let mut min_z = f64::INFINITY;
            let mut oow = false;
            for t in &log.ticks {
                min_z = min_z.min(t.p[2]);
                oow |= !t.inside;
            }
            EpisodeSummary {
                index,
                success_tight: success(log, chain, 0.02, 0.02),
                success_loose: success(log, chain, 0.04, 0.04),
                episode_return: log.episode_return(),
                path_length: path_length(log, chain, 0.02, 0.02),
                oow,
                min_z,
            }
        })
        .collect();
    let n = logs.len().max(1) as f64;
    MetricsReport {
        controller: logs.first().map(|l| l.controller.clone()).unwrap_or_default(),
        backend: logs.first().map(|l| l.backend.clone()).unwrap_or_default(),
        protocol: protocol.to_string(),
        episodes: logs.len(),
        avg_return: per_episode.iter().map(|e| e.episode_return).sum::<f64>() / n,
        eps_p: sr_eps_p(),
        eps_alpha: sr_eps_alpha(),
        sr,
        oow: rates.oow,
        ooz: rates.ooz,
        min_z: rates.min_z,
        mean_path_length: per_episode.iter().map(|e| e.path_length).sum::<f64>() / n,
        per_episode,
    }
}

/// Decision-time policy: maps the current environment state to a command.
pub trait Controller {
    fn name(&self) -> &str;
    /// Called at every episode (or sequential-target) boundary.
    fn reset(&mut self);
    fn act(&mut self, env: &Env) -> Result<Action>;
}

/// Always commands zero on every joint.
pub struct NullController;

impl Controller for NullController {
    fn name(&self) -> &str {
        "null"
    }
    fn reset(&mut self) {}
    fn act(&mut self, _env: &Env) -> Result<Action> {
        Ok([0; 4])
    }
}

/// Deterministic actor rollout: tanh of the policy mean, discretized.
pub struct PolicyController {
    pub policy: Policy,
}

impl Controller for PolicyController {
    fn name(&self) -> &str {
        "ppo"
    }
    fn reset(&mut self) {}
    fn act(&mut self, env: &Env) -> Result<Action> {
        let obs = env.observe();
        if obs.len() != self.policy.obs_dim {
            return Err(Error::Config(format!(
                "policy expects {}-dim observations, environment provides {}",
                self.policy.obs_dim,
                obs.len()
            )));
        }
        let x = Array2::from_shape_vec((1, obs.len()), obs).expect("observation row");
        let y = self.policy.act_deterministic(&x);
        Ok(discretize(y.row(0).as_slice().expect("row-major proto-action")))
    }
}

/// Receding-horizon planner driven by the environment's model window.
pub struct PlannerController {
    pub planner: Planner,
    /// Per-call diagnostics, accumulated across the whole study (episode
    /// resets clear the planner's distribution, not this record).
    pub diags: Vec<PlanDiag>,
}

impl PlannerController {
    pub fn new(planner: Planner) -> PlannerController {
        PlannerController { planner, diags: Vec::new() }
    }

    /// Mean wall-clock planning time per call, milliseconds.
    pub fn mean_plan_ms(&self) -> Option<f64> {
        if self.diags.is_empty() {
            return None;
        }
        let total: f64 = self.diags.iter().map(|d| d.elapsed.as_secs_f64()).sum();
        Some(total / self.diags.len() as f64 * 1e3)
    }
}

impl Controller for PlannerController {
    fn name(&self) -> &str {
        "icem"
    }
    fn reset(&mut self) {
        self.planner.reset();
    }
    fn act(&mut self, env: &Env) -> Result<Action> {
        let (a, diag) =
            self.planner.plan(env.window(), env.prev_action(), &env.episode.target_q)?;
        self.diags.push(diag);
        Ok(a)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Independent episodes, each reset to its sampled initial config.
    Fixed,
    /// One continuous run; the target swaps every t_reset decisions and the
    /// arm keeps its state (first 100 targets).
    Sequential,
}

#[derive(Clone, Debug)]
pub enum BackendKind {
    Model,
    Plant(PlantParams),
}

impl BackendKind {
    fn name(&self) -> &'static str {
        match self {
            BackendKind::Model => "model",
            BackendKind::Plant(_) => "plant",
        }
    }
}

pub struct StudyConfig {
    pub protocol: Protocol,
    pub backend: BackendKind,
    /// Cap on episodes (sequential runs additionally cap at 100 targets).
    pub max_episodes: Option<usize>,
}

pub struct StudyOut {
    pub report: MetricsReport,
    pub logs: Vec<EpisodeLog>,
}

const SEQUENTIAL_TARGET_CAP: usize = 100;

fn run_segment(
    controller: &mut dyn Controller,
    env: &mut Env,
    seed: u64,
    backend: &str,
) -> Result<EpisodeLog> {
    controller.reset();
    let t_reset = env.episode.t_reset;
    let repeat = env.episode.action_repeat;
    let mut ticks = Vec::with_capacity(t_reset * repeat);
    let mut decisions = Vec::with_capacity(t_reset);
    let episode = env.episode.clone();
    loop {
        let a = controller.act(env)?;
        let out = env.step(&a)?;
        for t in &out.ticks {
            let yp = yaw_pitch(&t.pose);
            ticks.push(TickLog {
                q: t.q,
                p: t.pose.p,
                yaw: yp.yaw,
                pitch: yp.pitch,
                action: a,
                inside: t.inside,
            });
        }
        decisions.push(DecisionLog { action: a, terms: out.reward });
        if out.done {
            break;
        }
    }
    let log = EpisodeLog {
        episode,
        seed,
        backend: backend.to_string(),
        controller: controller.name().to_string(),
        ticks,
        decisions,
    };
    log.validate()?;
    Ok(log)
}

/// Run every episode of the list under the chosen protocol and backend,
/// returning the aggregated report together with the raw logs.
pub fn run_study(
    controller: &mut dyn Controller,
    model: Arc<DynModel>,
    chain: &KinematicChain,
    ws: &Workspace,
    rcfg: &RewardConfig,
    list: &EpisodeList,
    study: &StudyConfig,
) -> Result<StudyOut> {
    if list.episodes.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let backend_name = study.backend.name();
    let mut logs = Vec::new();
    match study.protocol {
        Protocol::Fixed => {
            let n = study.max_episodes.unwrap_or(list.episodes.len()).min(list.episodes.len());
            for entry in &list.episodes[..n] {
                let spec = EpisodeSpec::new(entry.initial_q, entry.target_q);
                let mut env = match &study.backend {
                    BackendKind::Model => Env::new_model_backend(
                        model.clone(),
                        chain.clone(),
                        ws.clone(),
                        rcfg.clone(),
                        spec,
                    )?,
                    BackendKind::Plant(params) => Env::new_plant_backend(
                        model.clone(),
                        params,
                        entry.seed,
                        chain.clone(),
                        ws.clone(),
                        rcfg.clone(),
                        spec,
                    )?,
                };
                logs.push(run_segment(controller, &mut env, entry.seed, backend_name)?);
            }
        }
        Protocol::Sequential => {
            let cap = study.max_episodes.unwrap_or(SEQUENTIAL_TARGET_CAP);
            let n = cap.min(SEQUENTIAL_TARGET_CAP).min(list.episodes.len());
            let first = &list.episodes[0];
            let spec = EpisodeSpec::new(first.initial_q, first.target_q);
            let mut env = match &study.backend {
                BackendKind::Model => Env::new_model_backend(
                    model.clone(),
                    chain.clone(),
                    ws.clone(),
                    rcfg.clone(),
                    spec,
                )?,
                BackendKind::Plant(params) => Env::new_plant_backend(
                    model.clone(),
                    params,
                    first.seed,
                    chain.clone(),
                    ws.clone(),
                    rcfg.clone(),
                    spec,
                )?,
            };
            for (i, entry) in list.episodes[..n].iter().enumerate() {
                if i > 0 {
                    env.set_target(entry.target_q)?;
                }
                logs.push(run_segment(controller, &mut env, first.seed, backend_name)?);
            }
        }
    }
    let protocol = match study.protocol {
        Protocol::Fixed => "fixed",
        Protocol::Sequential => "sequential",
    };
    let report = build_report(&logs, chain, ws, protocol);
    Ok(StudyOut { report, logs })
}

/// Sample mean and (n-1)-normalized std; std is 0 for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn save_report_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let body = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    std::fs::write(path, body)?;
    Ok(())
}

pub fn save_logs_json(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let body = serde_json::to_string(logs)
        .map_err(|e| Error::Format(format!("log serialization: {e}")))?;
    std::fs::write(path, body)?;
    Ok(())
}

pub fn load_logs_json(path: &Path) -> Result<Vec<EpisodeLog>> {
    let body = std::fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| Error::Format(format!("log parse: {e}")))
}

/// SR matrix as a CSV grid: rows are position thresholds, columns pitch
/// thresholds.
pub fn write_sr_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("sr csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["eps_p/eps_alpha".to_string()];
    header.extend(report.eps_alpha.iter().map(|e| format!("{e:.2}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in report.sr.iter().enumerate() {
        let mut rec = vec![format!("{:.2}", report.eps_p[i])];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_episodes_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("episodes csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "episode",
        "success_0.02_0.02",
        "success_0.04_0.04",
        "return",
        "path_length",
        "oow",
        "min_z",
    ])
    .map_err(csv_err)?;
    for e in &report.per_episode {
        w.write_record([
            e.index.to_string(),
            (e.success_tight as u8).to_string(),
            (e.success_loose as u8).to_string(),
            e.episode_return.to_string(),
            e.path_length.to_string(),
            (e.oow as u8).to_string(),
            e.min_z.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynmodel::{DynSpec, ParamFamily};
    use crate::env::{make_episode_list, sample_episode};
    use crate::kinematics::Pose;
    use crate::observer::NormBounds;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zeroed_model(k: usize) -> (Arc<DynModel>, KinematicChain, Workspace) {
        let chain = KinematicChain::default();
        let ws = Workspace::default();
        let spec =
            DynSpec { k, arch: ParamFamily::Mlp { hidden: vec![8] }, ..DynSpec::mlp_delta_q() };
        let bounds = NormBounds {
            q_min: chain.q_min,
            q_max: chain.q_max,
            qd_min: [-0.6; 4],
            qd_max: [0.6; 4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut model = DynModel::new(spec, bounds, &mut rng).unwrap();
        let z = vec![0.0; model.net.param_count()];
        model.net.set_flat(&z);
        (Arc::new(model), chain, ws)
    }

    /// A log whose arm sits at `q` for the whole episode.
    fn stationary_log(chain: &KinematicChain, q: Joints, target_q: Joints) -> EpisodeLog {
        let mut episode = EpisodeSpec::new(q, target_q);
        episode.t_reset = 10;
        let pose = forward_kinematics(chain, &q);
        let yp = yaw_pitch(&pose);
        let tick = TickLog {
            q,
            p: pose.p,
            yaw: yp.yaw,
            pitch: yp.pitch,
            action: [0; 4],
            inside: true,
        };
        EpisodeLog {
            episode,
            seed: 0,
            backend: "model".into(),
            controller: "null".into(),
            ticks: vec![tick; 40],
            decisions: vec![
                DecisionLog { action: [0; 4], terms: RewardTerms::default() };
                10
            ],
        }
    }

    fn some_target(chain: &KinematicChain, ws: &Workspace, seed: u64) -> Joints {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_episode(chain, ws, &mut rng).unwrap().target_q
    }

    #[test]
    fn log_starting_at_target_succeeds_at_every_threshold() {
        let (_, chain, ws) = zeroed_model(3);
        let tq = some_target(&chain, &ws, 1);
        let log = stationary_log(&chain, tq, tq);
        for ep in sr_eps_p() {
            for ea in sr_eps_alpha() {
                assert!(success(&log, &chain, ep, ea));
            }
        }
        assert_eq!(path_length(&log, &chain, 0.02, 0.02), 0.0);
    }

    #[test]
    fn stationary_log_one_meter_away_never_succeeds() {
        let (_, chain, ws) = zeroed_model(3);
        // Find a pair at least a meter apart.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, tq) = loop {
            let ep = sample_episode(&chain, &ws, &mut rng).unwrap();
            let d = euclidean_distance(
                &forward_kinematics(&chain, &ep.initial_q).p,
                &forward_kinematics(&chain, &ep.target_q).p,
            );
            if d > 1.0 {
                break (ep.initial_q, ep.target_q);
            }
        };
        let log = stationary_log(&chain, q, tq);
        assert!(!success(&log, &chain, 0.34, 0.16));
    }

    #[test]
    fn single_threshold_crossing_tick_counts() {
        let (_, chain, ws) = zeroed_model(3);
        let tq = some_target(&chain, &ws, 3);
        let far = some_target(&chain, &ws, 4);
        let mut log = stationary_log(&chain, far, tq);
        // Overwrite exactly one tick with the target state.
        let pose = forward_kinematics(&chain, &tq);
        let yp = yaw_pitch(&pose);
        log.ticks[17] = TickLog {
            q: tq,
            p: pose.p,
            yaw: yp.yaw,
            pitch: yp.pitch,
            action: [0; 4],
            inside: true,
        };
        assert!(success(&log, &chain, 0.02, 0.02));
    }

    #[test]
    fn path_length_matches_direct_summation_oracle() {
        let (_, chain, ws) = zeroed_model(3);
        let tq = some_target(&chain, &ws, 5);
        let far = some_target(&chain, &ws, 6);
        let mut log = stationary_log(&chain, far, tq);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in log.ticks.iter_mut() {
            for c in t.p.iter_mut() {
                *c += rng.random_range(-0.01..0.01);
            }
            // Push pitch far off so the success cutoff never triggers and
            // the whole trajectory counts.
            t.pitch = 1.0;
        }
        let mut expect = 0.0;
        let mut prev = forward_kinematics(&chain, &log.episode.initial_q).p;
        for t in &log.ticks {
            let dx = t.p[0] - prev[0];
            let dy = t.p[1] - prev[1];
            let dz = t.p[2] - prev[2];
            expect += (dx * dx + dy * dy + dz * dz).sqrt();
            prev = t.p;
        }
        assert_abs_diff_eq!(
            path_length(&log, &chain, 0.02, 0.02),
            expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn path_length_stops_at_first_success() {
        let (_, chain, ws) = zeroed_model(3);
        let tq = some_target(&chain, &ws, 8);
        let target_pose = forward_kinematics(&chain, &tq);
        // Two-tick straight line: one 0.1 m step into the target.
        let mut start = target_pose.p;
        start[0] -= 0.1;
        let yp = yaw_pitch(&target_pose);
        let mut log = stationary_log(&chain, tq, tq);
        log.episode.initial_q = tq; // initial FK pose is the target here
        let off_tick = TickLog {
            q: tq,
            p: start,
            yaw: yp.yaw,
            pitch: yp.pitch,
            action: [0; 4],
            inside: true,
        };
        let on_tick = TickLog {
            q: tq,
            p: target_pose.p,
            yaw: yp.yaw,
            pitch: yp.pitch,
            action: [0; 4],
            inside: true,
        };
        log.ticks = vec![off_tick, on_tick, off_tick, on_tick];
        log.episode.t_reset = 1;
        // Initial pose sits at the target: distance 0 to the first tick is
        // 0.1 m out, then 0.1 m back in, where success stops the sum.
        assert_abs_diff_eq!(
            path_length(&log, &chain, 0.15, 0.16),
            0.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn workspace_rates_flag_floor_breaches() {
        let (_, chain, ws) = zeroed_model(3);
        let tq = some_target(&chain, &ws, 9);
        let clean = stationary_log(&chain, tq, tq);
        let mut dipped = stationary_log(&chain, tq, tq);
        dipped.ticks[3].p[2] = -0.1;
        dipped.ticks[3].inside = false;
        let mut sideways = stationary_log(&chain, tq, tq);
        sideways.ticks[5].inside = false; // out of sector, above the floor
        let logs = vec![clean, dipped, sideways];
        let rates = workspace_rates(&logs, &ws);
        assert_abs_diff_eq!(rates.oow, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rates.ooz, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rates.min_z, -0.1, epsilon = 1e-15);
        assert!(rates.ooz <= rates.oow);
    }

    #[test]
    fn perfect_logs_give_full_sr_matrix() {
        let (_, chain, ws) = zeroed_model(3);
        let logs: Vec<EpisodeLog> = (0..5)
            .map(|i| {
                let tq = some_target(&chain, &ws, 10 + i);
                stationary_log(&chain, tq, tq)
            })
            .collect();
        let report = build_report(&logs, &chain, &ws, "fixed");
        for row in &report.sr {
            for v in row {
                assert_eq!(*v, 1.0);
            }
        }
        assert_eq!(report.sr_at(0.04, 0.04), 1.0);
        assert_eq!(report.episodes, 5);
    }

    #[test]
    fn sr_matrix_is_monotone_on_mixed_logs() {
        let (_, chain, ws) = zeroed_model(3);
        let mut logs = Vec::new();
        for i in 0..12 {
            let tq = some_target(&chain, &ws, 20 + i);
            let start = if i % 3 == 0 { tq } else { some_target(&chain, &ws, 40 + i) };
            logs.push(stationary_log(&chain, start, tq));
        }
        let report = build_report(&logs, &chain, &ws, "fixed");
        for i in 0..report.sr.len() {
            for j in 0..report.sr[i].len() {
                if i > 0 {
                    assert!(report.sr[i][j] >= report.sr[i - 1][j]);
                }
                if j > 0 {
                    assert!(report.sr[i][j] >= report.sr[i][j - 1]);
                }
            }
        }
    }

    #[test]
    fn null_controller_study_runs_and_mostly_fails() {
        let (model, chain, ws) = zeroed_model(3);
        let mut list = make_episode_list(&chain, &ws, 77, 4).unwrap();
        list.episodes.truncate(4);
        let study = StudyConfig {
            protocol: Protocol::Fixed,
            backend: BackendKind::Model,
            max_episodes: None,
        };
        let mut controller = NullController;
        let out = run_study(
            &mut controller,
            model,
            &chain,
            &ws,
            &RewardConfig::default(),
            &list,
            &study,
        )
        .unwrap();
        assert_eq!(out.logs.len(), 4);
        for log in &out.logs {
            log.validate().unwrap();
            assert_eq!(log.controller, "null");
            assert_eq!(log.backend, "model");
        }
        // A frozen arm on random targets essentially never succeeds tight.
        assert_eq!(out.report.sr_at(0.02, 0.02), 0.0);
    }

    #[test]
    fn study_is_deterministic_across_runs() {
        let (model, chain, ws) = zeroed_model(3);
        let list = make_episode_list(&chain, &ws, 11, 3).unwrap();
        let study = StudyConfig {
            protocol: Protocol::Fixed,
            backend: BackendKind::Plant(PlantParams::default()),
            max_episodes: None,
        };
        let run = || {
            let mut c = NullController;
            let out = run_study(
                &mut c,
                model.clone(),
                &chain,
                &ws,
                &RewardConfig::default(),
                &list,
                &study,
            )
            .unwrap();
            serde_json::to_string(&out.report).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sequential_protocol_keeps_arm_state_across_targets() {
        let (model, chain, ws) = zeroed_model(3);
        let mut list = make_episode_list(&chain, &ws, 13, 3).unwrap();
        list.episodes.truncate(2);
        let study = StudyConfig {
            protocol: Protocol::Sequential,
            backend: BackendKind::Model,
            max_episodes: Some(2),
        };
        let mut controller = NullController;
        let out = run_study(
            &mut controller,
            model,
            &chain,
            &ws,
            &RewardConfig::default(),
            &list,
            &study,
        )
        .unwrap();
        assert_eq!(out.logs.len(), 2);
        // Second segment starts where the first ended (a zero model under
        // a null controller never moves, so both equal the initial config).
        assert_eq!(out.logs[1].episode.initial_q, list.episodes[0].initial_q);
        assert_eq!(out.logs[1].episode.target_q, list.episodes[1].target_q);
        assert_eq!(out.report.protocol, "sequential");
    }

    #[test]
    fn report_roundtrips_through_logs_json() {
        let (model, chain, ws) = zeroed_model(3);
        let list = make_episode_list(&chain, &ws, 17, 2).unwrap();
        let study = StudyConfig {
            protocol: Protocol::Fixed,
            backend: BackendKind::Model,
            max_episodes: None,
        };
        let mut controller = NullController;
        let out = run_study(
            &mut controller,
            model,
            &chain,
            &ws,
            &RewardConfig::default(),
            &list,
            &study,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs.json");
        save_logs_json(&path, &out.logs).unwrap();
        let back = load_logs_json(&path).unwrap();
        let report2 = build_report(&back, &chain, &ws, "fixed");
        assert_eq!(
            serde_json::to_string(&out.report).unwrap(),
            serde_json::to_string(&report2).unwrap()
        );
    }

    #[test]
    fn csv_outputs_are_well_formed() {
        let (_, chain, ws) = zeroed_model(3);
        let tq = some_target(&chain, &ws, 30);
        let logs = vec![stationary_log(&chain, tq, tq)];
        let report = build_report(&logs, &chain, &ws, "fixed");
        let dir = tempfile::tempdir().unwrap();
        let srp = dir.path().join("sr.csv");
        write_sr_csv(&srp, &report).unwrap();
        let body = std::fs::read_to_string(&srp).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 18); // header + 17 threshold rows
        assert!(lines[0].starts_with("eps_p/eps_alpha,0.02,"));
        assert!(lines[1].starts_with("0.02,1,"));
        let epp = dir.path().join("episodes.csv");
        write_episodes_csv(&epp, &report).unwrap();
        let body = std::fs::read_to_string(&epp).unwrap();
        assert_eq!(body.lines().count(), 2);
        let rep = dir.path().join("report.json");
        save_report_json(&rep, &report).unwrap();
        assert!(std::fs::read_to_string(&rep).unwrap().contains("\"avg_return\""));
    }

    #[test]
    fn mean_std_handles_small_samples() {
        let (m, s) = mean_std(&[2.0]);
        assert_eq!((m, s), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(m, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn policy_controller_drives_a_study() {
        let (model, chain, ws) = zeroed_model(3);
        let list = make_episode_list(&chain, &ws, 19, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = Policy::new(crate::env::obs_dim(3), 4, &[8], &[8], &mut rng);
        let mut controller = PolicyController { policy };
        let study = StudyConfig {
            protocol: Protocol::Fixed,
            backend: BackendKind::Model,
            max_episodes: Some(1),
        };
        let out = run_study(
            &mut controller,
            model,
            &chain,
            &ws,
            &RewardConfig::default(),
            &list,
            &study,
        )
        .unwrap();
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.logs[0].controller, "ppo");
    }

    #[test]
    fn planner_controller_drives_a_study() {
        use crate::icem::IcemConfig;
        let (model, chain, ws) = zeroed_model(3);
        let list = make_episode_list(&chain, &ws, 23, 1).unwrap();
        let cfg = IcemConfig {
            horizon: 2,
            n_pop: 8,
            n_elites: 2,
            iters: 1,
            ..IcemConfig::default()
        };
        let planner = Planner::new(
            model.clone(),
            chain.clone(),
            ws.clone(),
            RewardConfig::planner_default(),
            cfg,
            3,
        )
        .unwrap();
        let mut controller = PlannerController::new(planner);
        let study = StudyConfig {
            protocol: Protocol::Fixed,
            backend: BackendKind::Model,
            max_episodes: Some(1),
        };
        let out = run_study(
            &mut controller,
            model,
            &chain,
            &ws,
            &RewardConfig::default(),
            &list,
            &study,
        )
        .unwrap();
        assert_eq!(out.logs[0].controller, "icem");
        assert_eq!(out.logs[0].ticks.len(), 2000);
    }

    #[test]
    fn pose_type_is_not_needed_for_metrics() {
        // Logs capture position plus yaw/pitch; reconstructing a pose for
        // comparison agrees with the stored orientation.
        let (_, chain, ws) = zeroed_model(3);
        let tq = some_target(&chain, &ws, 31);
        let pose: Pose = forward_kinematics(&chain, &tq);
        let yp = yaw_pitch(&pose);
        let log = stationary_log(&chain, tq, tq);
        assert_abs_diff_eq!(log.ticks[0].pitch, yp.pitch, epsilon = 1e-15);
        assert_abs_diff_eq!(log.ticks[0].yaw, yp.yaw, epsilon = 1e-15);
    }
}
