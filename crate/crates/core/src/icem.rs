//! Sampling-based MPC over discrete action sequences: an improved
//! cross-entropy method with colored exploration noise, elite reuse across
//! iterations and planning calls, and momentum-smoothed distribution
//! updates. Candidate sequences live in continuous proto-action space and
//! are discretized at evaluation time, so the search distribution stays
//! smooth while the backend only ever sees executable commands.

use crate::dynmodel::{BatchWindowF32, DynModel, ModelWindow};
use crate::env::{reward, RewardConfig};
use crate::kinematics::{forward_kinematics, yaw_pitch, KinematicChain, Workspace};
use crate::nn::NetF32;
use crate::ppo::discretize;
use crate::{Action, Error, Joints, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IcemConfig {
    /// Planning horizon in decision steps.
    pub horizon: usize,
    /// Fresh samples per iteration.
    pub n_pop: usize,
    pub n_elites: usize,
    /// Initial (and shift-reset) proto-action std.
    pub sigma0: f64,
    /// Momentum: weight kept on the previous distribution at each update.
    pub alpha: f64,
    /// CEM iterations per planning call.
    pub iters: usize,
    /// Colored-noise exponent: sample PSD falls off as f^(-beta) along the
    /// horizon; 0 is white.
    pub beta: f64,
    /// Fraction of the elite set reused in the next iteration and, shifted,
    /// in the next planning call.
    pub elite_reuse: f64,
    /// Plant ticks per decision step inside rollouts.
    pub action_repeat: usize,
    pub gamma: f64,
}

impl Default for IcemConfig {
    fn default() -> Self {
        IcemConfig {
            horizon: 20,
            n_pop: 500,
            n_elites: 50,
            sigma0: 0.5,
            alpha: 0.05,
            iters: 12,
            beta: 2.0,
            elite_reuse: 0.5,
            action_repeat: 4,
            gamma: 0.97,
        }
    }
}

impl IcemConfig {
    /// Reduced search that fits interactive planning budgets on one core.
    pub fn desk() -> IcemConfig {
        IcemConfig { horizon: 10, n_pop: 120, n_elites: 16, iters: 4, ..IcemConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("icem: horizon must be >= 1".into()));
        }
        if self.n_elites == 0 || self.n_elites > self.n_pop {
            return Err(Error::Config("icem: need 1 <= n_elites <= n_pop".into()));
        }
        if !(self.sigma0 > 0.0) {
            return Err(Error::Config("icem: sigma0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config("icem: alpha must lie in [0, 1)".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("icem: beta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.elite_reuse) {
            return Err(Error::Config("icem: elite_reuse must lie in [0, 1]".into()));
        }
        if self.iters == 0 || self.action_repeat == 0 {
            return Err(Error::Config("icem: iters and action_repeat must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("icem: gamma must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn n_reuse(&self) -> usize {
        (self.elite_reuse * self.n_elites as f64).floor() as usize
    }
}

/// Diagonal-covariance Gaussian over proto-action sequences.
#[derive(Clone, Debug)]
pub struct PlanDistribution {
    /// (horizon, 4), clamped to [-1, 1].
    pub mu: Array2<f64>,
    /// (horizon, 4), strictly positive.
    pub sigma: Array2<f64>,
}

impl PlanDistribution {
    pub fn init(horizon: usize, sigma0: f64) -> PlanDistribution {
        PlanDistribution {
            mu: Array2::zeros((horizon, 4)),
            sigma: Array2::from_elem((horizon, 4), sigma0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.dim() != self.sigma.dim() {
            return Err(Error::Config("plan distribution: mu/sigma shape mismatch".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("plan distribution: sigma must be positive".into()));
        }
        if self.mu.iter().any(|m| !(-1.0..=1.0).contains(m)) {
            return Err(Error::Config("plan distribution: mu must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Advance a distribution one decision step: rows move toward t, the freed
/// final row becomes the neutral proto-action with exploration std sigma0.
pub fn shift_distribution(dist: &PlanDistribution, sigma0: f64) -> PlanDistribution {
    let h = dist.mu.nrows();
    let mut mu = Array2::zeros((h, 4));
    let mut sigma = Array2::from_elem((h, 4), sigma0);
    for t in 0..h - 1 {
        for j in 0..4 {
            mu[(t, j)] = dist.mu[(t + 1, j)];
            sigma[(t, j)] = dist.sigma[(t + 1, j)];
        }
    }
    PlanDistribution { mu, sigma }
}

fn shift_sequence(seq: &Array2<f64>) -> Array2<f64> {
    let h = seq.nrows();
    let mut out = Array2::zeros((h, 4));
    for t in 0..h - 1 {
        for j in 0..4 {
            out[(t, j)] = seq[(t + 1, j)];
        }
    }
    out
}

/// Temporally correlated unit-variance noise: each column is synthesized in
/// the frequency domain with amplitude k^(-beta/2) on harmonic k (the DC
/// term carries the first harmonic's amplitude), then rescaled so every
/// time step has exactly unit variance. beta = 0 degenerates to white
/// noise; larger beta concentrates power in slow components.
pub fn colored_noise(beta: f64, h: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut out = Array2::zeros((h, 4));
    if h == 1 {
        for j in 0..4 {
            out[(0, j)] = StandardNormal.sample(rng);
        }
        return out;
    }
    let n_pairs = (h - 1) / 2; // full cos/sin harmonics
    let nyquist = h % 2 == 0;
    let mut total_var = 1.0; // DC at the first harmonic's amplitude
    let mut amp = Vec::with_capacity(n_pairs);
    for k in 1..=n_pairs {
        let a = (k as f64).powf(-beta / 2.0);
        amp.push(a);
        total_var += a * a;
    }
    let amp_ny = if nyquist { ((h / 2) as f64).powf(-beta / 2.0) } else { 0.0 };
    total_var += amp_ny * amp_ny;
    let scale = total_var.sqrt().recip();

    let w = std::f64::consts::TAU / h as f64;
    for j in 0..4 {
        let dc: f64 = StandardNormal.sample(rng);
        for t in 0..h {
            out[(t, j)] = dc;
        }
        for (k, &a) in amp.iter().enumerate() {
            let ca: f64 = StandardNormal.sample(rng);
            let cb: f64 = StandardNormal.sample(rng);
            let wk = w * (k + 1) as f64;
            for t in 0..h {
                let th = wk * t as f64;
                out[(t, j)] += a * (ca * th.cos() + cb * th.sin());
            }
        }
        if nyquist {
            let cn: f64 = StandardNormal.sample(rng);
            for t in 0..h {
                // cos(pi t) over integer t alternates sign.
                let s = if t % 2 == 0 { 1.0 } else { -1.0 };
                out[(t, j)] += amp_ny * cn * s;
            }
        }
        for t in 0..h {
            out[(t, j)] *= scale;
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct PlanDiag {
    /// Best elite return after each iteration.
    pub iter_best: Vec<f64>,
    /// Candidates dropped for non-finite returns.
    pub excluded: usize,
    pub elapsed: Duration,
}

/// One receding-horizon optimization: K iterations of sample / evaluate /
/// select / update. `carried` holds (already shifted) elite proto-sequences
/// from the previous planning call; `evaluate` maps candidate
/// proto-sequences to discounted returns, flagging divergence with
/// non-finite values. Returns the new elite set (best first) and the first
/// discrete action of the best elite.
pub fn optimize(
    dist: &mut PlanDistribution,
    carried: &[Array2<f64>],
    cfg: &IcemConfig,
    rng: &mut ChaCha8Rng,
    mut evaluate: impl FnMut(&[Array2<f64>]) -> Result<Vec<f64>>,
) -> Result<(Vec<Array2<f64>>, Action, PlanDiag)> {
    cfg.validate()?;
    dist.validate()?;
    let start = Instant::now();
    let h = cfg.horizon;
    let n_reuse = cfg.n_reuse();
    let mut reused: Vec<Array2<f64>> = carried.iter().take(n_reuse).cloned().collect();
    let mut diag = PlanDiag::default();
    let mut elites: Vec<(f64, Array2<f64>)> = Vec::new();

    for iter in 0..cfg.iters {
        let mut cands: Vec<Array2<f64>> = Vec::with_capacity(cfg.n_pop + reused.len());
        for _ in 0..cfg.n_pop {
            let noise = colored_noise(cfg.beta, h, rng);
            let mut c = &dist.mu + &(&dist.sigma * &noise);
            c.mapv_inplace(|v| v.clamp(-1.0, 1.0));
            cands.push(c);
        }
        cands.extend(reused.iter().cloned());

        let returns = evaluate(&cands)?;
        if returns.len() != cands.len() {
            return Err(Error::Config(format!(
                "planner evaluator returned {} values for {} candidates",
                returns.len(),
                cands.len()
            )));
        }
        let mut order: Vec<usize> = (0..cands.len()).filter(|&i| returns[i].is_finite()).collect();
        diag.excluded += cands.len() - order.len();
        if order.is_empty() {
            return Err(Error::NonFinite(format!(
                "planner iteration {iter}: every rollout in a population of {} diverged",
                cands.len()
            )));
        }
        // Deterministic ranking: descending return, sample index breaks ties.
        order.sort_by(|&a, &b| {
            returns[b].partial_cmp(&returns[a]).expect("finite returns").then(a.cmp(&b))
        });
        order.truncate(cfg.n_elites);
        elites = order.iter().map(|&i| (returns[i], cands[i].clone())).collect();
        diag.iter_best.push(elites[0].0);

        // Elite mean/std, blended into the previous distribution.
        let ne = elites.len() as f64;
        let mut mean = Array2::<f64>::zeros((h, 4));
        for (_, e) in &elites {
            mean += e;
        }
        mean /= ne;
        let mut var = Array2::<f64>::zeros((h, 4));
        for (_, e) in &elites {
            let d = e - &mean;
            var += &(&d * &d);
        }
        var /= ne;
        let std = var.mapv(|v| v.sqrt().max(1e-6));
        dist.mu = &dist.mu * cfg.alpha + &mean * (1.0 - cfg.alpha);
        dist.mu.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        dist.sigma = &dist.sigma * cfg.alpha + &std * (1.0 - cfg.alpha);

        reused = elites.iter().take(n_reuse).map(|(_, e)| e.clone()).collect();
    }

    let best = &elites[0].1;
    let first =
        discretize(best.row(0).as_slice().expect("row-major candidate sequences"));
    let elite_seqs = elites.into_iter().map(|(_, e)| e).collect();
    diag.elapsed = start.elapsed();
    Ok((elite_seqs, first, diag))
}

/// Receding-horizon controller over the learned model. Rollouts run in f32
/// with the whole population batched per tick; rewards use the planner
/// flag set (tracking and action terms, no pose shaping or bonuses) unless
/// configured otherwise.
pub struct Planner {
    pub cfg: IcemConfig,
    rcfg: RewardConfig,
    model: Arc<DynModel>,
    net32: NetF32,
    chain: KinematicChain,
    ws: Workspace,
    dist: PlanDistribution,
    carried: Vec<Array2<f64>>,
    rng: ChaCha8Rng,
    fresh: bool,
}

impl Planner {
    pub fn new(
        model: Arc<DynModel>,
        chain: KinematicChain,
        ws: Workspace,
        rcfg: RewardConfig,
        cfg: IcemConfig,
        seed: u64,
    ) -> Result<Planner> {
        cfg.validate()?;
        rcfg.validate()?;
        let net32 = NetF32::from_net(&model.net);
        let dist = PlanDistribution::init(cfg.horizon, cfg.sigma0);
        Ok(Planner {
            cfg,
            rcfg,
            model,
            net32,
            chain,
            ws,
            dist,
            carried: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            fresh: true,
        })
    }

    /// Drop carry-over state at an episode boundary.
    pub fn reset(&mut self) {
        self.dist = PlanDistribution::init(self.cfg.horizon, self.cfg.sigma0);
        self.carried.clear();
        self.fresh = true;
    }

    pub fn dist(&self) -> &PlanDistribution {
        &self.dist
    }

    /// Plan from the current model state and return the action to execute.
    pub fn plan(
        &mut self,
        win: &ModelWindow,
        prev_action: Action,
        target_q: &Joints,
    ) -> Result<(Action, PlanDiag)> {
        if self.fresh {
            self.fresh = false;
        } else {
            self.dist = shift_distribution(&self.dist, self.cfg.sigma0);
            for seq in &mut self.carried {
                *seq = shift_sequence(seq);
            }
        }
        let target_pose = forward_kinematics(&self.chain, target_q);
        let target_yp = yaw_pitch(&target_pose);
        let h = self.cfg.horizon;
        let repeat = self.cfg.action_repeat;
        let gammas: Vec<f64> = (0..h).map(|i| self.cfg.gamma.powi(i as i32)).collect();
        let model = self.model.clone();
        let net32 = &self.net32;
        let chain = &self.chain;
        let ws = &self.ws;
        let rcfg = &self.rcfg;

        let evaluate = |cands: &[Array2<f64>]| -> Result<Vec<f64>> {
            let n = cands.len();
            let mut bw = BatchWindowF32::replicate(&model, win, n);
            let mut returns = vec![0.0f64; n];
            let mut prev: Vec<Action> = vec![prev_action; n];
            let mut am = Array2::<f32>::zeros((n, 4));
            for step in 0..h {
                let mut acts: Vec<Action> = Vec::with_capacity(n);
                for (i, c) in cands.iter().enumerate() {
                    let a = discretize(c.row(step).as_slice().expect("row-major sequence"));
                    for j in 0..4 {
                        am[(i, j)] = a[j] as f32;
                    }
                    acts.push(a);
                }
                for _ in 0..repeat {
                    bw.step(net32, &am);
                }
                for (i, ret) in returns.iter_mut().enumerate() {
                    let q: Joints = [
                        bw.q[(i, 0)] as f64,
                        bw.q[(i, 1)] as f64,
                        bw.q[(i, 2)] as f64,
                        bw.q[(i, 3)] as f64,
                    ];
                    let pose = forward_kinematics(chain, &q);
                    let r = reward(
                        rcfg,
                        ws,
                        &q,
                        &pose,
                        target_q,
                        &target_pose,
                        &target_yp,
                        &acts[i],
                        &prev[i],
                    );
                    *ret += gammas[step] * r.total;
                    prev[i] = acts[i];
                }
            }
            Ok(returns)
        };

        let (elites, action, diag) =
            optimize(&mut self.dist, &self.carried.clone(), &self.cfg, &mut self.rng, evaluate)?;
        self.carried = elites;
        Ok((action, diag))
    }
}

/// Per-call planner diagnostics as CSV (call, iteration, best elite return,
/// call wall-time in ms on the iteration-0 row).
pub fn write_plan_diag_csv(path: &std::path::Path, diags: &[PlanDiag]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("planner diagnostics csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["call", "iteration", "elite_return", "elapsed_ms"]).map_err(csv_err)?;
    for (c, d) in diags.iter().enumerate() {
        for (i, best) in d.iter_best.iter().enumerate() {
            let ms = if i == 0 {
                format!("{:.3}", d.elapsed.as_secs_f64() * 1e3)
            } else {
                String::new()
            };
            w.write_record([c.to_string(), i.to_string(), best.to_string(), ms])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
