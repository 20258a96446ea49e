//! On-policy RL for the reaching task: clipped-surrogate objective,
//! generalized advantage estimation, tanh-squashed Gaussian proto-actions,
//! and the three-level discretization at the environment boundary.
//!
//! The actor emits mean and log-std per proto-action dimension; log-std is
//! clamped to [-5, 2]. Episodes are timeout-only, so every unroll tail and
//! every episode boundary bootstraps from the critic.

use crate::autodiff::{softplus, Tape};
use crate::dynmodel::DynModel;
use crate::env::{EpisodeSpec, RewardConfig, VecEnv};
use crate::kinematics::{KinematicChain, Workspace};
use crate::modelio::{load_params, save_params};
use crate::nn::{Adam, Net, NetSpec};
use crate::{Action, Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Per-component three-level discretization of a proto-action in [-1, 1]:
/// -1 below -0.5, +1 above +0.5, 0 in the closed middle band.
pub fn discretize(proto: &[f64]) -> Action {
    debug_assert_eq!(proto.len(), 4);
    let mut a = [0i8; 4];
    for (ai, &p) in a.iter_mut().zip(proto) {
        *ai = if p < -0.5 {
            -1
        } else if p > 0.5 {
            1
        } else {
            0
        };
    }
    a
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    /// Decision steps per collected unroll segment.
    pub unroll: usize,
    /// Unroll segments per update batch (transitions = batch_unrolls * unroll).
    pub batch_unrolls: usize,
    pub minibatches: usize,
    /// Passes over each batch.
    pub epochs: usize,
    pub n_envs: usize,
    pub total_steps: u64,
    /// Decision steps between checkpoints (0: final checkpoint only).
    pub checkpoint_every: u64,
    /// Decision steps between evaluation hook invocations (0: never).
    pub eval_every: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            lr: 3e-4,
            entropy_coef: 1e-2,
            value_coef: 0.5,
            gamma: 0.97,
            gae_lambda: 0.95,
            clip: 0.2,
            unroll: 40,
            batch_unrolls: 256,
            minibatches: 32,
            epochs: 4,
            n_envs: 32,
            total_steps: 2_000_000,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.gamma > 0.0) || !(self.gae_lambda >= 0.0) {
            return Err(Error::Config("ppo: lr, gamma must be positive".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("ppo: clip must lie in (0, 1)".into()));
        }
        if self.unroll == 0 || self.batch_unrolls == 0 || self.minibatches == 0 || self.epochs == 0
        {
            return Err(Error::Config("ppo: batch shape fields must be >= 1".into()));
        }
        if self.n_envs == 0 || self.batch_unrolls % self.n_envs != 0 {
            return Err(Error::Config(
                "ppo: batch_unrolls must be a positive multiple of n_envs".into(),
            ));
        }
        let transitions = self.batch_unrolls * self.unroll;
        if transitions % self.minibatches != 0 {
            return Err(Error::Config(format!(
                "ppo: {} transitions do not split into {} minibatches",
                transitions, self.minibatches
            )));
        }
        Ok(())
    }

    pub fn transitions_per_batch(&self) -> usize {
        self.batch_unrolls * self.unroll
    }
}

/// Actor-critic parameter pair. The actor's output concatenates the mean
/// and the raw log-std per action dimension.
pub struct Policy {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub actor: Net,
    pub critic: Net,
}

impl Policy {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Policy {
        let actor = Net::new(
            &NetSpec::Mlp {
                in_dim: obs_dim,
                hidden: actor_hidden.to_vec(),
                out_dim: 2 * act_dim,
            },
            rng,
        );
        let critic = Net::new(
            &NetSpec::Mlp { in_dim: obs_dim, hidden: critic_hidden.to_vec(), out_dim: 1 },
            rng,
        );
        Policy { obs_dim, act_dim, actor, critic }
    }

    /// Mean and clamped log-std for a batch of observations.
    pub fn dist(&self, obs: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let out = self.actor.forward(obs);
        let mean = out.slice(ndarray::s![.., 0..self.act_dim]).to_owned();
        let log_std = out
            .slice(ndarray::s![.., self.act_dim..2 * self.act_dim])
            .mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        (mean, log_std)
    }

    pub fn value(&self, obs: &Array2<f64>) -> Array1<f64> {
        self.critic.forward(obs).index_axis(Axis(1), 0).to_owned()
    }

    /// Draw pre-squash samples u ~ N(mean, std), returning (u, tanh(u),
    /// log-prob of the squashed action).
    pub fn sample(
        &self,
        obs: &Array2<f64>,
        rng: &mut impl Rng,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let (mean, log_std) = self.dist(obs);
        let mut u = mean.clone();
        for (e, &ls) in u.iter_mut().zip(log_std.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *e += ls.exp() * z;
        }
        let logp = squashed_log_prob(&u.view(), &mean.view(), &log_std.view());
        let y = u.mapv(f64::tanh);
        (u, y, logp)
    }

    /// Deterministic proto-action: tanh of the mean.
    pub fn act_deterministic(&self, obs: &Array2<f64>) -> Array2<f64> {
        let (mean, _) = self.dist(obs);
        mean.mapv(f64::tanh)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = self.actor.flatten();
        flat.extend(self.critic.flatten());
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let na = self.actor.param_count();
        self.actor.set_flat(&flat[..na]);
        self.critic.set_flat(&flat[na..]);
    }

    pub fn param_count(&self) -> usize {
        self.actor.param_count() + self.critic.param_count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hidden = |net: &Net| -> Vec<usize> {
            match net.spec() {
                NetSpec::Mlp { hidden, .. } | NetSpec::Kan { hidden, .. } => hidden,
            }
        };
        let meta = serde_json::json!({
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "actor_hidden": hidden(&self.actor),
            "critic_hidden": hidden(&self.critic),
            "log_std_clamp": [LOG_STD_MIN, LOG_STD_MAX],
        });
        save_params(path, "policy", &meta, &self.flatten())
    }

    pub fn load(path: &Path) -> Result<Policy> {
        let (header, params) = load_params(path)?;
        if header.kind != "policy" {
            return Err(Error::Format(format!(
                "expected a policy file, found kind '{}'",
                header.kind
            )));
        }
        let meta = header.meta;
        let dim = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("policy meta missing {key}")))
        };
        let hidden = |key: &str| -> Result<Vec<usize>> {
            meta.get(key)
                .and_then(|v| v.as_array())
                .map(|a| a.iter().filter_map(|x| x.as_u64()).map(|x| x as usize).collect())
                .ok_or_else(|| Error::Format(format!("policy meta missing {key}")))
        };
        let obs_dim = dim("obs_dim")?;
        let act_dim = dim("act_dim")?;
        let actor_spec = NetSpec::Mlp {
            in_dim: obs_dim,
            hidden: hidden("actor_hidden")?,
            out_dim: 2 * act_dim,
        };
        let critic_spec =
            NetSpec::Mlp { in_dim: obs_dim, hidden: hidden("critic_hidden")?, out_dim: 1 };
        let na = actor_spec.param_count();
        let nc = critic_spec.param_count();
        if params.len() != na + nc {
            return Err(Error::Format(format!(
                "policy file holds {} params, specs need {}",
                params.len(),
                na + nc
            )));
        }
        Ok(Policy {
            obs_dim,
            act_dim,
            actor: Net::from_flat(&actor_spec, &params[..na]),
            critic: Net::from_flat(&critic_spec, &params[na..]),
        })
    }
}

/// Log-density of the tanh-squashed Gaussian at tanh(u), one row per sample:
/// Gaussian log-density of u minus the log-determinant of the squash,
/// sum_j log(1 - tanh(u_j)^2) expressed through softplus for stability.
pub fn squashed_log_prob(
    u: &ArrayView2<f64>,
    mean: &ArrayView2<f64>,
    log_std: &ArrayView2<f64>,
) -> Array1<f64> {
    let n = u.nrows();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let mut lp = 0.0;
        for j in 0..u.ncols() {
            let ls = log_std[(i, j)];
            let z = (u[(i, j)] - mean[(i, j)]) * (-ls).exp();
            lp += -0.5 * z * z - ls - 0.5 * LN_2PI;
            lp -= tanh_log_det(u[(i, j)]);
        }
        out[i] = lp;
    }
    out
}

/// log(1 - tanh(u)^2) = 2(ln 2 - u - softplus(-2u)).
fn tanh_log_det(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Generalized advantage estimation over a (T, N) unroll block.
///
/// `next_values[t]` is the critic value of the state after step t — the
/// next row's state, the post-step state at the unroll tail, or the
/// pre-reset final state where `cuts[t]` marks an episode boundary. Cuts
/// stop the advantage recursion; the boundary transition itself still
/// bootstraps (episodes end by timeout, never in a terminal state).
pub fn gae_advantages(
    rewards: &ArrayView2<f64>,
    values: &ArrayView2<f64>,
    next_values: &ArrayView2<f64>,
    cuts: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (t_len, n) = rewards.dim();
    assert_eq!(values.dim(), (t_len, n));
    assert_eq!(next_values.dim(), (t_len, n));
    assert_eq!(cuts.len(), t_len);
    let mut adv = Array2::zeros((t_len, n));
    let mut carry = vec![0.0; n];
    for t in (0..t_len).rev() {
        for e in 0..n {
            let delta = rewards[(t, e)] + gamma * next_values[(t, e)] - values[(t, e)];
            let tail = if cuts[t] { 0.0 } else { carry[e] };
            carry[e] = delta + gamma * lambda * tail;
            adv[(t, e)] = carry[e];
        }
    }
    let ret = &adv + values;
    (adv, ret)
}

/// In-place normalization to zero mean, unit std (std floor guards
/// degenerate batches).
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// One minibatch of flattened transitions.
pub struct MiniBatch<'a> {
    pub obs: ArrayView2<'a, f64>,
    pub u: ArrayView2<'a, f64>,
    pub log_prob_old: ArrayView1<'a, f64>,
    pub advantages: ArrayView1<'a, f64>,
    pub returns: ArrayView1<'a, f64>,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Clipped-surrogate PPO loss with value and entropy terms; returns the
/// loss statistics and the gradient with respect to [actor | critic]
/// flattened parameters.
pub fn loss_and_grad(
    policy: &Policy,
    batch: &MiniBatch,
    cfg: &PpoConfig,
) -> Result<(LossStats, Vec<f64>)> {
    let m = batch.obs.nrows();
    let a = policy.act_dim;
    let mut tape = Tape::new();
    let actor_vars = policy.actor.register(&mut tape);
    let critic_vars = policy.critic.register(&mut tape);

    let obs = tape.constant(batch.obs.to_owned());
    let u = tape.constant(batch.u.to_owned());
    let adv = tape.constant(batch.advantages.to_owned().insert_axis(Axis(1)));
    let ret = tape.constant(batch.returns.to_owned().insert_axis(Axis(1)));
    let logp_old = tape.constant(batch.log_prob_old.to_owned().insert_axis(Axis(1)));

    // Actor head: mean and clamped log-std.
    let out = policy.actor.forward_on_tape(&mut tape, &actor_vars, obs);
    let mean = tape.slice_cols(out, 0, a);
    let log_std_raw = tape.slice_cols(out, a, 2 * a);
    let log_std = tape.clamp(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);

    // Gaussian log-density of the stored pre-squash samples.
    let neg_log_std = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg_log_std);
    let du = tape.sub(u, mean);
    let z = tape.mul(du, inv_std);
    let z2 = tape.mul(z, z);
    let z2h = tape.scale(z2, -0.5);
    let per_dim = tape.sub(z2h, log_std);
    let gauss_rows = tape.sum_rows(per_dim);
    let gauss = tape.add_const(gauss_rows, -(a as f64) * 0.5 * LN_2PI);

    // Squash correction depends only on the stored samples — a constant
    // column on the tape.
    let mut corr = Array2::zeros((m, 1));
    for i in 0..m {
        for j in 0..a {
            corr[(i, 0)] += tanh_log_det(batch.u[(i, j)]);
        }
    }
    let corr_mean = corr.sum() / m as f64;
    let corr = tape.constant(corr);
    let logp = tape.sub(gauss, corr);

    // Clipped surrogate.
    let dlogp = tape.sub(logp, logp_old);
    let ratio = tape.exp(dlogp);
    let s1 = tape.mul(ratio, adv);
    let ratio_clip = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = tape.mul(ratio_clip, adv);
    let surrogate = tape.min(s1, s2);
    let surrogate_mean = tape.mean_all(surrogate);
    let policy_loss = tape.scale(surrogate_mean, -1.0);

    // Value regression.
    let v = policy.critic.forward_on_tape(&mut tape, &critic_vars, obs);
    let dv = tape.sub(v, ret);
    let dv2 = tape.mul(dv, dv);
    let dv2_mean = tape.mean_all(dv2);
    let value_loss = tape.scale(dv2_mean, 0.5);

    // Entropy of the squashed distribution: Gaussian entropy plus the mean
    // stored squash correction (constant with respect to parameters).
    let ls_rows = tape.sum_rows(log_std);
    let ls_mean = tape.mean_all(ls_rows);
    let entropy =
        tape.add_const(ls_mean, (a as f64) * 0.5 * (LN_2PI + 1.0) + corr_mean);

    let weighted_v = tape.scale(value_loss, cfg.value_coef);
    let weighted_e = tape.scale(entropy, -cfg.entropy_coef);
    let pv = tape.add(policy_loss, weighted_v);
    let total = tape.add(pv, weighted_e);

    let total_val = tape.scalar(total);
    if !total_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "ppo loss (policy {}, value {}, entropy {})",
            tape.scalar(policy_loss),
            tape.scalar(value_loss),
            tape.scalar(entropy)
        )));
    }

    let grads = tape.backward(total);
    let mut grad = policy.actor.grad_flat(&grads, &actor_vars);
    grad.extend(policy.critic.grad_flat(&grads, &critic_vars));

    let mut clipped = 0usize;
    let mut kl = 0.0;
    let ratio_vals = tape.value(ratio);
    let dlogp_vals = tape.value(dlogp);
    for i in 0..m {
        if (ratio_vals[(i, 0)] - 1.0).abs() > cfg.clip {
            clipped += 1;
        }
        kl -= dlogp_vals[(i, 0)];
    }
    let stats = LossStats {
        total: total_val,
        policy: tape.scalar(policy_loss),
        value: tape.scalar(value_loss),
        entropy: tape.scalar(entropy),
        clip_fraction: clipped as f64 / m as f64,
        approx_kl: kl / m as f64,
    };
    Ok((stats, grad))
}

/// A collected update batch in flattened transition order.
pub struct RolloutBatch {
    pub obs: Array2<f64>,
    pub u: Array2<f64>,
    pub log_prob_old: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

/// Shuffled minibatch passes over one batch; Adam state persists across
/// calls. Returns stats averaged over all minibatch updates.
pub fn ppo_update(
    policy: &mut Policy,
    adam: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<LossStats> {
    let t_total = batch.obs.nrows();
    let mb_size = t_total / cfg.minibatches;
    let mut order: Vec<usize> = (0..t_total).collect();
    let mut acc = LossStats::default();
    let mut updates = 0usize;
    let mut params = policy.flatten();
    for _ in 0..cfg.epochs {
        // Fisher-Yates with the caller's stream.
        for i in (1..t_total).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for mb in 0..cfg.minibatches {
            let idx = &order[mb * mb_size..(mb + 1) * mb_size];
            let mut obs = Array2::zeros((mb_size, policy.obs_dim));
            let mut u = Array2::zeros((mb_size, policy.act_dim));
            let mut logp = Array1::zeros(mb_size);
            let mut adv = Array1::zeros(mb_size);
            let mut ret = Array1::zeros(mb_size);
            for (r, &src) in idx.iter().enumerate() {
                obs.row_mut(r).assign(&batch.obs.row(src));
                u.row_mut(r).assign(&batch.u.row(src));
                logp[r] = batch.log_prob_old[src];
                adv[r] = batch.advantages[src];
                ret[r] = batch.returns[src];
            }
            let mini = MiniBatch {
                obs: obs.view(),
                u: u.view(),
                log_prob_old: logp.view(),
                advantages: adv.view(),
                returns: ret.view(),
            };
            let (stats, grad) = loss_and_grad(policy, &mini, cfg)?;
            adam.step(&mut params, &grad);
            policy.set_flat(&params);
            acc.total += stats.total;
            acc.policy += stats.policy;
            acc.value += stats.value;
            acc.entropy += stats.entropy;
            acc.clip_fraction += stats.clip_fraction;
            acc.approx_kl += stats.approx_kl;
            updates += 1;
        }
    }
    let k = updates as f64;
    acc.total /= k;
    acc.policy /= k;
    acc.value /= k;
    acc.entropy /= k;
    acc.clip_fraction /= k;
    acc.approx_kl /= k;
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CurvePoint {
    pub steps: u64,
    /// Mean total return of episodes completed during this iteration
    /// (episodes outlast iterations, so early rows may be empty).
    pub mean_return: Option<f64>,
    /// Success rate from the evaluation hook, where it ran.
    pub success_rate: Option<f64>,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("curve csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["steps", "mean_return", "success_rate"]).map_err(csv_err)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in curve {
        w.write_record([p.steps.to_string(), fmt(p.mean_return), fmt(p.success_rate)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Periodic evaluation callback: (policy, steps so far) -> success rate.
pub type EvalHook<'a> = dyn FnMut(&Policy, u64) -> Result<f64> + 'a;

pub struct TrainOut {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    pub stats: Vec<LossStats>,
}

/// The full training loop against the learned-model backend. Deterministic
/// given the seed: policy init, episode sampling, action noise, and
/// minibatch shuffling run on fixed derived streams.
#[allow(clippy::too_many_arguments)]
pub fn train_ppo(
    model: Arc<DynModel>,
    chain: KinematicChain,
    ws: Workspace,
    rcfg: RewardConfig,
    cfg: &PpoConfig,
    actor_hidden: &[usize],
    critic_hidden: &[usize],
    seed: u64,
    checkpoint_dir: Option<&Path>,
    mut eval_hook: Option<&mut EvalHook>,
) -> Result<TrainOut> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(1);
    let mut env_seed_rng = ChaCha8Rng::seed_from_u64(seed);
    env_seed_rng.set_stream(2);
    let mut act_rng = ChaCha8Rng::seed_from_u64(seed);
    act_rng.set_stream(3);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(4);

    let mut venv = VecEnv::sampled(
        model.clone(),
        chain,
        ws,
        rcfg,
        cfg.n_envs,
        env_seed_rng.random::<u64>(),
    )?;
    let obs_dim = venv.obs_dim();
    let mut policy = Policy::new(obs_dim, 4, actor_hidden, critic_hidden, &mut init_rng);
    let mut adam = Adam::new(cfg.lr, policy.param_count());

    let rounds = cfg.batch_unrolls / cfg.n_envs;
    let t_total = cfg.transitions_per_batch();
    let mut batch = RolloutBatch {
        obs: Array2::zeros((t_total, obs_dim)),
        u: Array2::zeros((t_total, 4)),
        log_prob_old: Array1::zeros(t_total),
        advantages: Array1::zeros(t_total),
        returns: Array1::zeros(t_total),
    };

    let mut steps: u64 = 0;
    let mut curve = Vec::new();
    let mut all_stats = Vec::new();
    let mut obs = venv.observe();
    let mut ep_return = vec![0.0; cfg.n_envs];
    let mut next_checkpoint = cfg.checkpoint_every;
    let mut next_eval = cfg.eval_every;

    while steps < cfg.total_steps {
        let mut completed_returns: Vec<f64> = Vec::new();
        let mut row = 0usize;
        for _ in 0..rounds {
            let mut rewards = Array2::zeros((cfg.unroll, cfg.n_envs));
            let mut values = Array2::zeros((cfg.unroll, cfg.n_envs));
            let mut next_values = Array2::zeros((cfg.unroll, cfg.n_envs));
            let mut cuts = vec![false; cfg.unroll];
            let round_base = row;
            for t in 0..cfg.unroll {
                let (u, y, logp) = policy.sample(&obs, &mut act_rng);
                let vals = policy.value(&obs);
                let actions: Vec<Action> = (0..cfg.n_envs)
                    .map(|e| {
                        discretize(y.row(e).as_slice().expect("row-major proto-actions"))
                    })
                    .collect();
                for e in 0..cfg.n_envs {
                    batch.obs.row_mut(row + e).assign(&obs.row(e));
                    batch.u.row_mut(row + e).assign(&u.row(e));
                    batch.log_prob_old[row + e] = logp[e];
                    values[(t, e)] = vals[e];
                }
                let out = venv.step(&actions)?;
                for e in 0..cfg.n_envs {
                    rewards[(t, e)] = out.rewards[e];
                    ep_return[e] += out.rewards[e];
                }
                steps += cfg.n_envs as u64;
                if out.done {
                    cuts[t] = true;
                    let fin = out.final_obs.expect("done step carries final obs");
                    let fin_vals = policy.value(&fin);
                    for e in 0..cfg.n_envs {
                        next_values[(t, e)] = fin_vals[e];
                        completed_returns.push(ep_return[e]);
                        ep_return[e] = 0.0;
                    }
                }
                obs = venv.observe();
                row += cfg.n_envs;
            }
            let tail_vals = policy.value(&obs);
            for t in 0..cfg.unroll {
                if cuts[t] {
                    continue;
                }
                if t + 1 < cfg.unroll {
                    for e in 0..cfg.n_envs {
                        next_values[(t, e)] = values[(t + 1, e)];
                    }
                } else {
                    for e in 0..cfg.n_envs {
                        next_values[(t, e)] = tail_vals[e];
                    }
                }
            }
            let (adv, ret) = gae_advantages(
                &rewards.view(),
                &values.view(),
                &next_values.view(),
                &cuts,
                cfg.gamma,
                cfg.gae_lambda,
            );
            for t in 0..cfg.unroll {
                for e in 0..cfg.n_envs {
                    let r = round_base + t * cfg.n_envs + e;
                    batch.advantages[r] = adv[(t, e)];
                    batch.returns[r] = ret[(t, e)];
                }
            }
        }
        normalize_advantages(batch.advantages.as_slice_mut().expect("contiguous advantages"));

        let stats = ppo_update(&mut policy, &mut adam, &batch, cfg, &mut shuffle_rng)?;
        all_stats.push(stats);

        let mean_return = if completed_returns.is_empty() {
            None
        } else {
            Some(completed_returns.iter().sum::<f64>() / completed_returns.len() as f64)
        };
        let mut sr = None;
        if let Some(hook) = eval_hook.as_deref_mut() {
            if cfg.eval_every > 0 && steps >= next_eval {
                sr = Some(hook(&policy, steps)?);
                next_eval += cfg.eval_every;
            }
        }
        curve.push(CurvePoint { steps, mean_return, success_rate: sr });

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && steps >= next_checkpoint {
                policy.save(&dir.join(format!("policy_step{steps}.bin")))?;
                next_checkpoint += cfg.checkpoint_every;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        policy.save(&dir.join("policy_final.bin"))?;
    }
    Ok(TrainOut { policy, curve, stats: all_stats })
}

/// Run the deterministic policy over a fixed episode list on the learned
/// model and count episodes with at least one post-repeat state inside both
/// thresholds (position distance, absolute wrapped pitch error). A cheap
/// probe for training curves; full per-tick evaluation lives elsewhere.
pub fn success_probe(
    policy: &Policy,
    model: Arc<DynModel>,
    chain: &KinematicChain,
    ws: &Workspace,
    rcfg: &RewardConfig,
    episodes: &[EpisodeSpec],
    eps_p: f64,
    eps_alpha: f64,
) -> Result<f64> {
    use crate::kinematics::{euclidean_distance, forward_kinematics, wrap_angle, yaw_pitch};
    let mut venv =
        VecEnv::fixed(model, chain.clone(), ws.clone(), rcfg.clone(), episodes.to_vec())?;
    let targets: Vec<_> = episodes.iter().map(|ep| ep.target_pose(chain)).collect();
    let target_yps: Vec<_> = targets.iter().map(yaw_pitch).collect();
    let mut hit = vec![false; episodes.len()];
    loop {
        let obs = venv.observe();
        let y = policy.act_deterministic(&obs);
        let actions: Vec<Action> = (0..episodes.len())
            .map(|e| discretize(y.row(e).as_slice().expect("row-major proto-actions")))
            .collect();
        let out = venv.step(&actions)?;
        for (e, h) in hit.iter_mut().enumerate() {
            if *h {
                continue;
            }
            let q = venv.q(e);
            let pose = forward_kinematics(chain, &q);
            let d = euclidean_distance(&targets[e].p, &pose.p);
            let pitch_err = wrap_angle(yaw_pitch(&pose).pitch - target_yps[e].pitch).abs();
            if d < eps_p && pitch_err < eps_alpha {
                *h = true;
            }
        }
        if out.done {
            break;
        }
    }
    Ok(hit.iter().filter(|h| **h).count() as f64 / episodes.len() as f64)
}
