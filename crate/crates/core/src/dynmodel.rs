//! Residual dynamics models of the arm and their training.
//!
//! A model predicts the next joint configuration from a window of recent
//! signals and commands. Two variants share one recursion:
//!
//! - position residual: q_{t+1} = q_t + f(x) — the signal window holds
//!   normalized positions;
//! - velocity residual: qd_t = qd_{t-1} + f(x), q_{t+1} = q_t + dt*qd_t —
//!   the signal window holds normalized velocity estimates.
//!
//! The input x stacks the k+1 most recent *available* signal values (those
//! come from measurements/tracker estimates until the model starts predicting,
//! then from its own predictions), the k+1 most recent commands including the
//! one being applied, and the current normalized configuration (deliberately
//! redundant with the window's last entry for the position variant).
//!
//! Training unrolls this recursion H steps and backpropagates the mean
//! squared position error through the entire unroll, including the feedback
//! of predictions into later inputs.

use crate::autodiff::{Tape, Var};
use crate::dataset::Dataset;
use crate::modelio;
use crate::nn::{Adam, Net, NetF32, NetSpec};
use crate::observer::{
    build_state_vector_into, minmax, minmax4, state_dim, LoopTracker, NormBounds,
};
use crate::{Action, Error, Joints, Result};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictKind {
    /// Position residual.
    DeltaQ,
    /// Velocity residual, integrated at dt.
    DeltaQd,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ParamFamily {
    Mlp { hidden: Vec<usize> },
    Kan { hidden: Vec<usize>, degree: usize },
}

impl ParamFamily {
    pub fn net_spec(&self, k: usize) -> NetSpec {
        let in_dim = state_dim(k);
        match self {
            ParamFamily::Mlp { hidden } => {
                NetSpec::Mlp { in_dim, hidden: hidden.clone(), out_dim: 4 }
            }
            ParamFamily::Kan { hidden, degree } => {
                NetSpec::Kan { in_dim, hidden: hidden.clone(), out_dim: 4, degree: *degree }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynSpec {
    pub predict: PredictKind,
    pub arch: ParamFamily,
    /// Lag depth: the input window holds k+1 entries.
    pub k: usize,
    /// Training unroll length.
    pub horizon: usize,
    pub lr: f64,
    pub batch: usize,
    pub dt: f64,
    /// Position normalization range (the joint limits).
    pub q_min: Joints,
    pub q_max: Joints,
}

impl DynSpec {
    /// Position-residual MLP defaults that worked well in our experiments.
    pub fn mlp_delta_q() -> DynSpec {
        DynSpec {
            predict: PredictKind::DeltaQ,
            arch: ParamFamily::Mlp { hidden: vec![128, 128] },
            k: 18,
            horizon: 8,
            lr: 1e-3,
            batch: 512,
            dt: crate::plant::DT,
            q_min: crate::kinematics::KinematicChain::default().q_min,
            q_max: crate::kinematics::KinematicChain::default().q_max,
        }
    }

    pub fn kan_delta_q() -> DynSpec {
        DynSpec {
            arch: ParamFamily::Kan { hidden: vec![32, 16, 32], degree: 5 },
            lr: 1e-5,
            batch: 1024,
            ..DynSpec::mlp_delta_q()
        }
    }

    pub fn mlp_delta_qd() -> DynSpec {
        DynSpec {
            predict: PredictKind::DeltaQd,
            arch: ParamFamily::Mlp { hidden: vec![512, 128] },
            horizon: 16,
            lr: 1e-3,
            batch: 256,
            ..DynSpec::mlp_delta_q()
        }
    }

    pub fn kan_delta_qd() -> DynSpec {
        DynSpec {
            predict: PredictKind::DeltaQd,
            arch: ParamFamily::Kan { hidden: vec![32, 32, 16], degree: 5 },
            horizon: 16,
            lr: 1e-4,
            batch: 512,
            ..DynSpec::mlp_delta_q()
        }
    }

    pub fn net_spec(&self) -> NetSpec {
        self.arch.net_spec(self.k)
    }

    pub fn state_dim(&self) -> usize {
        state_dim(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("dyn spec: horizon must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("dyn spec: lr must be > 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("dyn spec: batch must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dyn spec: dt must be > 0".into()));
        }
        for j in 0..4 {
            if !(self.q_min[j] < self.q_max[j]) {
                return Err(Error::Config(format!("dyn spec: q bounds invalid at joint {j}")));
            }
        }
        if let ParamFamily::Kan { degree, .. } = self.arch {
            if degree == 0 {
                return Err(Error::Config("dyn spec: KAN basis degree must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// One session preprocessed for training: tracker velocity estimates and the
/// 90/10 split point (train rows come first, from the first sample).
#[derive(Clone, Debug)]
pub struct TrajData {
    pub q: Vec<Joints>,
    pub qd: Vec<Joints>,
    pub a: Vec<Action>,
    pub train_end: usize,
}

impl TrajData {
    pub fn from_dataset(ds: &Dataset) -> TrajData {
        let mut tracker = LoopTracker::default();
        let qd = ds.q.iter().map(|q| tracker.update(q)).collect();
        let train_end = (ds.len() as f64 * 0.9).floor() as usize;
        TrajData { q: ds.q.clone(), qd, a: ds.a.clone(), train_end }
    }
}

pub fn prepare_trajectories(datasets: &[Dataset]) -> Vec<TrajData> {
    datasets.iter().map(TrajData::from_dataset).collect()
}

/// Velocity normalization bounds measured over the training rows;
/// degenerate ranges are widened so normalization stays well-defined.
pub fn measure_qd_bounds(trajs: &[TrajData]) -> (Joints, Joints) {
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for traj in trajs {
        for qd in &traj.qd[..traj.train_end] {
            for j in 0..4 {
                lo[j] = lo[j].min(qd[j]);
                hi[j] = hi[j].max(qd[j]);
            }
        }
    }
    for j in 0..4 {
        if !lo[j].is_finite() || !hi[j].is_finite() || hi[j] - lo[j] < 1e-9 {
            lo[j] = -1.0;
            hi[j] = 1.0;
        }
    }
    (lo, hi)
}

#[derive(Clone, Debug)]
pub struct DynModel {
    pub spec: DynSpec,
    pub net: Net,
    pub bounds: NormBounds,
}

impl DynModel {
    pub fn new(spec: DynSpec, bounds: NormBounds, rng: &mut impl Rng) -> Result<DynModel> {
        spec.validate()?;
        bounds.validate()?;
        let net = Net::new(&spec.net_spec(), rng);
        Ok(DynModel { spec, net, bounds })
    }

    /// Normalize a raw signal entry for the window: positions for the
    /// position-residual variant, velocities for the velocity-residual one.
    pub fn sig_norm(&self, raw: &Joints) -> Joints {
        match self.spec.predict {
            PredictKind::DeltaQ => minmax4(raw, &self.bounds.q_min, &self.bounds.q_max),
            PredictKind::DeltaQd => minmax4(raw, &self.bounds.qd_min, &self.bounds.qd_max),
        }
    }

    pub fn q_norm(&self, q: &Joints) -> Joints {
        minmax4(q, &self.bounds.q_min, &self.bounds.q_max)
    }

    /// One step of the shared recursion on explicit state.
    pub fn predict_next(&self, x: &[f64], q: &Joints, qd_prev: &Joints) -> (Joints, Joints) {
        assert_eq!(x.len(), self.spec.state_dim(), "state vector dimension mismatch");
        let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        let f = self.net.forward(&xa);
        let mut q_next = *q;
        let mut qd = *qd_prev;
        match self.spec.predict {
            PredictKind::DeltaQ => {
                for j in 0..4 {
                    q_next[j] += f[(0, j)];
                }
            }
            PredictKind::DeltaQd => {
                for j in 0..4 {
                    qd[j] += f[(0, j)];
                    q_next[j] += self.spec.dt * qd[j];
                }
            }
        }
        (q_next, qd)
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "spec": self.spec,
            "bounds": self.bounds,
            "extra": extra_meta,
        });
        modelio::save_params(path, "dynmodel", &meta, &self.net.flatten())
    }

    pub fn load(path: &Path) -> Result<DynModel> {
        let (header, params) = modelio::load_params(path)?;
        if header.kind != "dynmodel" {
            return Err(Error::Format(format!(
                "expected a dynmodel file, found kind {:?}",
                header.kind
            )));
        }
        let spec: DynSpec = serde_json::from_value(header.meta["spec"].clone())
            .map_err(|e| Error::Format(format!("dynmodel spec metadata: {e}")))?;
        let bounds: NormBounds = serde_json::from_value(header.meta["bounds"].clone())
            .map_err(|e| Error::Format(format!("dynmodel bounds metadata: {e}")))?;
        spec.validate()?;
        bounds.validate()?;
        let expect = spec.net_spec().param_count();
        if params.len() != expect {
            return Err(Error::Format(format!(
                "dynmodel parameter count {} does not match architecture ({expect})",
                params.len()
            )));
        }
        let net = Net::from_flat(&spec.net_spec(), &params);
        Ok(DynModel { spec, net, bounds })
    }
}

/// Rolling single-instance window state for the shared recursion.
#[derive(Clone, Debug)]
pub struct ModelWindow {
    /// k+1 most recent normalized signal entries, oldest first.
    sig: VecDeque<Joints>,
    /// k most recent commands (the step's own command completes the block).
    act: VecDeque<Action>,
    pub q: Joints,
    pub qd: Joints,
}

impl ModelWindow {
    /// Window for a system at rest at q0: the signal history is the constant
    /// position (position variant) or zero velocity (velocity variant), and
    /// the command history is all-zero.
    pub fn at_rest(model: &DynModel, q0: &Joints) -> ModelWindow {
        let k = model.spec.k;
        let sig0 = match model.spec.predict {
            PredictKind::DeltaQ => model.sig_norm(q0),
            PredictKind::DeltaQd => model.sig_norm(&[0.0; 4]),
        };
        ModelWindow {
            sig: std::iter::repeat_n(sig0, k + 1).collect(),
            act: std::iter::repeat_n([0i8; 4], k).collect(),
            q: *q0,
            qd: [0.0; 4],
        }
    }

    /// Window seeded from recorded history: `q_hist`/`qd_hist` are the k+1
    /// samples ending at the current time, `a_hist` the k commands before it.
    pub fn from_history(
        model: &DynModel,
        q_hist: &[Joints],
        qd_hist: &[Joints],
        a_hist: &[Action],
    ) -> Result<ModelWindow> {
        let k = model.spec.k;
        if q_hist.len() != k + 1 || qd_hist.len() != k + 1 || a_hist.len() != k {
            return Err(Error::Config(format!(
                "window history lengths ({}, {}, {}) do not match k = {k}",
                q_hist.len(),
                qd_hist.len(),
                a_hist.len()
            )));
        }
        let sig = match model.spec.predict {
            PredictKind::DeltaQ => q_hist.iter().map(|q| model.sig_norm(q)).collect(),
            PredictKind::DeltaQd => qd_hist.iter().map(|qd| model.sig_norm(qd)).collect(),
        };
        Ok(ModelWindow {
            sig,
            act: a_hist.iter().copied().collect(),
            q: *q_hist.last().unwrap(),
            qd: *qd_hist.last().unwrap(),
        })
    }

    /// Assemble the model input for applying `pending` now.
    pub fn build_x(&self, pending: &Action, q_norm: &Joints, out: &mut [f64]) {
        let k1 = self.sig.len();
        debug_assert_eq!(out.len(), 8 * k1 + 4);
        let sig: Vec<Joints> = self.sig.iter().copied().collect();
        let mut act: Vec<Action> = Vec::with_capacity(k1);
        act.extend(self.act.iter().copied());
        act.push(*pending);
        build_state_vector_into(out, &sig, &act, q_norm);
    }

    /// Advance the window from an external measurement instead of the
    /// model's own prediction — used when the window tracks a real system
    /// (transfer evaluation): positions come from the plant, velocity
    /// estimates from the tracking observer.
    pub fn push_measured(&mut self, model: &DynModel, a: &Action, q_meas: &Joints, qd_est: &Joints) {
        self.act.push_back(*a);
        self.act.pop_front();
        let new_sig = match model.spec.predict {
            PredictKind::DeltaQ => model.sig_norm(q_meas),
            PredictKind::DeltaQd => model.sig_norm(qd_est),
        };
        self.sig.push_back(new_sig);
        self.sig.pop_front();
        self.q = *q_meas;
        self.qd = *qd_est;
    }

    /// Advance one step under command `a`; returns the predicted position.
    pub fn step(&mut self, model: &DynModel, a: &Action) -> Result<Joints> {
        let mut x = vec![0.0; model.spec.state_dim()];
        self.build_x(a, &model.q_norm(&self.q), &mut x);
        let (q_next, qd_next) = model.predict_next(&x, &self.q, &self.qd);
        if q_next.iter().any(|v| !v.is_finite()) || qd_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model prediction".into()));
        }
        self.act.push_back(*a);
        self.act.pop_front();
        let new_sig = match model.spec.predict {
            PredictKind::DeltaQ => model.sig_norm(&q_next),
            PredictKind::DeltaQd => model.sig_norm(&qd_next),
        };
        self.sig.push_back(new_sig);
        self.sig.pop_front();
        self.q = q_next;
        self.qd = qd_next;
        Ok(q_next)
    }
}

/// Open-loop rollout: iterate the recursion under a given command sequence.
/// A non-finite prediction aborts with the offending step index.
pub fn rollout(
    model: &DynModel,
    window: &ModelWindow,
    actions: &[Action],
) -> Result<Vec<Joints>> {
    let mut win = window.clone();
    let mut out = Vec::with_capacity(actions.len());
    for (i, a) in actions.iter().enumerate() {
        let q = win
            .step(model, a)
            .map_err(|_| Error::NonFinite(format!("rollout step {i}")))?;
        out.push(q);
    }
    Ok(out)
}

/// Batched mirror of `ModelWindow` for evaluation and planning hot paths.
/// Matrices are row-per-instance; the layout matches the scalar recursion
/// exactly (verified against it in tests).
pub struct BatchWindow {
    pub n: usize,
    k1: usize,
    sig: Array2<f64>,
    /// Full k+1 command block ending at the *previous* command; stepping
    /// shifts it left and writes the pending command into the last slot.
    act: Array2<f64>,
    pub q: Array2<f64>,
    pub qd: Array2<f64>,
    x: Array2<f64>,
}

impl BatchWindow {
    pub fn from_windows(model: &DynModel, windows: &[ModelWindow]) -> BatchWindow {
        let n = windows.len();
        let k1 = model.spec.k + 1;
        let mut sig = Array2::zeros((n, 4 * k1));
        let mut act = Array2::zeros((n, 4 * k1));
        let mut q = Array2::zeros((n, 4));
        let mut qd = Array2::zeros((n, 4));
        for (r, w) in windows.iter().enumerate() {
            debug_assert_eq!(w.sig.len(), k1);
            for (j, sigj) in w.sig.iter().enumerate() {
                for i in 0..4 {
                    sig[(r, 4 * j + i)] = sigj[i];
                }
            }
            // History occupies slots 1..k1; slot 0 shifts out before use.
            for (j, actj) in w.act.iter().enumerate() {
                for i in 0..4 {
                    act[(r, 4 * (j + 1) + i)] = actj[i] as f64;
                }
            }
            for i in 0..4 {
                q[(r, i)] = w.q[i];
                qd[(r, i)] = w.qd[i];
            }
        }
        let x = Array2::zeros((n, state_dim(model.spec.k)));
        BatchWindow { n, k1, sig, act, q, qd, x }
    }

    /// Write each instance's model input into `out` rows, as if `pending[r]`
    /// were the command applied now (the policy-observation convention: the
    /// final action slot holds the command currently in effect).
    pub fn write_x(&self, model: &DynModel, pending: &[Action], out: &mut ndarray::ArrayViewMut2<f64>) {
        let (n, k1) = (self.n, self.k1);
        debug_assert_eq!(pending.len(), n);
        debug_assert_eq!(out.dim(), (n, state_dim(model.spec.k)));
        out.slice_mut(s![.., 0..4 * k1]).assign(&self.sig);
        out.slice_mut(s![.., 4 * k1..8 * k1 - 4])
            .assign(&self.act.slice(s![.., 4..]));
        for r in 0..n {
            for i in 0..4 {
                out[(r, 8 * k1 - 4 + i)] = pending[r][i] as f64;
                out[(r, 8 * k1 + i)] =
                    minmax(self.q[(r, i)], model.bounds.q_min[i], model.bounds.q_max[i]);
            }
        }
    }

    /// Advance all instances one step; `actions` is (n x 4) in {-1,0,1}.
    pub fn step(&mut self, model: &DynModel, actions: &Array2<f64>) {
        let (n, k1) = (self.n, self.k1);
        debug_assert_eq!(actions.dim(), (n, 4));
        shift_left4(&mut self.act);
        self.act.slice_mut(s![.., 4 * (k1 - 1)..]).assign(actions);

        self.x.slice_mut(s![.., 0..4 * k1]).assign(&self.sig);
        self.x.slice_mut(s![.., 4 * k1..8 * k1]).assign(&self.act);
        for r in 0..n {
            for i in 0..4 {
                self.x[(r, 8 * k1 + i)] =
                    minmax(self.q[(r, i)], model.bounds.q_min[i], model.bounds.q_max[i]);
            }
        }

        let f = model.net.forward(&self.x);
        match model.spec.predict {
            PredictKind::DeltaQ => {
                self.q += &f;
                shift_left4(&mut self.sig);
                for r in 0..n {
                    for i in 0..4 {
                        self.sig[(r, 4 * (k1 - 1) + i)] =
                            minmax(self.q[(r, i)], model.bounds.q_min[i], model.bounds.q_max[i]);
                    }
                }
            }
            PredictKind::DeltaQd => {
                self.qd += &f;
                self.q.scaled_add(model.spec.dt, &self.qd);
                shift_left4(&mut self.sig);
                for r in 0..n {
                    for i in 0..4 {
                        self.sig[(r, 4 * (k1 - 1) + i)] = minmax(
                            self.qd[(r, i)],
                            model.bounds.qd_min[i],
                            model.bounds.qd_max[i],
                        );
                    }
                }
            }
        }
    }
}

fn shift_left4(m: &mut Array2<f64>) {
    let cols = m.ncols();
    let slice = m.as_slice_mut().expect("window matrices are standard layout");
    for row in slice.chunks_exact_mut(cols) {
        row.copy_within(4.., 0);
    }
}

fn shift_left4_f32(m: &mut ndarray::Array2<f32>) {
    let cols = m.ncols();
    let slice = m.as_slice_mut().expect("window matrices are standard layout");
    for row in slice.chunks_exact_mut(cols) {
        row.copy_within(4.., 0);
    }
}

/// Single-precision mirror of `BatchWindow` for inference hot paths
/// (planning rolls hundreds of candidates; f32 GEMM roughly doubles
/// throughput). Training and gradient checks stay in f64; the divergence
/// of this mirror is bounded by a dedicated test (<= 1e-4 over 80 steps).
pub struct BatchWindowF32 {
    pub n: usize,
    k1: usize,
    predict: PredictKind,
    dt: f32,
    q_min: [f32; 4],
    q_max: [f32; 4],
    sig_min: [f32; 4],
    sig_max: [f32; 4],
    sig: ndarray::Array2<f32>,
    act: ndarray::Array2<f32>,
    pub q: ndarray::Array2<f32>,
    pub qd: ndarray::Array2<f32>,
    x: ndarray::Array2<f32>,
}

fn minmax_f32(x: f32, lo: f32, hi: f32) -> f32 {
    let c = x.clamp(lo, hi);
    2.0 * (c - lo) / (hi - lo) - 1.0
}

impl BatchWindowF32 {
    /// Replicate one window n times (the planner expands the current state
    /// into a population).
    pub fn replicate(model: &DynModel, window: &ModelWindow, n: usize) -> BatchWindowF32 {
        let k1 = model.spec.k + 1;
        let to4 = |v: &Joints| [v[0] as f32, v[1] as f32, v[2] as f32, v[3] as f32];
        let (sig_min, sig_max) = match model.spec.predict {
            PredictKind::DeltaQ => (to4(&model.bounds.q_min), to4(&model.bounds.q_max)),
            PredictKind::DeltaQd => (to4(&model.bounds.qd_min), to4(&model.bounds.qd_max)),
        };
        let mut sig_row = vec![0f32; 4 * k1];
        for (j, sigj) in window.sig.iter().enumerate() {
            for i in 0..4 {
                sig_row[4 * j + i] = sigj[i] as f32;
            }
        }
        let mut act_row = vec![0f32; 4 * k1];
        for (j, actj) in window.act.iter().enumerate() {
            for i in 0..4 {
                act_row[4 * (j + 1) + i] = actj[i] as f32;
            }
        }
        let stack = |row: &[f32]| {
            ndarray::Array2::from_shape_fn((n, row.len()), |(_, c)| row[c])
        };
        BatchWindowF32 {
            n,
            k1,
            predict: model.spec.predict,
            dt: model.spec.dt as f32,
            q_min: to4(&model.bounds.q_min),
            q_max: to4(&model.bounds.q_max),
            sig_min,
            sig_max,
            sig: stack(&sig_row),
            act: stack(&act_row),
            q: ndarray::Array2::from_shape_fn((n, 4), |(_, c)| window.q[c] as f32),
            qd: ndarray::Array2::from_shape_fn((n, 4), |(_, c)| window.qd[c] as f32),
            x: ndarray::Array2::zeros((n, state_dim(model.spec.k))),
        }
    }

    /// Advance all instances one tick; `actions` is (n x 4) in {-1,0,1}.
    pub fn step(&mut self, net: &NetF32, actions: &ndarray::Array2<f32>) {
        let (n, k1) = (self.n, self.k1);
        debug_assert_eq!(actions.dim(), (n, 4));
        shift_left4_f32(&mut self.act);
        self.act.slice_mut(s![.., 4 * (k1 - 1)..]).assign(actions);
        self.x.slice_mut(s![.., 0..4 * k1]).assign(&self.sig);
        self.x.slice_mut(s![.., 4 * k1..8 * k1]).assign(&self.act);
        for r in 0..n {
            for i in 0..4 {
                self.x[(r, 8 * k1 + i)] = minmax_f32(self.q[(r, i)], self.q_min[i], self.q_max[i]);
            }
        }
        let f = net.forward(&self.x);
        match self.predict {
            PredictKind::DeltaQ => {
                self.q += &f;
                shift_left4_f32(&mut self.sig);
                for r in 0..n {
                    for i in 0..4 {
                        self.sig[(r, 4 * (k1 - 1) + i)] =
                            minmax_f32(self.q[(r, i)], self.q_min[i], self.q_max[i]);
                    }
                }
            }
            PredictKind::DeltaQd => {
                self.qd += &f;
                self.q.scaled_add(self.dt, &self.qd);
                shift_left4_f32(&mut self.sig);
                for r in 0..n {
                    for i in 0..4 {
                        self.sig[(r, 4 * (k1 - 1) + i)] =
                            minmax_f32(self.qd[(r, i)], self.sig_min[i], self.sig_max[i]);
                    }
                }
            }
        }
    }
}

/// A training/evaluation snippet: trajectory index and prediction start.
/// The start t uses the window ending at t and targets t+1 ..= t+H.
pub type Start = (usize, usize);

/// Valid starts for the training rows: the window needs k rows of history
/// and targets must stay inside the training part.
pub fn train_starts(trajs: &[TrajData], k: usize, horizon: usize) -> Vec<Start> {
    let mut out = Vec::new();
    for (ti, traj) in trajs.iter().enumerate() {
        if traj.train_end >= horizon + 1 {
            let hi = traj.train_end - 1 - horizon;
            for t in k..=hi {
                out.push((ti, t));
            }
        }
    }
    out
}

/// Valid starts for the held-out rows. Input windows may reach back across
/// the split boundary (only targets must be held out).
pub fn val_starts(trajs: &[TrajData], k: usize, horizon: usize) -> Vec<Start> {
    let mut out = Vec::new();
    for (ti, traj) in trajs.iter().enumerate() {
        let lo = traj.train_end.max(k);
        if traj.q.len() >= horizon + 1 {
            let hi = traj.q.len() - 1 - horizon;
            for t in lo..=hi {
                out.push((ti, t));
            }
        }
    }
    out
}

fn window_at(model: &DynModel, traj: &TrajData, t: usize) -> ModelWindow {
    let k = model.spec.k;
    ModelWindow::from_history(
        model,
        &traj.q[t - k..=t],
        &traj.qd[t - k..=t],
        &traj.a[t - k..t],
    )
    .expect("start index respects window bounds")
}

/// Mean of the unrolled position error over the given snippets:
/// (1/H) sum_j ||q_pred - q||^2, averaged over snippets. Batched rollout.
pub fn eval_on_starts(
    model: &DynModel,
    trajs: &[TrajData],
    starts: &[Start],
    horizon: usize,
) -> Result<f64> {
    if starts.is_empty() {
        return Err(Error::Config("evaluation needs at least one snippet".into()));
    }
    let windows: Vec<ModelWindow> = starts
        .iter()
        .map(|&(ti, t)| window_at(model, &trajs[ti], t))
        .collect();
    let mut batch = BatchWindow::from_windows(model, &windows);
    let n = starts.len();
    let mut actions = Array2::zeros((n, 4));
    let mut total = 0.0;
    for j in 0..horizon {
        for (r, &(ti, t)) in starts.iter().enumerate() {
            for i in 0..4 {
                actions[(r, i)] = trajs[ti].a[t + j][i] as f64;
            }
        }
        batch.step(model, &actions);
        for (r, &(ti, t)) in starts.iter().enumerate() {
            let target = &trajs[ti].q[t + j + 1];
            for i in 0..4 {
                let d = batch.q[(r, i)] - target[i];
                total += d * d;
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("evaluation rollout".into()));
    }
    Ok(total / (n as f64 * horizon as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
}

/// The evaluation metric: n seed-deterministic snippets from the requested
/// split, unrolled `horizon` steps (defaults elsewhere: n = 100, H = 80).
pub fn eval_metric(
    model: &DynModel,
    trajs: &[TrajData],
    split: SplitPart,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<f64> {
    let pool = match split {
        SplitPart::Train => train_starts(trajs, model.spec.k, horizon),
        SplitPart::Val => val_starts(trajs, model.spec.k, horizon),
    };
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "no valid evaluation snippets (split {split:?}, horizon {horizon})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Start> = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    eval_on_starts(model, trajs, &starts, horizon)
}

/// Per-joint RMS open-loop error implied by the metric (which sums squared
/// error over the 4 joints).
pub fn rms_per_joint(metric: f64) -> f64 {
    (metric / 4.0).sqrt()
}

/// Exact loss and gradient of the H-step unrolled squared error on a batch
/// of snippets. Reverse-mode through the entire recursion, including the
/// feedback of predictions into later inputs.
pub fn bptt_loss_and_grad(
    model: &DynModel,
    trajs: &[TrajData],
    batch: &[Start],
    horizon: usize,
) -> (f64, Vec<f64>) {
    let b = batch.len();
    assert!(b > 0);
    let k = model.spec.k;
    let k1 = k + 1;
    let spec = &model.spec;

    // Constant inputs from data.
    let windows: Vec<ModelWindow> = batch
        .iter()
        .map(|&(ti, t)| window_at(model, &trajs[ti], t))
        .collect();
    let bw = BatchWindow::from_windows(model, &windows);

    let mut t = Tape::new();
    let vars = model.net.register(&mut t);

    let (q_scale, q_shift) = affine_of_bounds(&model.bounds.q_min, &model.bounds.q_max);
    let (sig_scale, sig_shift, sig_lo, sig_hi) = match spec.predict {
        PredictKind::DeltaQ => {
            let (s, sh) = affine_of_bounds(&model.bounds.q_min, &model.bounds.q_max);
            (s, sh, model.bounds.q_min, model.bounds.q_max)
        }
        PredictKind::DeltaQd => {
            let (s, sh) = affine_of_bounds(&model.bounds.qd_min, &model.bounds.qd_max);
            (s, sh, model.bounds.qd_min, model.bounds.qd_max)
        }
    };

    let mut sig = t.constant(bw.sig.clone());
    let mut act_block = bw.act.clone();
    let mut q = t.constant(bw.q.clone());
    let mut qd = t.constant(bw.qd.clone());
    let mut loss_acc: Option<Var> = None;

    for j in 0..horizon {
        // Commands for this step from data, completing the action block.
        shift_left4(&mut act_block);
        for (r, &(ti, ts)) in batch.iter().enumerate() {
            for i in 0..4 {
                act_block[(r, 4 * k + i)] = trajs[ti].a[ts + j][i] as f64;
            }
        }
        let act = t.constant(act_block.clone());

        let q_cl = t.col_clamp(q, model.bounds.q_min.to_vec(), model.bounds.q_max.to_vec());
        let q_norm = t.col_affine(q_cl, q_scale.to_vec(), q_shift.to_vec());
        let x = t.concat_cols(&[sig, act, q_norm]);
        let f = model.net.forward_on_tape(&mut t, &vars, x);

        let (q_next, qd_next, new_sig_raw) = match spec.predict {
            PredictKind::DeltaQ => {
                let qn = t.add(q, f);
                (qn, qd, qn)
            }
            PredictKind::DeltaQd => {
                let qdn = t.add(qd, f);
                let step = t.scale(qdn, spec.dt);
                let qn = t.add(q, step);
                (qn, qdn, qdn)
            }
        };

        let mut target = Array2::zeros((b, 4));
        for (r, &(ti, ts)) in batch.iter().enumerate() {
            for i in 0..4 {
                target[(r, i)] = trajs[ti].q[ts + j + 1][i];
            }
        }
        let target = t.constant(target);
        let d = t.sub(q_next, target);
        let sq = t.mul(d, d);
        let step_loss = t.sum_all(sq);
        loss_acc = Some(match loss_acc {
            Some(acc) => t.add(acc, step_loss),
            None => step_loss,
        });

        if j + 1 < horizon {
            let cl = t.col_clamp(new_sig_raw, sig_lo.to_vec(), sig_hi.to_vec());
            let new_block = t.col_affine(cl, sig_scale.to_vec(), sig_shift.to_vec());
            let tail = t.slice_cols(sig, 4, 4 * k1);
            sig = t.concat_cols(&[tail, new_block]);
        }
        q = q_next;
        qd = qd_next;
    }

    let loss = t.scale(loss_acc.unwrap(), 1.0 / (b as f64 * horizon as f64));
    let loss_val = t.scalar(loss);
    let grads = t.backward(loss);
    (loss_val, model.net.grad_flat(&grads, &vars))
}

fn affine_of_bounds(lo: &Joints, hi: &Joints) -> (Joints, Joints) {
    let mut scale = [0.0; 4];
    let mut shift = [0.0; 4];
    for j in 0..4 {
        scale[j] = 2.0 / (hi[j] - lo[j]);
        shift[j] = -2.0 * lo[j] / (hi[j] - lo[j]) - 1.0;
    }
    (scale, shift)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub updates_per_epoch: usize,
    /// Validation snippet count and unroll length.
    pub eval_snippets: usize,
    pub eval_horizon: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_epochs: 1000,
            patience: 50,
            updates_per_epoch: 50,
            eval_snippets: 100,
            eval_horizon: 80,
            seed: 0,
        }
    }
}

/// Train a residual model. Deterministic given (spec, data, options): rng
/// streams are derived from the seed for init, batch sampling, and the
/// fixed validation snippet set. Returns the best-validation parameters.
pub fn train(
    spec: &DynSpec,
    datasets: &[Dataset],
    opts: &TrainOptions,
) -> Result<(DynModel, Vec<EpochStats>)> {
    spec.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("training needs at least one dataset".into()));
    }
    let trajs = prepare_trajectories(datasets);
    let (qd_min, qd_max) = measure_qd_bounds(&trajs);
    let bounds = NormBounds { q_min: spec.q_min, q_max: spec.q_max, qd_min, qd_max };

    let mut rng_init = ChaCha8Rng::seed_from_u64(opts.seed);
    rng_init.set_stream(1);
    let mut model = DynModel::new(spec.clone(), bounds, &mut rng_init)?;

    let pool = train_starts(&trajs, spec.k, spec.horizon);
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "no valid training snippets for k = {}, horizon = {}",
            spec.k, spec.horizon
        )));
    }
    let val_pool = val_starts(&trajs, spec.k, opts.eval_horizon);
    if val_pool.is_empty() {
        return Err(Error::Config(
            "validation split too short for the evaluation horizon".into(),
        ));
    }
    let mut rng_val = ChaCha8Rng::seed_from_u64(opts.seed);
    rng_val.set_stream(2);
    let val_set: Vec<Start> = (0..opts.eval_snippets)
        .map(|_| val_pool[rng_val.random_range(0..val_pool.len())])
        .collect();

    let mut rng_batch = ChaCha8Rng::seed_from_u64(opts.seed);
    rng_batch.set_stream(3);

    let mut params = model.net.flatten();
    let mut adam = Adam::new(spec.lr, params.len());
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut stall = 0usize;

    for epoch in 0..opts.max_epochs {
        let mut train_loss_sum = 0.0;
        for _ in 0..opts.updates_per_epoch {
            let batch: Vec<Start> = (0..spec.batch)
                .map(|_| pool[rng_batch.random_range(0..pool.len())])
                .collect();
            let (loss, grad) = bptt_loss_and_grad(&model, &trajs, &batch, spec.horizon);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            adam.step(&mut params, &grad);
            model.net.set_flat(&params);
            train_loss_sum += loss;
        }
        let train_loss = train_loss_sum / opts.updates_per_epoch as f64;
        let val_metric = eval_on_starts(&model, &trajs, &val_set, opts.eval_horizon)?;
        history.push(EpochStats { epoch, train_loss, val_metric });

        if val_metric < best_val {
            best_val = val_metric;
            best_params.copy_from_slice(&params);
            stall = 0;
        } else {
            stall += 1;
            if stall >= opts.patience {
                break;
            }
        }
    }

    model.net.set_flat(&best_params);
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Mlp,
    Kan,
}

/// Random-search space over training hyperparameters, per family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub ks: Vec<usize>,
    pub lrs: Vec<f64>,
    pub batches: Vec<usize>,
    pub mlp_horizons: Vec<usize>,
    pub mlp_depths: Vec<usize>,
    pub mlp_widths: Vec<usize>,
    pub kan_horizons: Vec<usize>,
    pub kan_depths: Vec<usize>,
    pub kan_widths: Vec<usize>,
    pub kan_degree: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            ks: (18..=25).collect(),
            lrs: vec![1e-3, 1e-4, 1e-5],
            batches: vec![256, 512, 1024, 2048],
            mlp_horizons: vec![4, 8, 16, 32],
            mlp_depths: vec![2, 3, 4, 5],
            mlp_widths: vec![64, 128, 256, 512],
            kan_horizons: vec![8, 16, 32],
            kan_depths: vec![3, 4, 5],
            kan_widths: vec![4, 8, 16, 32],
            kan_degree: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SearchResult {
    pub spec: DynSpec,
    pub score: f64,
    pub param_count: usize,
}

/// Bounded random search: draw `budget` specs, train each, rank by the
/// evaluation metric. Ties prefer larger k, then fewer parameters.
pub fn search_hyperparameters(
    space: &SearchSpace,
    family: FamilyKind,
    predict: PredictKind,
    datasets: &[Dataset],
    budget: usize,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Vec<SearchResult>> {
    if budget == 0 {
        return Err(Error::Config("search budget must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let base = DynSpec::mlp_delta_q();
    let mut results = Vec::with_capacity(budget);
    for trial in 0..budget {
        let pick = |v: &[usize], rng: &mut ChaCha8Rng| v[rng.random_range(0..v.len())];
        let k = pick(&space.ks, &mut rng);
        let lr = space.lrs[rng.random_range(0..space.lrs.len())];
        let batch = pick(&space.batches, &mut rng);
        let (arch, horizon) = match family {
            FamilyKind::Mlp => {
                let h = pick(&space.mlp_horizons, &mut rng);
                let depth = pick(&space.mlp_depths, &mut rng);
                let width = pick(&space.mlp_widths, &mut rng);
                (ParamFamily::Mlp { hidden: vec![width; depth] }, h)
            }
            FamilyKind::Kan => {
                let h = pick(&space.kan_horizons, &mut rng);
                let depth = pick(&space.kan_depths, &mut rng);
                let width = pick(&space.kan_widths, &mut rng);
                (ParamFamily::Kan { hidden: vec![width; depth], degree: space.kan_degree }, h)
            }
        };
        let spec = DynSpec { predict, arch, k, horizon, lr, batch, ..base.clone() };
        let trial_opts = TrainOptions { seed: opts.seed.wrapping_add(trial as u64), ..opts.clone() };
        let (model, _) = train(&spec, datasets, &trial_opts)?;
        let trajs = prepare_trajectories(datasets);
        let score = eval_metric(
            &model,
            &trajs,
            SplitPart::Val,
            opts.eval_snippets,
            opts.eval_horizon,
            opts.seed,
        )?;
        let param_count = spec.net_spec().param_count();
        results.push(SearchResult { spec, score, param_count });
    }
    results.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap()
            .then(b.spec.k.cmp(&a.spec.k))
            .then(a.param_count.cmp(&b.param_count))
    });
    Ok(results)
}
