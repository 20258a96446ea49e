//! Network parameterizations for the residual dynamics models and the
//! policy/value heads: a SiLU MLP and a Legendre-basis KAN, both with
//! batched `f64` inference, tape registration for exact reverse-mode
//! gradients, a flat parameter view for the optimizer, and an `f32`
//! mirror for the planner's inference hot path.

use crate::autodiff::{legendre_values, Gradients, Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Architecture description, enough to rebuild a `Net` from flat params.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetSpec {
    Mlp { in_dim: usize, hidden: Vec<usize>, out_dim: usize },
    Kan { in_dim: usize, hidden: Vec<usize>, out_dim: usize, degree: usize },
}

impl NetSpec {
    pub fn in_dim(&self) -> usize {
        match self {
            NetSpec::Mlp { in_dim, .. } | NetSpec::Kan { in_dim, .. } => *in_dim,
        }
    }
    pub fn out_dim(&self) -> usize {
        match self {
            NetSpec::Mlp { out_dim, .. } | NetSpec::Kan { out_dim, .. } => *out_dim,
        }
    }

    /// Layer widths including input and output.
    fn widths(&self) -> Vec<usize> {
        match self {
            NetSpec::Mlp { in_dim, hidden, out_dim }
            | NetSpec::Kan { in_dim, hidden, out_dim, .. } => {
                let mut w = vec![*in_dim];
                w.extend_from_slice(hidden);
                w.push(*out_dim);
                w
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let w = self.widths();
        match self {
            NetSpec::Mlp { .. } => {
                w.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
            }
            NetSpec::Kan { degree, .. } => {
                w.windows(2).map(|p| p[0] * (degree + 1) * p[1]).sum()
            }
        }
    }
}

/// A dense layer: `y = x . w + b` with `w` (in x out) and `b` (1 x out).
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Clone, Debug)]
pub enum Net {
    Mlp { layers: Vec<Dense> },
    /// Each layer maps `h -> legendre_expand(tanh(h), degree) . coef`
    /// with coef (in*(degree+1) x out); no bias.
    Kan { layers: Vec<Array2<f64>>, degree: usize },
}

impl Net {
    pub fn new(spec: &NetSpec, rng: &mut impl Rng) -> Net {
        let widths = spec.widths();
        match spec {
            NetSpec::Mlp { .. } => {
                let mut layers = Vec::new();
                for p in widths.windows(2) {
                    let (n_in, n_out) = (p[0], p[1]);
                    let std = (1.0 / n_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).unwrap();
                    let w = Array2::from_shape_fn((n_in, n_out), |_| dist.sample(rng));
                    let b = Array2::zeros((1, n_out));
                    layers.push(Dense { w, b });
                }
                Net::Mlp { layers }
            }
            NetSpec::Kan { degree, .. } => {
                let mut layers = Vec::new();
                for p in widths.windows(2) {
                    let (n_in, n_out) = (p[0], p[1]);
                    let fan_in = n_in * (degree + 1);
                    let std = (1.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).unwrap();
                    layers.push(Array2::from_shape_fn((fan_in, n_out), |_| dist.sample(rng)));
                }
                Net::Kan { layers, degree: *degree }
            }
        }
    }

    pub fn spec(&self) -> NetSpec {
        match self {
            Net::Mlp { layers } => {
                let in_dim = layers[0].w.nrows();
                let out_dim = layers.last().unwrap().w.ncols();
                let hidden = layers[..layers.len() - 1].iter().map(|l| l.w.ncols()).collect();
                NetSpec::Mlp { in_dim, hidden, out_dim }
            }
            Net::Kan { layers, degree } => {
                let d1 = degree + 1;
                let in_dim = layers[0].nrows() / d1;
                let out_dim = layers.last().unwrap().ncols();
                let hidden = layers[..layers.len() - 1].iter().map(|l| l.ncols()).collect();
                NetSpec::Kan { in_dim, hidden, out_dim, degree: *degree }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.spec().param_count()
    }

    /// Batched inference: x is (n x in_dim), result (n x out_dim).
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Net::Mlp { layers } => {
                let mut h = x.dot(&layers[0].w) + &layers[0].b;
                for layer in &layers[1..] {
                    h.mapv_inplace(|v| v * crate::autodiff::sigmoid(v));
                    h = h.dot(&layer.w) + &layer.b;
                }
                h
            }
            Net::Kan { layers, degree } => {
                let mut h = x.clone();
                for coef in layers {
                    h = legendre_expand(&h.mapv(f64::tanh), *degree).dot(coef);
                }
                h
            }
        }
    }

    /// Push all parameter matrices onto a tape (order matches `flatten`).
    pub fn register(&self, t: &mut Tape) -> Vec<Var> {
        let mut vars = Vec::new();
        match self {
            Net::Mlp { layers } => {
                for l in layers {
                    vars.push(t.param(l.w.clone()));
                    vars.push(t.param(l.b.clone()));
                }
            }
            Net::Kan { layers, .. } => {
                for c in layers {
                    vars.push(t.param(c.clone()));
                }
            }
        }
        vars
    }

    /// Build the forward graph on a tape using previously registered params.
    /// Reusing the same `vars` across calls accumulates gradients, which is
    /// exactly what an unrolled multi-step loss needs.
    pub fn forward_on_tape(&self, t: &mut Tape, vars: &[Var], x: Var) -> Var {
        match self {
            Net::Mlp { layers } => {
                let mut h = x;
                for (i, _) in layers.iter().enumerate() {
                    if i > 0 {
                        h = t.silu(h);
                    }
                    h = t.matmul(h, vars[2 * i]);
                    h = t.add_row(h, vars[2 * i + 1]);
                }
                h
            }
            Net::Kan { layers, degree } => {
                let mut h = x;
                for (i, _) in layers.iter().enumerate() {
                    h = t.tanh(h);
                    h = t.legendre(h, *degree);
                    h = t.matmul(h, vars[i]);
                }
                h
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match self {
            Net::Mlp { layers } => {
                for l in layers {
                    out.extend(l.w.iter());
                    out.extend(l.b.iter());
                }
            }
            Net::Kan { layers, .. } => {
                for c in layers {
                    out.extend(c.iter());
                }
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length mismatch");
        let mut at = 0;
        match self {
            Net::Mlp { layers } => {
                for l in layers {
                    for e in l.w.iter_mut() {
                        *e = flat[at];
                        at += 1;
                    }
                    for e in l.b.iter_mut() {
                        *e = flat[at];
                        at += 1;
                    }
                }
            }
            Net::Kan { layers, .. } => {
                for c in layers {
                    for e in c.iter_mut() {
                        *e = flat[at];
                        at += 1;
                    }
                }
            }
        }
    }

    pub fn from_flat(spec: &NetSpec, flat: &[f64]) -> Net {
        // Layout comes from set_flat; the zero-seed init is only scaffolding.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Net::new(spec, &mut rng);
        net.set_flat(flat);
        net
    }

    /// Collect gradients for registered params into flat layout.
    pub fn grad_flat(&self, grads: &Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for &v in vars {
            let g = grads.get(v).expect("registered parameter missing from gradient set");
            out.extend(g.iter());
        }
        out
    }
}

/// (n x m) -> (n x m*(degree+1)), out[:, j*(d+1)+p] = P_p(x_ij).
pub fn legendre_expand(x: &Array2<f64>, degree: usize) -> Array2<f64> {
    let (n, m) = x.dim();
    let d1 = degree + 1;
    let mut out = Array2::zeros((n, m * d1));
    let mut p = vec![0.0; d1];
    for i in 0..n {
        for j in 0..m {
            legendre_values(x[(i, j)], degree, &mut p);
            for (k, &pk) in p.iter().enumerate() {
                out[(i, j * d1 + k)] = pk;
            }
        }
    }
    out
}

fn legendre_expand_f32(x: &Array2<f32>, degree: usize) -> Array2<f32> {
    let (n, m) = x.dim();
    let d1 = degree + 1;
    let mut out = Array2::zeros((n, m * d1));
    let mut p = vec![0.0f64; d1];
    for i in 0..n {
        for j in 0..m {
            legendre_values(x[(i, j)] as f64, degree, &mut p);
            for (k, &pk) in p.iter().enumerate() {
                out[(i, j * d1 + k)] = pk as f32;
            }
        }
    }
    out
}

/// Single-precision mirror of a trained net for planner inference, where
/// the sgemm path roughly doubles throughput on one core.
#[derive(Clone, Debug)]
pub enum NetF32 {
    Mlp { layers: Vec<(Array2<f32>, Array2<f32>)> },
    Kan { layers: Vec<Array2<f32>>, degree: usize },
}

impl NetF32 {
    pub fn from_net(net: &Net) -> NetF32 {
        match net {
            Net::Mlp { layers } => NetF32::Mlp {
                layers: layers
                    .iter()
                    .map(|l| (l.w.mapv(|v| v as f32), l.b.mapv(|v| v as f32)))
                    .collect(),
            },
            Net::Kan { layers, degree } => NetF32::Kan {
                layers: layers.iter().map(|c| c.mapv(|v| v as f32)).collect(),
                degree: *degree,
            },
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        match self {
            NetF32::Mlp { layers } => {
                let mut h = x.dot(&layers[0].0) + &layers[0].1;
                for (w, b) in &layers[1..] {
                    h.mapv_inplace(|v| v / (1.0 + (-v).exp()));
                    h = h.dot(w) + b;
                }
                h
            }
            NetF32::Kan { layers, degree } => {
                let mut h = x.clone();
                for coef in layers {
                    h = legendre_expand_f32(&h.mapv(f32::tanh), *degree).dot(coef);
                }
                h
            }
        }
    }
}

/// Adam with bias correction; state lives alongside a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
