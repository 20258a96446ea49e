//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks it in reverse and accumulates exact gradients. The op set is the
//! minimum needed by the dynamics-model BPTT loss and the PPO loss: matrix
//! products, row-broadcast bias, a few elementwise nonlinearities, per-column
//! affine/clamp (min-max normalization), column concatenation/slicing, and a
//! Legendre basis expansion for the KAN layers.
//!
//! Everything is double precision; gradients are exact reverse-mode
//! derivatives (verified against central finite differences in the tests and
//! the acceptance suite).

use ndarray::{s, Array2};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Matrix plus a 1 x m row vector broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    /// Per-column y = x*scale[j] + shift[j]; backward only needs the scale.
    ColAffine(Var, Vec<f64>),
    /// Per-column clamp to [lo[j], hi[j]].
    ColClamp(Var, Vec<f64>, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Sum of every entry -> 1x1.
    SumAll(Var),
    /// Per-row sum over columns -> n x 1.
    SumRows(Var),
    /// Legendre expansion: (n x m) -> (n x m*(d+1)), out[:, j*(d+1)+p] = P_p(x_ij).
    Legendre(Var, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    g: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.g[v.0].as_ref()
    }
    pub fn take(&mut self, v: Var) -> Array2<f64> {
        self.g[v.0].take().expect("no gradient recorded for this var")
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.dim(), (1, 1), "scalar() on non 1x1 value");
        a[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Parameter leaf: participates in the backward pass.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient tracked.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        let g = self.g(a) || self.g(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.zip_mut_with(self.value(b), |x, &y| {
            if y < *x {
                *x = y;
            }
        });
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Min(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let g = self.g(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let g = self.g(a);
        self.push(v, Op::AddConst(a), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let g = self.g(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.g(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let g = self.g(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let g = self.g(a);
        self.push(v, Op::Softplus(a), g)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let g = self.g(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    pub fn col_affine(&mut self, a: Var, scale: Vec<f64>, shift: Vec<f64>) -> Var {
        let x = self.value(a);
        debug_assert_eq!(x.ncols(), scale.len());
        debug_assert_eq!(x.ncols(), shift.len());
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = *e * scale[j] + shift[j];
            }
        }
        let g = self.g(a);
        self.push(v, Op::ColAffine(a, scale), g)
    }

    pub fn col_clamp(&mut self, a: Var, lo: Vec<f64>, hi: Vec<f64>) -> Var {
        let x = self.value(a);
        debug_assert_eq!(x.ncols(), lo.len());
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = e.clamp(lo[j], hi[j]);
            }
        }
        let g = self.g(a);
        self.push(v, Op::ColClamp(a, lo, hi), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut at = 0;
        for &p in parts {
            let w = self.value(p).ncols();
            v.slice_mut(s![.., at..at + w]).assign(self.value(p));
            at += w;
        }
        let g = parts.iter().any(|&p| self.g(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let g = self.g(a);
        self.push(v, Op::SliceCols(a, start, end), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let g = self.g(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            v[(i, 0)] = row.sum();
        }
        let g = self.g(a);
        self.push(v, Op::SumRows(a), g)
    }

    pub fn legendre(&mut self, a: Var, degree: usize) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let d1 = degree + 1;
        let mut v = Array2::zeros((n, m * d1));
        let mut p = vec![0.0; d1];
        for i in 0..n {
            for j in 0..m {
                legendre_values(x[(i, j)], degree, &mut p);
                for (k, &pk) in p.iter().enumerate() {
                    v[(i, j * d1 + k)] = pk;
                }
            }
        }
        let g = self.g(a);
        self.push(v, Op::Legendre(a, degree), g)
    }

    /// Reverse pass from a 1x1 loss node. Returns per-var gradients
    /// (present only for vars on a grad-requiring path).
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward() needs a scalar loss");
        assert!(self.g(loss), "loss does not depend on any parameter");
        let mut g: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].grad {
                continue;
            }
            let Some(gout) = g[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    g[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        let da = gout.dot(&self.value(*b).t());
                        accumulate(&mut g[a.0], da);
                    }
                    if self.g(*b) {
                        let db = self.value(*a).t().dot(&gout);
                        accumulate(&mut g[b.0], db);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.g(*row) {
                        let mut dr = Array2::zeros((1, gout.ncols()));
                        for r in gout.rows() {
                            for (j, &e) in r.iter().enumerate() {
                                dr[(0, j)] += e;
                            }
                        }
                        accumulate(&mut g[row.0], dr);
                    }
                    if self.g(*a) {
                        accumulate(&mut g[a.0], gout);
                    }
                }
                Op::Add(a, b) => {
                    if self.g(*a) {
                        accumulate(&mut g[a.0], gout.clone());
                    }
                    if self.g(*b) {
                        accumulate(&mut g[b.0], gout);
                    }
                }
                Op::Sub(a, b) => {
                    if self.g(*a) {
                        accumulate(&mut g[a.0], gout.clone());
                    }
                    if self.g(*b) {
                        accumulate(&mut g[b.0], -gout);
                    }
                }
                Op::Mul(a, b) => {
                    if self.g(*a) {
                        accumulate(&mut g[a.0], &gout * self.value(*b));
                    }
                    if self.g(*b) {
                        accumulate(&mut g[b.0], &gout * self.value(*a));
                    }
                }
                Op::Min(a, b) => {
                    // Ties route to the first argument.
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    if self.g(*a) {
                        let mut m = Array2::zeros(va.dim());
                        for ((i, j), e) in m.indexed_iter_mut() {
                            *e = if va[(i, j)] <= vb[(i, j)] { gout[(i, j)] } else { 0.0 };
                        }
                        accumulate(&mut g[a.0], m);
                    }
                    if self.g(*b) {
                        let mut m = Array2::zeros(vb.dim());
                        for ((i, j), e) in m.indexed_iter_mut() {
                            *e = if vb[(i, j)] < va[(i, j)] { gout[(i, j)] } else { 0.0 };
                        }
                        accumulate(&mut g[b.0], m);
                    }
                }
                Op::Scale(a, c) => {
                    if self.g(*a) {
                        accumulate(&mut g[a.0], gout * *c);
                    }
                }
                Op::AddConst(a) => {
                    if self.g(*a) {
                        accumulate(&mut g[a.0], gout);
                    }
                }
                Op::Silu(a) => {
                    if self.g(*a) {
                        let x = self.value(*a);
                        let mut da = gout;
                        da.zip_mut_with(x, |e, &xi| {
                            let sg = sigmoid(xi);
                            *e *= sg * (1.0 + xi * (1.0 - sg));
                        });
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::Tanh(a) => {
                    if self.g(*a) {
                        let y = &self.nodes[idx].value;
                        let mut da = gout;
                        da.zip_mut_with(y, |e, &t| *e *= 1.0 - t * t);
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::Exp(a) => {
                    if self.g(*a) {
                        let y = &self.nodes[idx].value;
                        let mut da = gout;
                        da.zip_mut_with(y, |e, &t| *e *= t);
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::Softplus(a) => {
                    if self.g(*a) {
                        let x = self.value(*a);
                        let mut da = gout;
                        da.zip_mut_with(x, |e, &xi| *e *= sigmoid(xi));
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if self.g(*a) {
                        let x = self.value(*a);
                        let mut da = gout;
                        da.zip_mut_with(x, |e, &xi| {
                            if xi <= *lo || xi >= *hi {
                                *e = 0.0;
                            }
                        });
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::ColAffine(a, scale) => {
                    if self.g(*a) {
                        let mut da = gout;
                        for mut row in da.rows_mut() {
                            for (j, e) in row.iter_mut().enumerate() {
                                *e *= scale[j];
                            }
                        }
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::ColClamp(a, lo, hi) => {
                    if self.g(*a) {
                        let x = self.value(*a);
                        let mut da = gout;
                        for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                            for (j, e) in row.iter_mut().enumerate() {
                                let xi = x[(i, j)];
                                if xi <= lo[j] || xi >= hi[j] {
                                    *e = 0.0;
                                }
                            }
                        }
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.g(p) {
                            let dp = gout.slice(s![.., at..at + w]).to_owned();
                            accumulate(&mut g[p.0], dp);
                        }
                        at += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    if self.g(*a) {
                        let mut da = Array2::zeros(self.value(*a).dim());
                        da.slice_mut(s![.., *start..*end]).assign(&gout);
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::SumAll(a) => {
                    if self.g(*a) {
                        let da = Array2::from_elem(self.value(*a).dim(), gout[(0, 0)]);
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::SumRows(a) => {
                    if self.g(*a) {
                        let x = self.value(*a);
                        let mut da = Array2::zeros(x.dim());
                        for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                            let gi = gout[(i, 0)];
                            row.fill(gi);
                        }
                        accumulate(&mut g[a.0], da);
                    }
                }
                Op::Legendre(a, degree) => {
                    if self.g(*a) {
                        let x = self.value(*a);
                        let (n, m) = x.dim();
                        let d1 = degree + 1;
                        let mut da = Array2::zeros((n, m));
                        let mut p = vec![0.0; d1];
                        let mut dp = vec![0.0; d1];
                        for i in 0..n {
                            for j in 0..m {
                                legendre_values_and_derivs(x[(i, j)], *degree, &mut p, &mut dp);
                                let mut acc = 0.0;
                                for (k, &dpk) in dp.iter().enumerate() {
                                    acc += gout[(i, j * d1 + k)] * dpk;
                                }
                                da[(i, j)] = acc;
                            }
                        }
                        accumulate(&mut g[a.0], da);
                    }
                }
            }
        }
        Gradients { g }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, add: Array2<f64>) {
    match slot {
        Some(a) => *a += &add,
        None => *slot = Some(add),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// P_0..P_degree at x via the three-term recurrence
/// (n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}.
pub fn legendre_values(x: f64, degree: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), degree + 1);
    out[0] = 1.0;
    if degree == 0 {
        return;
    }
    out[1] = x;
    for n in 1..degree {
        out[n + 1] = (((2 * n + 1) as f64) * x * out[n] - n as f64 * out[n - 1]) / (n + 1) as f64;
    }
}

/// Values and derivatives; P'_{n+1} = P'_{n-1} + (2n+1) P_n.
pub fn legendre_values_and_derivs(x: f64, degree: usize, p: &mut [f64], dp: &mut [f64]) {
    legendre_values(x, degree, p);
    dp[0] = 0.0;
    if degree == 0 {
        return;
    }
    dp[1] = 1.0;
    for n in 1..degree {
        dp[n + 1] = dp[n - 1] + (2 * n + 1) as f64 * p[n];
    }
}

/// Central finite-difference gradient of a scalar function, for gradient
/// verification (used by tests and the acceptance suite).
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let x0 = xp[i];
        xp[i] = x0 + eps;
        let fp = f(&xp);
        xp[i] = x0 - eps;
        let fm = f(&xp);
        xp[i] = x0;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Max relative error between analytic and finite-difference gradients,
/// with an absolute floor so near-zero pairs compare sanely.
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let mut worst: f64 = 0.0;
    for (&a, &b) in analytic.iter().zip(fd) {
        let denom = a.abs().max(b.abs()).max(1e-6);
        worst = worst.max((a - b).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randm(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_value() {
        let mut t = Tape::new();
        let a = t.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = t.param(arr2(&[[5.0], [6.0]]));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &arr2(&[[17.0], [39.0]]));
    }

    #[test]
    fn legendre_recurrence_holds() {
        let mut p = vec![0.0; 9];
        for i in 0..=100 {
            let x = -1.0 + 2.0 * i as f64 / 100.0;
            legendre_values(x, 8, &mut p);
            for n in 1..8 {
                let lhs = (n + 1) as f64 * p[n + 1];
                let rhs = (2 * n + 1) as f64 * x * p[n] - n as f64 * p[n - 1];
                assert!((lhs - rhs).abs() < 1e-12, "recurrence off at n={n}, x={x}");
            }
        }
        legendre_values(1.0, 8, &mut p);
        for (n, v) in p.iter().enumerate() {
            assert!((v - 1.0).abs() < 1e-12, "P_{n}(1) != 1");
        }
    }

    /// One composite graph exercising every op, checked against finite
    /// differences on all leaf parameters.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w0 = randm(&mut rng, 3, 5);
        let b0 = randm(&mut rng, 1, 5);
        let x0 = randm(&mut rng, 4, 3);
        let y0 = randm(&mut rng, 4, 2);

        let eval = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let (w_f, rest) = flat.split_at(15);
            let (b_f, _) = rest.split_at(5);
            let mut t = Tape::new();
            let w = t.param(Array2::from_shape_vec((3, 5), w_f.to_vec()).unwrap());
            let b = t.param(Array2::from_shape_vec((1, 5), b_f.to_vec()).unwrap());
            let x = t.constant(x0.clone());
            let y = t.constant(y0.clone());

            let h = t.matmul(x, w);
            let h = t.add_row(h, b);
            let h = t.silu(h);
            let th = t.tanh(h);
            let lg = t.legendre(th, 3);
            let sp = t.softplus(h);
            let ex = t.slice_cols(h, 0, 2);
            let ex = t.clamp(ex, -0.4, 0.4);
            let ex = t.exp(ex);
            let joined = t.concat_cols(&[lg, sp, ex]);
            let aff = t.col_affine(
                joined,
                (0..joined_cols()).map(|i| 0.3 + 0.01 * i as f64).collect(),
                (0..joined_cols()).map(|i| -0.2 + 0.01 * i as f64).collect(),
            );
            let cl = t.col_clamp(
                aff,
                vec![-0.8; joined_cols()],
                vec![0.8; joined_cols()],
            );
            let sr = t.sum_rows(cl);
            let yc = t.slice_cols(y, 0, 1);
            let d = t.sub(sr, yc);
            let sq = t.mul(d, d);
            let halved = t.scale(sq, 0.5);
            let shifted = t.add_const(halved, 0.1);
            let other = t.slice_cols(cl, 0, 1);
            let mn = t.min(shifted, other);
            let loss = t.mean_all(mn);

            let lv = t.scalar(loss);
            if !want_grad {
                return (lv, vec![]);
            }
            let grads = t.backward(loss);
            let mut out = Vec::new();
            out.extend(grads.get(w).unwrap().iter().copied());
            out.extend(grads.get(b).unwrap().iter().copied());
            (lv, out)
        };

        fn joined_cols() -> usize {
            5 * 4 + 5 + 2
        }

        let mut flat: Vec<f64> = w0.iter().copied().collect();
        flat.extend(b0.iter().copied());
        let (_, analytic) = eval(&flat, true);
        let fd = finite_diff_grad(|p| eval(p, false).0, &flat, 1e-6);
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-6, "composite graph gradient off: {err}");
    }

    #[test]
    fn legendre_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-0.9..0.9)).collect();
        let eval = |p: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let x = t.param(Array2::from_shape_vec((2, 3), p.to_vec()).unwrap());
            let lg = t.legendre(x, 5);
            let sq = t.mul(lg, lg);
            let loss = t.mean_all(sq);
            let lv = t.scalar(loss);
            if !grad {
                return (lv, vec![]);
            }
            let g = t.backward(loss);
            (lv, g.get(x).unwrap().iter().copied().collect())
        };
        let (_, analytic) = eval(&x0, true);
        let fd = finite_diff_grad(|p| eval(p, false).0, &x0, 1e-6);
        assert!(max_rel_err(&analytic, &fd) < 1e-7);
    }

    #[test]
    fn min_ties_route_to_first_argument() {
        let mut t = Tape::new();
        let a = t.param(arr2(&[[1.0]]));
        let b = t.param(arr2(&[[1.0]]));
        let m = t.min(a, b);
        let loss = t.sum_all(m);
        let g = t.backward(loss);
        assert_eq!(g.get(a).unwrap()[(0, 0)], 1.0);
        assert_eq!(g.get(b).unwrap()[(0, 0)], 0.0);
    }
}
