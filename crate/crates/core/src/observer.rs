//! Velocity estimation from position-only measurements (the loop tracker),
//! min-max normalization, and assembly of the model input vector from
//! signal/action windows.

use crate::{Action, Error, Joints, Result};
use serde::{Deserialize, Serialize};

/// PI loop tracker: the integrator chases the measurement and its state *is*
/// the velocity estimate. The proportional branch only shapes convergence;
/// its output is deliberately not part of the estimate.
#[derive(Clone, Debug)]
pub struct LoopTracker {
    pub kp: f64,
    pub ki: f64,
    pub dt: f64,
    /// (tracked position, integrator) per joint; None until first measurement.
    state: Option<[(f64, f64); 4]>,
}

impl LoopTracker {
    pub fn new(kp: f64, ki: f64, dt: f64) -> LoopTracker {
        assert!(kp > 0.0 && ki > 0.0 && dt > 0.0);
        LoopTracker { kp, ki, dt, state: None }
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    /// Feed one measurement; returns the per-joint velocity estimate.
    /// The first call initializes the tracked position to the measurement
    /// (no startup transient) and returns zeros.
    pub fn update(&mut self, q_meas: &Joints) -> Joints {
        let state = self.state.get_or_insert_with(|| {
            [
                (q_meas[0], 0.0),
                (q_meas[1], 0.0),
                (q_meas[2], 0.0),
                (q_meas[3], 0.0),
            ]
        });
        let mut est = [0.0; 4];
        for j in 0..4 {
            let (q_hat, i) = &mut state[j];
            let e = q_meas[j] - *q_hat;
            *i += self.ki * e * self.dt;
            *q_hat += (self.kp * e + *i) * self.dt;
            est[j] = *i;
        }
        est
    }
}

impl Default for LoopTracker {
    fn default() -> Self {
        LoopTracker::new(10.0, 60.0, crate::plant::DT)
    }
}

/// Normalization bounds: positions use the joint limits; velocity bounds are
/// measured from tracker estimates over the training data and stored with
/// the model so inference matches training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub q_min: Joints,
    pub q_max: Joints,
    pub qd_min: Joints,
    pub qd_max: Joints,
}

impl NormBounds {
    pub fn validate(&self) -> Result<()> {
        for j in 0..4 {
            if !(self.q_min[j] < self.q_max[j]) {
                return Err(Error::Config(format!("norm bounds: q_min[{j}] must be < q_max[{j}]")));
            }
            if !(self.qd_min[j] < self.qd_max[j]) {
                return Err(Error::Config(format!(
                    "norm bounds: qd_min[{j}] must be < qd_max[{j}]"
                )));
            }
        }
        Ok(())
    }
}

/// Map to [-1, 1]; out-of-range inputs clamp (models were trained on [-1,1]).
pub fn minmax(x: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo < hi);
    let c = x.clamp(lo, hi);
    2.0 * (c - lo) / (hi - lo) - 1.0
}

pub fn minmax4(x: &Joints, lo: &Joints, hi: &Joints) -> Joints {
    [
        minmax(x[0], lo[0], hi[0]),
        minmax(x[1], lo[1], hi[1]),
        minmax(x[2], lo[2], hi[2]),
        minmax(x[3], lo[3], hi[3]),
    ]
}

/// Input dimension for lag depth k: signal window 4(k+1), action window
/// 4(k+1), plus the current normalized configuration.
pub fn state_dim(k: usize) -> usize {
    8 * (k + 1) + 4
}

/// Flatten (signal window, action window, current normalized config) into
/// the model input. Windows are ordered oldest-first (index 0 is t-k); the
/// layout is: signal slot (t-j, joint i) at 4(k-j)+i, the action block at
/// offset 4(k+1) with the same inner layout, then the current config.
pub fn build_state_vector(
    sig_window: &[Joints],
    act_window: &[Action],
    current_norm_q: &Joints,
) -> Result<Vec<f64>> {
    if sig_window.len() != act_window.len() || sig_window.is_empty() {
        return Err(Error::Config(format!(
            "state vector: window lengths {} vs {} (need equal, nonzero)",
            sig_window.len(),
            act_window.len()
        )));
    }
    let k1 = sig_window.len();
    let mut out = vec![0.0; 8 * k1 + 4];
    build_state_vector_into(&mut out, sig_window, act_window, current_norm_q);
    Ok(out)
}

/// Allocation-free variant for hot paths; `out` must have length 8(k+1)+4.
pub fn build_state_vector_into(
    out: &mut [f64],
    sig_window: &[Joints],
    act_window: &[Action],
    current_norm_q: &Joints,
) {
    let k1 = sig_window.len();
    debug_assert_eq!(act_window.len(), k1);
    debug_assert_eq!(out.len(), 8 * k1 + 4);
    for (j, sig) in sig_window.iter().enumerate() {
        out[4 * j..4 * j + 4].copy_from_slice(sig);
    }
    let base = 4 * k1;
    for (j, act) in act_window.iter().enumerate() {
        for i in 0..4 {
            out[base + 4 * j + i] = act[i] as f64;
        }
    }
    out[8 * k1..].copy_from_slice(current_norm_q);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 0.05;

    #[test]
    fn constant_measurement_converges_to_zero_estimate() {
        let mut tracker = LoopTracker::default();
        tracker.update(&[0.0; 4]);
        let mut est = [f64::MAX; 4];
        for _ in 0..200 {
            est = tracker.update(&[0.5, -0.3, 1.0, 0.0]);
        }
        for e in est {
            assert!(e.abs() < 1e-4, "estimate {e} not settled");
        }
    }

    #[test]
    fn ramp_measurement_recovers_slope() {
        let mut tracker = LoopTracker::default();
        let v = 0.2;
        let mut est = [0.0; 4];
        for t in 0..300 {
            let q = v * t as f64 * DT;
            est = tracker.update(&[q; 4]);
        }
        for e in est {
            assert!((e - v).abs() / v < 0.02, "ramp estimate {e} off from {v}");
        }
    }

    #[test]
    fn high_frequency_sinusoid_is_attenuated() {
        // True velocity amplitude is omega; the integral branch must pass
        // less than half of it at omega = 20 rad/s.
        let omega = 20.0;
        let mut tracker = LoopTracker::default();
        let mut peak = 0.0f64;
        for t in 0..2000 {
            let q = (omega * t as f64 * DT).sin();
            let est = tracker.update(&[q, 0.0, 0.0, 0.0]);
            if t > 500 {
                peak = peak.max(est[0].abs());
            }
        }
        assert!(peak < 0.5 * omega, "sinusoid estimate amplitude {peak} too large");
    }

    #[test]
    fn tracker_is_bounded_on_bounded_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tracker = LoopTracker::default();
        for _ in 0..100_000 {
            let q = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let est = tracker.update(&q);
            for e in est {
                assert!(e.is_finite() && e.abs() < 1e3, "tracker state blew up: {e}");
            }
        }
    }

    #[test]
    fn minmax_endpoints_and_midpoint() {
        assert_eq!(minmax(-0.9, -0.9, 0.6), -1.0);
        assert_eq!(minmax(0.6, -0.9, 0.6), 1.0);
        assert_abs_diff_eq!(minmax(-0.15, -0.9, 0.6), 0.0, epsilon = 1e-12);
        // Clamped outside the range.
        assert_eq!(minmax(2.0, -0.9, 0.6), 1.0);
        assert_eq!(minmax(-2.0, -0.9, 0.6), -1.0);
    }

    #[test]
    fn minmax_is_affine_in_range() {
        let (lo, hi) = (-1.3, 1.3);
        let (x, y) = (0.4, -0.7);
        for alpha in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let lhs = minmax(alpha * x + (1.0 - alpha) * y, lo, hi);
            let rhs = alpha * minmax(x, lo, hi) + (1.0 - alpha) * minmax(y, lo, hi);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn state_vector_layout() {
        let k = 18usize;
        assert_eq!(state_dim(k), 156);
        let sig = vec![[0.0; 4]; k + 1];
        let mut act = vec![[0i8; 4]; k + 1];
        let x0 = build_state_vector(&sig, &act, &[0.0; 4]).unwrap();
        assert_eq!(x0.len(), 156);
        assert!(x0.iter().all(|&v| v == 0.0));

        // Perturb the action at (t-3, joint 2): windows are oldest-first,
        // so that's window position k-3.
        act[k - 3][2] = 1;
        let x1 = build_state_vector(&sig, &act, &[0.0; 4]).unwrap();
        let expect_idx = 4 * (k + 1) + 4 * (k - 3) + 2;
        for (i, (&a, &b)) in x0.iter().zip(&x1).enumerate() {
            if i == expect_idx {
                assert_eq!(b - a, 1.0);
            } else {
                assert_eq!(a, b, "unexpected change at index {i}");
            }
        }
    }

    #[test]
    fn state_vector_rejects_mismatched_windows() {
        let sig = vec![[0.0; 4]; 3];
        let act = vec![[0i8; 4]; 4];
        assert!(build_state_vector(&sig, &act, &[0.0; 4]).is_err());
    }
}
