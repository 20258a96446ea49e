//! Learned-dynamics reaching control for a 4-DoF hydraulic arm.
//!
//! The crate covers the full pipeline: a synthetic plant with transport
//! delays and shared-supply coupling, excitation data generation, residual
//! dynamics models (MLP and Legendre-KAN, position- and velocity-residual
//! variants) trained with exact backpropagation through time, a reaching
//! environment with a shaped reward, PPO and iCEM controllers, and a
//! transfer-evaluation harness that runs the same episodes against both the
//! learned model and the plant.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod dynmodel;
pub mod env;
pub mod eval;
pub mod icem;
pub mod kinematics;
pub mod manifest;
pub mod modelio;
pub mod nn;
pub mod observer;
pub mod plant;
pub mod ppo;

/// Joint-space vector (swing, boom, arm, bucket), radians or rad/s.
pub type Joints = [f64; 4];

/// Discrete joint command, each component in {-1, 0, +1}.
pub type Action = [i8; 4];

pub const NJ: usize = 4;

pub fn action_to_f64(a: &Action) -> Joints {
    [a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64]
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sampling budget exhausted after {0} rejections (workspace/chain inconsistent?)")]
    SamplingBudget(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
