//! Geometry of the 4-DoF arm: a yaw (swing) base joint carrying a planar
//! three-link pitch chain (boom, arm, bucket). Forward kinematics, pose
//! distances, workspace membership, and configuration sampling.
//!
//! Conventions, fixed once:
//! - joint order (swing, boom, arm, bucket); positive pitch angles tip the
//!   links *down* (rotation about +y maps +x toward -z);
//! - quaternions are scalar-first (w, x, y, z);
//! - orientation is Rz(yaw) * Ry(pitch) with roll identically zero;
//! - all workspace bounds are closed, so sitting exactly on a limit counts
//!   as inside (no flapping at the boundary).

use crate::{Error, Joints, Result};
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct KinematicChain {
    /// Height of the boom pivot above the base frame origin, m.
    pub base_height: f64,
    /// Boom, arm, bucket link lengths, m.
    pub links: [f64; 3],
    /// Extra length of the mounted tool beyond the bucket link, m.
    pub tool_offset: f64,
    pub q_min: Joints,
    pub q_max: Joints,
}

impl Default for KinematicChain {
    fn default() -> Self {
        KinematicChain {
            base_height: 0.3,
            links: [1.1, 0.9, 0.8],
            tool_offset: 0.0,
            q_min: [-1.3, -0.9, -1.4, -1.2],
            q_max: [1.3, 0.6, 0.4, 1.2],
        }
    }
}

impl KinematicChain {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_height.is_finite() && self.base_height >= 0.0) {
            return Err(Error::Config("base_height must be finite and >= 0".into()));
        }
        if self.links.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("link lengths must be > 0".into()));
        }
        if self.tool_offset < 0.0 || !self.tool_offset.is_finite() {
            return Err(Error::Config("tool_offset must be finite and >= 0".into()));
        }
        for j in 0..4 {
            if !(self.q_min[j] < self.q_max[j]) {
                return Err(Error::Config(format!("joint {j}: q_min must be < q_max")));
            }
        }
        Ok(())
    }

    pub fn clamp_config(&self, q: &Joints) -> Joints {
        let mut out = *q;
        for j in 0..4 {
            out[j] = out[j].clamp(self.q_min[j], self.q_max[j]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    /// Position in the base frame, m.
    pub p: [f64; 3],
    /// Orientation; unit by construction.
    pub r: UnitQuaternion<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct YawPitch {
    pub yaw: f64,
    pub pitch: f64,
    /// |pitch| within 1e-6 of pi/2: yaw/pitch decomposition is near-singular
    /// (yaw still returned, callers may want to treat it cautiously).
    pub degenerate: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Workspace {
    /// Radial bounds from the swing axis, m.
    pub r_min: f64,
    pub r_max: f64,
    /// Angular sector bounds, rad (azimuth of the end-effector position).
    pub yaw_min: f64,
    pub yaw_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Orientation bound: |pitch| <= pitch_max inside the region.
    pub pitch_max: f64,
    /// Target-subset overrides: |pitch| <= pitch_ts and z within [z_ts_min, z_ts_max].
    pub pitch_ts: f64,
    pub z_ts_min: f64,
    pub z_ts_max: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Workspace {
            r_min: 1.0,
            r_max: 3.0,
            yaw_min: -1.2,
            yaw_max: 1.2,
            z_min: 0.0,
            z_max: 2.5,
            pitch_max: 1.047,
            pitch_ts: 0.698,
            z_ts_min: 0.155,
            z_ts_max: 2.355,
        }
    }
}

impl Workspace {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min < self.r_max) {
            return Err(Error::Config("workspace: r_min must be < r_max".into()));
        }
        if !(self.r_min >= 0.0) {
            return Err(Error::Config("workspace: r_min must be >= 0".into()));
        }
        if !(self.yaw_min < self.yaw_max) {
            return Err(Error::Config("workspace: yaw_min must be < yaw_max".into()));
        }
        if !(self.z_min < self.z_max) {
            return Err(Error::Config("workspace: z_min must be < z_max".into()));
        }
        if !(self.pitch_max > 0.0) {
            return Err(Error::Config("workspace: pitch_max must be > 0".into()));
        }
        // The target subset must be contained in the full region.
        if self.pitch_ts > self.pitch_max
            || self.z_ts_min < self.z_min
            || self.z_ts_max > self.z_max
            || !(self.z_ts_min < self.z_ts_max)
        {
            return Err(Error::Config(
                "workspace: target subset must be contained in the full region".into(),
            ));
        }
        Ok(())
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(std::f64::consts::TAU);
    if w > std::f64::consts::PI {
        w -= std::f64::consts::TAU;
    }
    w
}

/// Closed-form forward kinematics. The pitch chain lives in the vertical
/// plane selected by the swing angle; positive pitch angles move the
/// end effector down.
pub fn forward_kinematics(chain: &KinematicChain, q: &Joints) -> Pose {
    let t1 = q[1];
    let t12 = q[1] + q[2];
    let t123 = q[1] + q[2] + q[3];
    let l3 = chain.links[2] + chain.tool_offset;
    let x_loc = chain.links[0] * t1.cos() + chain.links[1] * t12.cos() + l3 * t123.cos();
    let z_loc = chain.base_height
        - (chain.links[0] * t1.sin() + chain.links[1] * t12.sin() + l3 * t123.sin());
    let (sy, cy) = q[0].sin_cos();
    let p = [x_loc * cy, x_loc * sy, z_loc];
    let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[0])
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), t123);
    Pose { p, r }
}

/// Yaw and pitch of a roll-free orientation (Rz(yaw) * Ry(pitch)).
///
/// Extraction reads the rotation matrix columns directly, so it stays exact
/// over the full pitch range (the chain can fold well past pi/2); only the
/// decomposition singularity at |pitch| = pi/2 is flagged.
pub fn yaw_pitch(pose: &Pose) -> YawPitch {
    let m = pose.r.to_rotation_matrix();
    // For R = Rz(y)*Ry(p): m[(2,0)] = -sin p, m[(2,2)] = cos p,
    // m[(0,1)] = -sin y, m[(1,1)] = cos y.
    let pitch = (-m[(2, 0)]).atan2(m[(2, 2)]);
    let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
    let degenerate = (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6;
    YawPitch { yaw, pitch, degenerate }
}

/// Normalized geodesic distance between unit quaternions, in [0, 1].
/// Invariant under sign flip of either argument (double cover).
pub fn geodesic_distance(r1: &UnitQuaternion<f64>, r2: &UnitQuaternion<f64>) -> f64 {
    let dot = r1.w * r2.w + r1.i * r2.i + r1.j * r2.j + r1.k * r2.k;
    let c = (2.0 * dot * dot - 1.0).clamp(-1.0, 1.0);
    c.acos() / std::f64::consts::PI
}

pub fn euclidean_distance(p1: &[f64; 3], p2: &[f64; 3]) -> f64 {
    let dx = p1[0] - p2[0];
    let dy = p1[1] - p2[1];
    let dz = p1[2] - p2[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Membership in the restricted workspace region: a cylindrical sector in
/// position plus a pitch bound on orientation. All bounds closed.
pub fn in_workspace(ws: &Workspace, pose: &Pose) -> bool {
    let radial = pose.p[0].hypot(pose.p[1]);
    let azimuth = pose.p[1].atan2(pose.p[0]);
    let pitch = yaw_pitch(pose).pitch;
    radial >= ws.r_min
        && radial <= ws.r_max
        && azimuth >= ws.yaw_min
        && azimuth <= ws.yaw_max
        && pose.p[2] >= ws.z_min
        && pose.p[2] <= ws.z_max
        && pitch.abs() <= ws.pitch_max
}

/// Target-subset membership: the full-region test plus the tighter pitch
/// and height bounds used when drawing goal poses.
pub fn in_target_subset(ws: &Workspace, pose: &Pose) -> bool {
    let pitch = yaw_pitch(pose).pitch;
    in_workspace(ws, pose)
        && pitch.abs() <= ws.pitch_ts
        && pose.p[2] >= ws.z_ts_min
        && pose.p[2] <= ws.z_ts_max
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Full,
    Target,
}

/// Rejection budget before a workspace/chain mismatch is reported.
pub const SAMPLE_BUDGET: usize = 10_000;

/// Map 64 random bits to a uniform draw in [lo, hi). Owning this mapping
/// (rather than going through the rand crate's range sampling) pins the
/// exact draw values across rand upgrades; sampled configs are part of
/// reproducible artifacts.
fn uniform_in(bits: u64, lo: f64, hi: f64) -> f64 {
    // 53-bit mantissa; the 2^-53 scaling is exact.
    let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    lo + u * (hi - lo)
}

/// Draw a uniform config within joint limits, rejecting until its FK pose
/// lies in the requested region. Deterministic given the rng state.
pub fn sample_config(
    ws: &Workspace,
    chain: &KinematicChain,
    rng: &mut impl Rng,
    subset: Subset,
) -> Result<Joints> {
    for _ in 0..SAMPLE_BUDGET {
        let mut q = [0.0; 4];
        for j in 0..4 {
            q[j] = uniform_in(rng.random::<u64>(), chain.q_min[j], chain.q_max[j]);
        }
        let pose = forward_kinematics(chain, &q);
        let ok = match subset {
            Subset::Full => in_workspace(ws, &pose),
            Subset::Target => in_target_subset(ws, &pose),
        };
        if ok {
            return Ok(q);
        }
    }
    Err(Error::SamplingBudget(SAMPLE_BUDGET))
}
