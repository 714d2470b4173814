//! 7-DOF serial arm: forward kinematics, geometric Jacobian, manipulability
//! and multi-seed inverse kinematics.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix6, SMatrix, SVector, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{axis_angle_matrix, rotation_log, Primitive, Transform, Vec3};

pub const DOF: usize = 7;

pub type JointConfig = SVector<f64, DOF>;
pub type Jacobian = SMatrix<f64, 6, DOF>;

/// Position tolerance (m) an IK solution must meet.
pub const IK_POSITION_TOL: f64 = 1e-4;
/// Orientation tolerance (rad) an IK solution must meet.
pub const IK_ORIENTATION_TOL: f64 = 1e-3;
/// Solutions closer than this in max-norm count as the same solution.
pub const DISTINCTNESS_RADIUS: f64 = 0.1;

const REFERENCE_CHAIN: &str = include_str!("../data/reference_chain.toml");

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("expected {DOF} joints, found {0}")]
    JointCount(usize),
    #[error("joint {0}: lower limit must be below upper limit")]
    Limits(String),
    #[error("joint {0}: axis must be a non-zero vector")]
    Axis(String),
    #[error("link {0}: refers to missing frame {1}")]
    LinkFrame(String, usize),
    #[error("home configuration is outside the joint limits")]
    Home,
    #[error("unsupported chain format_version {0}")]
    Version(u32),
    #[error("{0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Unit rotation axis in the joint's own frame.
    pub axis: Vec3,
    /// Fixed transform from the previous joint frame to this joint.
    #[serde(default)]
    pub origin: Transform,
    pub limits: [f64; 2],
}

/// Collision capsule rigidly attached to the frame after joint `frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCapsule {
    pub name: String,
    pub frame: usize,
    pub from: Vec3,
    pub to: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainSpec", into = "ChainSpec")]
pub struct KinematicChain {
    pub name: String,
    pub base: Transform,
    pub joints: Vec<Joint>,
    /// Flange (last joint frame) to TCP.
    pub tool: Transform,
    pub home: JointConfig,
    pub links: Vec<LinkCapsule>,
    reach: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSpec {
    pub format_version: u32,
    pub name: String,
    #[serde(default)]
    pub base: Transform,
    #[serde(default)]
    pub tool: Transform,
    pub home: [f64; DOF],
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub links: Vec<LinkCapsule>,
}

impl TryFrom<ChainSpec> for KinematicChain {
    type Error = ChainError;

    fn try_from(spec: ChainSpec) -> Result<Self, ChainError> {
        if spec.format_version != 1 {
            return Err(ChainError::Version(spec.format_version));
        }
        if spec.joints.len() != DOF {
            return Err(ChainError::JointCount(spec.joints.len()));
        }
        let mut joints = spec.joints;
        for j in &mut joints {
            if !(j.limits[0] < j.limits[1]) {
                return Err(ChainError::Limits(j.name.clone()));
            }
            let n = j.axis.norm();
            if !(n > 1e-12 && n.is_finite()) {
                return Err(ChainError::Axis(j.name.clone()));
            }
            j.axis /= n;
        }
        for l in &spec.links {
            if l.frame >= DOF {
                return Err(ChainError::LinkFrame(l.name.clone(), l.frame));
            }
        }
        let home = JointConfig::from(spec.home);
        let reach = joints[1..].iter().map(|j| j.origin.translation.norm()).sum();
        let chain = KinematicChain {
            name: spec.name,
            base: spec.base,
            joints,
            tool: spec.tool,
            home,
            links: spec.links,
            reach,
        };
        if !chain.within_limits(&home) {
            return Err(ChainError::Home);
        }
        Ok(chain)
    }
}

impl From<KinematicChain> for ChainSpec {
    fn from(c: KinematicChain) -> Self {
        ChainSpec {
            format_version: 1,
            name: c.name,
            base: c.base,
            tool: c.tool,
            home: c.home.into(),
            joints: c.joints,
            links: c.links,
        }
    }
}

/// IK solutions for one target, pairwise farther apart than `distinctness_radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct IkSolutionSet {
    pub solutions: Vec<JointConfig>,
    pub target: Transform,
    pub distinctness_radius: f64,
}

impl IkSolutionSet {
    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.solutions.len()
    }
}

/// Wraps an angle into `(-π, π]`.
fn wrap_angle(a: f64) -> f64 {
    let w = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + 2.0 * std::f64::consts::PI
    } else {
        w
    }
}

pub fn max_norm(a: &JointConfig, b: &JointConfig) -> f64 {
    (a - b).amax()
}

impl KinematicChain {
    /// The reference arm shipped with the crate.
    pub fn reference() -> KinematicChain {
        Self::from_toml(REFERENCE_CHAIN).expect("bundled chain file is valid")
    }

    pub fn from_toml(text: &str) -> Result<KinematicChain, ChainError> {
        toml::from_str(text).map_err(|e| ChainError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<KinematicChain, ChainError> {
        let text = fs::read_to_string(path).map_err(|source| ChainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn lower(&self) -> JointConfig {
        JointConfig::from_fn(|i, _| self.joints[i].limits[0])
    }

    pub fn upper(&self) -> JointConfig {
        JointConfig::from_fn(|i, _| self.joints[i].limits[1])
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        q.iter()
            .zip(&self.joints)
            .all(|(v, j)| *v >= j.limits[0] && *v <= j.limits[1])
    }

    pub fn random_config<R: Rng>(&self, rng: &mut R) -> JointConfig {
        JointConfig::from_fn(|i, _| rng.gen_range(self.joints[i].limits[0]..=self.joints[i].limits[1]))
    }

    /// World pose of each joint frame after its rotation.
    pub fn joint_frames(&self, q: &JointConfig) -> [Transform; DOF] {
        let mut frames = [Transform::identity(); DOF];
        let mut t = self.base;
        for (i, j) in self.joints.iter().enumerate() {
            t = t * j.origin * Transform::from_rotation(axis_angle_matrix(&j.axis, q[i]));
            frames[i] = t;
        }
        frames
    }

    /// TCP pose in the world.
    pub fn fk(&self, q: &JointConfig) -> Transform {
        self.joint_frames(q)[DOF - 1] * self.tool
    }

    fn jacobian_from(&self, frames: &[Transform; DOF], tcp: &Vec3) -> Jacobian {
        let mut jac = Jacobian::zeros();
        for (i, j) in self.joints.iter().enumerate() {
            // rotating about the joint's own axis leaves the axis unchanged
            let z = frames[i].rotation * j.axis;
            let p = frames[i].translation;
            let lin = z.cross(&(tcp - p));
            for k in 0..3 {
                jac[(k, i)] = lin[k];
                jac[(k + 3, i)] = z[k];
            }
        }
        jac
    }

    /// Geometric Jacobian in the world frame: rows are (linear; angular) TCP velocity.
    pub fn jacobian(&self, q: &JointConfig) -> Jacobian {
        let frames = self.joint_frames(q);
        let tcp = (frames[DOF - 1] * self.tool).translation;
        self.jacobian_from(&frames, &tcp)
    }

    /// Yoshikawa manipulability, `sqrt(det(J Jᵀ))`, as the product of the
    /// singular values of `J`.
    pub fn manipulability(&self, q: &JointConfig) -> f64 {
        manipulability_of(&self.jacobian(q))
    }

    /// World-frame capsules of the arm links.
    pub fn link_capsules(&self, q: &JointConfig) -> Vec<Primitive> {
        let frames = self.joint_frames(q);
        self.links
            .iter()
            .map(|l| {
                let f = &frames[l.frame];
                Primitive::capsule_between(&f.transform_point(&l.from), &f.transform_point(&l.to), l.radius)
                    .expect("link radius validated as positive")
            })
            .collect()
    }

    /// Quick necessary condition: the wrist must be within the summed link
    /// offsets of the shoulder.
    pub fn may_reach(&self, target: &Transform) -> bool {
        let shoulder = (self.base * self.joints[0].origin).translation;
        let wrist = (*target * self.tool.inverse()).translation;
        (wrist - shoulder).norm() <= self.reach + 1e-6
    }

    /// Damped least-squares descent from `seed`. Returns a configuration
    /// within limits meeting the IK tolerances, or `None`.
    pub fn ik_solve_from(&self, target: &Transform, seed: &JointConfig) -> Option<JointConfig> {
        const MAX_ITERATIONS: usize = 300;
        const DAMPING: f64 = 1e-3;
        const MAX_STEP: f64 = 0.4;
        let (lo, hi) = (self.lower(), self.upper());
        let mut q = *seed;
        let mut best_err = f64::INFINITY;
        let mut since_improvement = 0;
        for _ in 0..MAX_ITERATIONS {
            let frames = self.joint_frames(&q);
            let tcp = frames[DOF - 1] * self.tool;
            let dp = target.translation - tcp.translation;
            let dw = rotation_log(&(target.rotation * tcp.rotation.transpose()));
            if dp.norm() < 1e-7 && dw.norm() < 1e-6 {
                break;
            }
            let err = dp.norm() + 0.1 * dw.norm();
            if err < 0.99 * best_err {
                best_err = err;
                since_improvement = 0;
            } else {
                since_improvement += 1;
                if since_improvement > 25 {
                    break;
                }
            }
            let scale_p = (0.1 / dp.norm().max(1e-12)).min(1.0);
            let scale_w = (0.5 / dw.norm().max(1e-12)).min(1.0);
            let e = Vector6::new(
                dp.x * scale_p,
                dp.y * scale_p,
                dp.z * scale_p,
                dw.x * scale_w,
                dw.y * scale_w,
                dw.z * scale_w,
            );
            let jac = self.jacobian_from(&frames, &tcp.translation);
            let a: Matrix6<f64> = jac * jac.transpose() + Matrix6::identity() * DAMPING;
            let Some(chol) = a.cholesky() else { break };
            let mut dq = jac.transpose() * chol.solve(&e);
            let m = dq.amax();
            if m > MAX_STEP {
                dq *= MAX_STEP / m;
            }
            q += dq;
            for i in 0..DOF {
                q[i] = wrap_angle(q[i]).clamp(lo[i], hi[i]);
            }
        }
        self.meets_tolerance(&q, target).then_some(q)
    }

    pub fn meets_tolerance(&self, q: &JointConfig, target: &Transform) -> bool {
        if !self.within_limits(q) {
            return false;
        }
        let tcp = self.fk(q);
        (tcp.translation - target.translation).norm() <= IK_POSITION_TOL
            && tcp.angle_to(target) <= IK_ORIENTATION_TOL
    }

    /// Seed sequence: the home configuration, then uniform samples.
    fn ik_seeds(&self, budget: usize, rng_seed: u64) -> impl Iterator<Item = JointConfig> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        (0..budget).map(move |k| if k == 0 { self.home } else { self.random_config(&mut rng) })
    }

    pub fn ik_enumerate(&self, target: &Transform, budget: usize, rng_seed: u64) -> IkSolutionSet {
        self.ik_enumerate_valid(target, budget, rng_seed, |_| true)
    }

    /// Multi-seed IK keeping only solutions accepted by `valid`
    /// (e.g. collision-free), deduplicated after filtering.
    pub fn ik_enumerate_valid(
        &self,
        target: &Transform,
        budget: usize,
        rng_seed: u64,
        valid: impl Fn(&JointConfig) -> bool,
    ) -> IkSolutionSet {
        let mut solutions: Vec<JointConfig> = Vec::new();
        if self.may_reach(target) {
            for seed in self.ik_seeds(budget, rng_seed) {
                if let Some(q) = self.ik_solve_from(target, &seed) {
                    if solutions.iter().all(|s| max_norm(s, &q) > DISTINCTNESS_RADIUS) && valid(&q) {
                        solutions.push(q);
                    }
                }
            }
        }
        IkSolutionSet {
            solutions,
            target: *target,
            distinctness_radius: DISTINCTNESS_RADIUS,
        }
    }

    /// First valid solution in seed order; `Some` exactly when
    /// [`ik_enumerate_valid`](Self::ik_enumerate_valid) would be non-empty.
    pub fn ik_first_valid(
        &self,
        target: &Transform,
        budget: usize,
        rng_seed: u64,
        valid: impl Fn(&JointConfig) -> bool,
    ) -> Option<JointConfig> {
        if !self.may_reach(target) {
            return None;
        }
        self.ik_seeds(budget, rng_seed)
            .filter_map(|seed| self.ik_solve_from(target, &seed))
            .find(|q| valid(q))
    }
}

pub fn manipulability_of(jac: &Jacobian) -> f64 {
    jac.transpose().svd(false, false).singular_values.iter().product::<f64>().max(0.0)
}

/// Mean manipulability over the valid IK solutions of `target` and their
/// count; `(0, 0)` when there are none.
pub fn situated_manipulability(
    chain: &KinematicChain,
    target: &Transform,
    budget: usize,
    rng_seed: u64,
    valid: impl Fn(&JointConfig) -> bool,
) -> (f64, usize) {
    let set = chain.ik_enumerate_valid(target, budget, rng_seed, valid);
    mean_manipulability(chain, &set.solutions)
}

pub fn mean_manipulability(chain: &KinematicChain, solutions: &[JointConfig]) -> (f64, usize) {
    if solutions.is_empty() {
        return (0.0, 0);
    }
    let sum: f64 = solutions.iter().map(|q| chain.manipulability(q)).sum();
    (sum / solutions.len() as f64, solutions.len())
}
