//! Hand model, grasp frames, and candidate generation/validation.
//!
//! Candidates are generated with the object at its goal pose and then
//! filtered at the start pose: a grasp that cannot be realised where the
//! object will be placed is never worth trying where it is picked up.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geometry::{Primitive, Transform, Vec3};
use crate::scene::{ArmState, Scene};
use crate::superquadric::{ShapeError, Superquadric, SurfaceSample};
use rayon::prelude::*;

const REFERENCE_HAND: &str = include_str!("../data/reference_hand.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraspError {
    #[error("surface normal is parallel to both candidate closing axes")]
    Degenerate,
    #[error("no grasp candidate survives at both the start and goal poses")]
    NoCandidates,
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandModel {
    pub format_version: u32,
    pub name: String,
    /// Palm box in the TCP frame.
    pub palm: Primitive,
    /// Finger base points in the TCP frame; each finger closes toward x = 0.
    pub finger_bases: Vec<Vec3>,
    pub finger_radius: f64,
    pub proximal_length: f64,
    pub distal_length: f64,
    pub closure_max: f64,
    /// Hand origin in the TCP frame.
    pub tcp_to_hand: Transform,
}

impl HandModel {
    pub fn reference() -> HandModel {
        Self::from_toml(REFERENCE_HAND).expect("bundled hand file is valid")
    }

    pub fn from_toml(text: &str) -> Result<HandModel, GraspError> {
        let hand: HandModel = toml::from_str(text).map_err(|e| GraspError::Parse(e.to_string()))?;
        if hand.format_version != 1 {
            return Err(GraspError::Parse(format!("unsupported hand format_version {}", hand.format_version)));
        }
        let positive = [hand.finger_radius, hand.proximal_length, hand.distal_length, hand.closure_max];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GraspError::Parse("finger dimensions and closure_max must be positive".into()));
        }
        Ok(hand)
    }

    fn inward(&self, finger: usize) -> Vec3 {
        Vec3::new(-self.finger_bases[finger].x.signum(), 0.0, 0.0)
    }

    /// Proximal and distal segment end points of a finger, TCP frame.
    pub fn finger_segments(&self, finger: usize, closure: f64) -> [(Vec3, Vec3); 2] {
        let base = self.finger_bases[finger];
        let h = self.inward(finger);
        let dir = |phi: f64| Vec3::z() * phi.cos() + h * phi.sin();
        let knuckle = base + dir(closure) * self.proximal_length;
        let tip = knuckle + dir(2.0 * closure) * self.distal_length;
        [(base, knuckle), (knuckle, tip)]
    }

    /// Points on the inner (closing) face of a finger, TCP frame.
    pub fn inner_contact_points(&self, finger: usize, closure: f64) -> Vec<Vec3> {
        let h = self.inward(finger);
        let r = self.finger_radius;
        let mut pts = Vec::with_capacity(10);
        for (seg, phi) in self.finger_segments(finger, closure).iter().zip([closure, 2.0 * closure]) {
            let normal = -Vec3::z() * phi.sin() + h * phi.cos();
            for k in 1..=5 {
                let t = k as f64 / 5.0;
                pts.push(seg.0 + (seg.1 - seg.0) * t + normal * r);
            }
        }
        let [_, (knuckle, tip)] = self.finger_segments(finger, closure);
        pts.push(tip + (tip - knuckle).normalize() * r);
        pts
    }

    /// World-frame palm box and finger capsules.
    pub fn primitives(&self, tcp: &Transform, closure: f64) -> Vec<Primitive> {
        let mut prims = vec![self.palm.transformed(tcp)];
        for f in 0..self.finger_bases.len() {
            for (a, b) in self.finger_segments(f, closure) {
                prims.push(
                    Primitive::capsule_between(&tcp.transform_point(&a), &tcp.transform_point(&b), self.finger_radius)
                        .expect("finger radius validated as positive"),
                );
            }
        }
        prims
    }
}

/// Closes every finger until its inner face first touches the object's
/// implicit surface; returns the smallest closure over the fingers.
pub fn close_fingers(hand: &HandModel, tcp: &Transform, object: &Superquadric) -> f64 {
    const SCAN_STEPS: usize = 24;
    let touches = |finger: usize, closure: f64| {
        hand.inner_contact_points(finger, closure)
            .iter()
            .any(|p| object.implicit_value_world(&tcp.transform_point(p)) < 1.0)
    };
    let mut common = hand.closure_max;
    for f in 0..hand.finger_bases.len() {
        let closure = if touches(f, 0.0) {
            0.0
        } else {
            let mut result = hand.closure_max;
            let mut prev = 0.0;
            for k in 1..=SCAN_STEPS {
                let theta = hand.closure_max * k as f64 / SCAN_STEPS as f64;
                if touches(f, theta) {
                    let (mut lo, mut hi) = (prev, theta);
                    for _ in 0..30 {
                        let mid = 0.5 * (lo + hi);
                        if touches(f, mid) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    result = lo;
                    break;
                }
                prev = theta;
            }
            result
        };
        common = common.min(closure);
    }
    common
}

/// Grasp frame from a surface point, its outward normal and a preferred
/// closing axis (object frame). `None` if the axis is parallel to the normal.
pub fn grasp_frame_with_axis(point: &Vec3, normal: &Vec3, axis: &Vec3) -> Option<Transform> {
    let z = -normal.normalize();
    let projected = axis - z * z.dot(axis);
    if projected.norm() < 1e-6 {
        return None;
    }
    let x = projected.normalize();
    let y = z.cross(&x);
    Some(Transform::new(nalgebra::Matrix3::from_columns(&[x, y, z]), *point))
}

/// Object-to-TCP frame for a surface sample: approach along the inward
/// normal, fingers closing along the object's smallest axis (or the second
/// smallest when the first is parallel to the normal).
pub fn build_grasp_frame(sample: &SurfaceSample, sq: &Superquadric) -> Result<Transform, GraspError> {
    let axes = sq.axes_by_extent();
    grasp_frame_with_axis(&sample.point, &sample.normal, &axes[0])
        .or_else(|| grasp_frame_with_axis(&sample.point, &sample.normal, &axes[1]))
        .ok_or(GraspError::Degenerate)
}

/// The frame and its rotations by `+alpha` and `-alpha` about its own x axis.
pub fn alpha_variants(frame: &Transform, alpha: f64) -> [Transform; 3] {
    [*frame, *frame * Transform::rot_x(alpha), *frame * Transform::rot_x(-alpha)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaVariant {
    Zero,
    Plus,
    Minus,
}

impl AlphaVariant {
    pub const ALL: [AlphaVariant; 3] = [AlphaVariant::Zero, AlphaVariant::Plus, AlphaVariant::Minus];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    /// TCP pose in the object frame.
    pub object_to_tcp: Transform,
    pub tcp_to_hand: Transform,
    pub closure: f64,
    pub variant: AlphaVariant,
    pub sample_index: usize,
    /// Surface angles `(eta, omega)` of the source sample.
    pub source_sample: (f64, f64),
    /// Seed of the IK queries made for this grasp.
    pub ik_seed: u64,
}

impl GraspCandidate {
    /// Stable ordering key: sample, then variant.
    pub fn key(&self) -> (usize, usize) {
        (self.sample_index, self.variant.index())
    }

    pub fn tcp_at(&self, object_pose: &Transform) -> Transform {
        *object_pose * self.object_to_tcp
    }

    /// Object pose in the TCP frame while held.
    pub fn grip(&self) -> Transform {
        self.object_to_tcp.inverse()
    }

    /// Arm state while the hand is at the grasp and the object rests at `object_pose`.
    pub fn state_resting(&self, object_pose: &Transform) -> ArmState {
        ArmState {
            closure: self.closure,
            free_object: Some(*object_pose),
            attached: None,
        }
    }

    /// Arm state while carrying the object.
    pub fn state_holding(&self) -> ArmState {
        ArmState {
            closure: self.closure,
            free_object: None,
            attached: Some(self.grip()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub grasps: Vec<GraspCandidate>,
    pub generated_at: Transform,
    /// Start pose the set was validated at, once validated.
    pub validated_at: Option<Transform>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraspParams {
    /// Hand rotation of the ± variants about the frame x axis (rad).
    pub alpha: f64,
    /// Surface sample spacing (m); defaults to a quarter of the smallest extent.
    pub spacing: Option<f64>,
    /// IK seeds per existence or enumeration query.
    pub ik_budget: usize,
    pub rng_seed: u64,
}

impl Default for GraspParams {
    fn default() -> Self {
        GraspParams {
            alpha: 30f64.to_radians(),
            spacing: None,
            ik_budget: 20,
            rng_seed: 0,
        }
    }
}

pub fn default_spacing(sq: &Superquadric) -> f64 {
    (0.25 * sq.a.min(sq.b).min(sq.c)).clamp(0.01, 0.04)
}

/// Collision-free closing of one grasp at a given object pose.
fn evaluate_pose(scene: &Scene, frame: &Transform, object_pose: &Transform, closure: Option<f64>) -> Option<f64> {
    let tcp = *object_pose * *frame;
    let closure = closure.unwrap_or_else(|| close_fingers(&scene.hand, &tcp, &scene.object_at(object_pose)));
    (!scene.check_hand_collision(&tcp, closure, Some(object_pose))).then_some(closure)
}

fn ik_feasible(scene: &Scene, g: &GraspCandidate, object_pose: &Transform, budget: usize) -> bool {
    let state = g.state_resting(object_pose);
    scene
        .chain
        .ik_first_valid(&g.tcp_at(object_pose), budget, g.ik_seed, |q| !scene.check_arm_collision(q, &state))
        .is_some()
}

/// Surface samples used for candidate generation.
pub fn grasp_samples(sq: &Superquadric, params: &GraspParams) -> Result<Vec<SurfaceSample>, GraspError> {
    Ok(sq.sample_equal_distance(params.spacing.unwrap_or_else(|| default_spacing(sq)))?)
}

/// Candidates for the scene's object placed at `object_pose`: every surface
/// sample yields up to three frames (the α variants), each kept when the
/// closed hand is collision-free and a collision-free IK solution exists.
pub fn generate_grasps(scene: &Scene, object_pose: &Transform, params: &GraspParams) -> Result<CandidateSet, GraspError> {
    let samples = grasp_samples(&scene.object, params)?;
    let per_sample: Vec<Vec<GraspCandidate>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let Ok(frame) = build_grasp_frame(sample, &scene.object) else {
                return Vec::new();
            };
            let mut out = Vec::new();
            for (variant, f) in AlphaVariant::ALL.into_iter().zip(alpha_variants(&frame, params.alpha)) {
                let Some(closure) = evaluate_pose(scene, &f, object_pose, None) else {
                    continue;
                };
                let g = GraspCandidate {
                    object_to_tcp: f,
                    tcp_to_hand: scene.hand.tcp_to_hand,
                    closure,
                    variant,
                    sample_index: i,
                    source_sample: (sample.eta, sample.omega),
                    ik_seed: derive_seed(params.rng_seed, ((i as u64) << 2) | variant.index() as u64),
                };
                if ik_feasible(scene, &g, object_pose, params.ik_budget) {
                    out.push(g);
                }
            }
            out
        })
        .collect();
    Ok(CandidateSet {
        grasps: per_sample.into_iter().flatten().collect(),
        generated_at: *object_pose,
        validated_at: None,
    })
}

/// Keeps the candidates that are also collision-free and reachable with
/// the object at `start_pose`.
pub fn validate_at(scene: &Scene, set: &CandidateSet, start_pose: &Transform, params: &GraspParams) -> CandidateSet {
    let keep: Vec<bool> = set
        .grasps
        .par_iter()
        .map(|g| {
            evaluate_pose(scene, &g.object_to_tcp, start_pose, Some(g.closure)).is_some()
                && ik_feasible(scene, g, start_pose, params.ik_budget)
        })
        .collect();
    CandidateSet {
        grasps: set
            .grasps
            .iter()
            .zip(keep)
            .filter_map(|(g, k)| k.then_some(*g))
            .collect(),
        generated_at: set.generated_at,
        validated_at: Some(*start_pose),
    }
}

/// Candidates executable at both the start and goal poses of the scene.
pub fn get_valid_candidates(scene: &Scene, params: &GraspParams) -> Result<CandidateSet, GraspError> {
    let at_goal = generate_grasps(scene, &scene.goal_pose, params)?;
    let valid = validate_at(scene, &at_goal, &scene.start_pose, params);
    if valid.grasps.is_empty() {
        return Err(GraspError::NoCandidates);
    }
    Ok(valid)
}
