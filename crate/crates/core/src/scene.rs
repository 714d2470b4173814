//! The collision world: object, table, static obstacles, arm and hand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{primitive_distance, Primitive, Transform, Vec3};
use crate::grasping::HandModel;
use crate::kinematics::{ChainError, JointConfig, KinematicChain};
use crate::superquadric::Superquadric;

/// Penetration allowed for resting and grasping contact (m).
pub const CONTACT_TOL: f64 = 0.002;

/// Minimum number of surface samples used for a primitive in object checks.
const PRIMITIVE_SAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unsupported scene format_version {0}")]
    Version(u32),
    #[error("object at its start pose penetrates an obstacle or the table")]
    StartInCollision,
    #[error("goal position is not above the table surface")]
    GoalBelowTable,
    #[error("table must be a box primitive")]
    TableShape,
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Cached object-frame surface samples of the object shape.
#[derive(Debug, Clone)]
struct ObjectModel {
    samples: Vec<Vec3>,
}

impl ObjectModel {
    fn new(sq: Superquadric) -> Self {
        let spacing = (sq.a.min(sq.b).min(sq.c) / 3.0).clamp(0.003, 0.01);
        let samples = sq
            .sample_equal_distance(spacing)
            .map(|s| s.into_iter().map(|s| s.point).collect())
            .unwrap_or_else(|_| vec![Vec3::new(sq.a, 0.0, 0.0)]);
        ObjectModel { samples }
    }
}

/// An obstacle with its cached world-frame surface samples.
#[derive(Debug, Clone)]
struct Body {
    prim: Primitive,
    samples: Vec<Vec3>,
}

impl Body {
    fn new(prim: Primitive) -> Self {
        Body {
            samples: prim_samples(&prim),
            prim,
        }
    }
}

fn prim_samples(prim: &Primitive) -> Vec<Vec3> {
    let mut s = prim.surface_samples(PRIMITIVE_SAMPLES);
    if let Some((a, b)) = prim.segment() {
        s.extend((0..=8).map(|k| a + (b - a) * (k as f64 / 8.0)));
    } else {
        s.push(prim.center());
    }
    s
}

/// Object–primitive penetration test against the implicit surface, with
/// the given tolerance. Samples of either surface lying deeper than `tol`
/// inside the other body count as collision.
fn object_hits(
    sq: &Superquadric,
    pose: &Transform,
    object_samples: &[Vec3],
    prim: &Primitive,
    cached: Option<&[Vec3]>,
    tol: f64,
) -> bool {
    let gap = (prim.center() - pose.translation).norm() - prim.bounding_radius() - sq.bounding_radius();
    if gap > tol {
        return false;
    }
    let inv = pose.inverse();
    let fresh;
    let prim_samples = match cached {
        Some(s) => s,
        None => {
            fresh = prim_samples(prim);
            &fresh
        }
    };
    if prim_samples
        .iter()
        .any(|p| sq.radial_distance(&inv.transform_point(p)) < -tol)
    {
        return true;
    }
    object_samples
        .iter()
        .any(|p| prim.signed_distance_to_point(&pose.transform_point(p)) < -tol)
}

/// What travels with the arm and what it must avoid, for one motion phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmState {
    /// Finger closure of the hand.
    pub closure: f64,
    /// Object resting in the world; arm links must not pass through it.
    pub free_object: Option<Transform>,
    /// Object held by the hand: its pose in the TCP frame.
    pub attached: Option<Transform>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// Object shape; its own pose field is ignored, placements are explicit.
    pub object: Superquadric,
    pub start_pose: Transform,
    pub goal_pose: Transform,
    pub table: Primitive,
    pub obstacles: Vec<Primitive>,
    pub chain: KinematicChain,
    pub hand: HandModel,
    object_model: ObjectModel,
    bodies: Vec<Body>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub e1: f64,
    pub e2: f64,
}

/// On-disk scene description. `chain` and `hand` are file paths relative to
/// the scene file, or `"reference"` for the bundled models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub format_version: u32,
    pub object: ObjectSpec,
    pub start_pose: Transform,
    pub goal_pose: Transform,
    pub table: Primitive,
    #[serde(default)]
    pub obstacles: Vec<Primitive>,
    #[serde(default = "reference_name")]
    pub chain: String,
    #[serde(default = "reference_name")]
    pub hand: String,
}

fn reference_name() -> String {
    "reference".into()
}

impl Scene {
    pub fn new(
        object: Superquadric,
        start_pose: Transform,
        goal_pose: Transform,
        table: Primitive,
        obstacles: Vec<Primitive>,
        chain: KinematicChain,
        hand: HandModel,
    ) -> Result<Scene, SceneError> {
        let scene = Scene::new_unchecked(object, start_pose, goal_pose, table, obstacles, chain, hand)?;
        if !scene.object_collision_free_at(&scene.start_pose) {
            return Err(SceneError::StartInCollision);
        }
        if scene.goal_pose.translation.z <= scene.table_top() {
            return Err(SceneError::GoalBelowTable);
        }
        Ok(scene)
    }

    /// Builds a scene without the start/goal validity checks (used by the
    /// benchmark to probe candidate start cells).
    pub fn new_unchecked(
        object: Superquadric,
        start_pose: Transform,
        goal_pose: Transform,
        table: Primitive,
        obstacles: Vec<Primitive>,
        chain: KinematicChain,
        hand: HandModel,
    ) -> Result<Scene, SceneError> {
        if !matches!(table.shape, crate::geometry::Shape::Box { .. }) {
            return Err(SceneError::TableShape);
        }
        let object = object.with_pose(Transform::identity());
        let mut bodies = vec![Body::new(table)];
        bodies.extend(obstacles.iter().copied().map(Body::new));
        Ok(Scene {
            object_model: ObjectModel::new(object),
            object,
            start_pose,
            goal_pose,
            table,
            obstacles,
            chain,
            hand,
            bodies,
        })
    }

    pub fn from_spec(spec: SceneSpec, base_dir: &Path) -> Result<Scene, SceneError> {
        if spec.format_version != 1 {
            return Err(SceneError::Version(spec.format_version));
        }
        let o = &spec.object;
        let object = Superquadric::at_origin(o.a, o.b, o.c, o.e1, o.e2).map_err(|e| SceneError::Parse(e.to_string()))?;
        let chain = if spec.chain == "reference" {
            KinematicChain::reference()
        } else {
            KinematicChain::load(&base_dir.join(&spec.chain))?
        };
        let hand = if spec.hand == "reference" {
            HandModel::reference()
        } else {
            let path = base_dir.join(&spec.hand);
            let text = read(&path)?;
            HandModel::from_toml(&text).map_err(|e| SceneError::Parse(format!("{}: {e}", path.display())))?
        };
        Scene::new(object, spec.start_pose, spec.goal_pose, spec.table, spec.obstacles, chain, hand)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Scene, SceneError> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))?;
        Scene::from_spec(spec, base_dir)
    }

    pub fn load(path: &Path) -> Result<Scene, SceneError> {
        let text = read(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Scene::from_toml(&text, &dir)
    }

    /// Scene spec with the bundled chain and hand.
    pub fn to_spec(&self) -> SceneSpec {
        SceneSpec {
            format_version: 1,
            object: ObjectSpec {
                a: self.object.a,
                b: self.object.b,
                c: self.object.c,
                e1: self.object.e1,
                e2: self.object.e2,
            },
            start_pose: self.start_pose,
            goal_pose: self.goal_pose,
            table: self.table,
            obstacles: self.obstacles.clone(),
            chain: reference_name(),
            hand: reference_name(),
        }
    }

    /// Same world with a different object shape (e.g. a fitted one).
    pub fn with_object(&self, object: Superquadric, start_pose: Transform, goal_pose: Transform) -> Scene {
        let object = object.with_pose(Transform::identity());
        Scene {
            object_model: ObjectModel::new(object),
            object,
            start_pose,
            goal_pose,
            ..self.clone()
        }
    }

    pub fn with_start(&self, start_pose: Transform) -> Scene {
        Scene {
            start_pose,
            ..self.clone()
        }
    }

    /// Replaces the object with a recovered (world-posed) shape. The start
    /// becomes the fitted pose, the goal keeps the scene's start→goal
    /// displacement, and both are lifted to rest on the table if the fit
    /// sinks below it.
    pub fn with_recovered_object(&self, fitted: &Superquadric) -> Result<Scene, SceneError> {
        let object = fitted.with_pose(Transform::identity());
        let top = self.table_top();
        let lowest = object
            .sample_equal_distance(0.005)
            .map_err(|e| SceneError::Parse(e.to_string()))?;
        let settle = |pose: Transform| {
            let z = lowest.iter().map(|s| pose.transform_point(&s.point).z).fold(f64::INFINITY, f64::min);
            Transform::new(pose.rotation, pose.translation + Vec3::new(0.0, 0.0, (top - z).max(0.0)))
        };
        let start = settle(fitted.pose);
        let goal = settle(self.goal_pose * self.start_pose.inverse() * fitted.pose);
        let scene = self.with_object(object, start, goal);
        if !scene.object_collision_free_at(&start) {
            return Err(SceneError::StartInCollision);
        }
        Ok(scene)
    }

    pub fn with_obstacles(&self, obstacles: Vec<Primitive>) -> Scene {
        let mut bodies = vec![Body::new(self.table)];
        bodies.extend(obstacles.iter().copied().map(Body::new));
        Scene {
            obstacles,
            bodies,
            ..self.clone()
        }
    }

    /// World height of the table's top face.
    pub fn table_top(&self) -> f64 {
        match self.table.shape {
            crate::geometry::Shape::Box { half_extents } => {
                let up = self.table.pose.rotation.transpose() * Vec3::z();
                let h = up.x.abs() * half_extents[0] + up.y.abs() * half_extents[1] + up.z.abs() * half_extents[2];
                self.table.pose.translation.z + h
            }
            _ => unreachable!("table validated as a box"),
        }
    }

    /// The object placed at `pose` as a world superquadric.
    pub fn object_at(&self, pose: &Transform) -> Superquadric {
        self.object.with_pose(*pose)
    }

    fn object_hits_prim(&self, pose: &Transform, prim: &Primitive, samples: Option<&[Vec3]>) -> bool {
        object_hits(&self.object, pose, &self.object_model.samples, prim, samples, CONTACT_TOL)
    }

    fn object_hits_world(&self, pose: &Transform) -> bool {
        self.bodies
            .iter()
            .any(|b| self.object_hits_prim(pose, &b.prim, Some(&b.samples)))
    }

    /// True when the object at `pose` is clear of the table and obstacles;
    /// resting contact within the tolerance is allowed.
    pub fn object_collision_free_at(&self, pose: &Transform) -> bool {
        !self.object_hits_world(pose)
    }

    /// Object-frame surface samples used by the collision checks.
    pub fn object_samples(&self) -> &[Vec3] {
        &self.object_model.samples
    }

    /// True if the hand at TCP pose `tcp` with the given closure penetrates
    /// the table, an obstacle, or (beyond the contact tolerance) the object.
    pub fn check_hand_collision(&self, tcp: &Transform, closure: f64, object_pose: Option<&Transform>) -> bool {
        let prims = self.hand.primitives(tcp, closure);
        for p in &prims {
            if self.prim_hits_world(p) {
                return true;
            }
            if let Some(pose) = object_pose {
                if self.object_hits_prim(pose, p, None) {
                    return true;
                }
            }
        }
        false
    }

    fn prim_hits_world(&self, p: &Primitive) -> bool {
        self.bodies.iter().any(|b| {
            let gap = (p.center() - b.prim.center()).norm() - p.bounding_radius() - b.prim.bounding_radius();
            gap <= 0.0 && primitive_distance(p, &b.prim) < 0.0
        })
    }

    /// True if the arm at `q` (with the hand and any attached object)
    /// collides with the world, with itself, or passes through the free
    /// object. Adjacent bodies are exempt from mutual checks, and the
    /// attached object is exempt from the hand holding it.
    pub fn check_arm_collision(&self, q: &JointConfig, state: &ArmState) -> bool {
        let links = self.chain.link_capsules(q);
        let tcp = self.chain.fk(q);
        let hand = self.hand.primitives(&tcp, state.closure);

        if links.iter().chain(&hand).any(|p| self.prim_hits_world(p)) {
            return true;
        }
        let n = links.len();
        for i in 0..n {
            for j in i + 2..n {
                if primitive_distance(&links[i], &links[j]) < 0.0 {
                    return true;
                }
            }
            if i + 1 < n && hand.iter().any(|h| primitive_distance(&links[i], h) < 0.0) {
                return true;
            }
        }
        if let Some(pose) = state.free_object {
            if links.iter().any(|l| self.object_hits_prim(&pose, l, None)) {
                return true;
            }
        }
        if let Some(grip) = state.attached {
            let pose = tcp * grip;
            if self.object_hits_world(&pose) {
                return true;
            }
            // the last link carries the hand; the others must stay clear
            if links[..n.saturating_sub(1)]
                .iter()
                .any(|l| self.object_hits_prim(&pose, l, None))
            {
                return true;
            }
        }
        false
    }

    /// Within joint limits and collision-free.
    pub fn arm_valid(&self, q: &JointConfig, state: &ArmState) -> bool {
        self.chain.within_limits(q) && !self.check_arm_collision(q, state)
    }

    /// Mean manipulability over the collision-free IK solutions of `tcp`.
    pub fn situated_manipulability(&self, tcp: &Transform, state: &ArmState, budget: usize, rng_seed: u64) -> (f64, usize) {
        crate::kinematics::situated_manipulability(&self.chain, tcp, budget, rng_seed, |q| !self.check_arm_collision(q, state))
    }
}

fn read(path: &Path) -> Result<String, SceneError> {
    fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;

    fn table() -> Primitive {
        Primitive::cuboid([0.4, 0.5, 0.025], Transform::from_translation(Vec3::new(0.5, 0.0, -0.025))).unwrap()
    }

    fn cylinder() -> Superquadric {
        Superquadric::at_origin(0.04, 0.04, 0.1, 0.1, 1.0).unwrap()
    }

    fn scene(obstacles: Vec<Primitive>) -> Scene {
        Scene::new(
            cylinder(),
            Transform::from_translation(Vec3::new(0.45, -0.2, 0.1)),
            Transform::from_translation(Vec3::new(0.45, 0.1, 0.1)),
            table(),
            obstacles,
            KinematicChain::reference(),
            HandModel::reference(),
        )
        .unwrap()
    }

    #[test]
    fn resting_object_is_free() {
        let s = scene(vec![]);
        assert!(s.object_collision_free_at(&s.start_pose));
        assert!((s.table_top()).abs() < 1e-12);
        // sunk 5 mm into the table
        assert!(!s.object_collision_free_at(&Transform::from_translation(Vec3::new(0.45, 0.0, 0.095))));
    }

    #[test]
    fn object_inside_obstacle() {
        let block = Primitive::cuboid([0.05, 0.05, 0.05], Transform::from_translation(Vec3::new(0.3, 0.3, 0.2))).unwrap();
        let s = scene(vec![block]);
        assert!(!s.object_collision_free_at(&Transform::from_translation(Vec3::new(0.3, 0.3, 0.2))));
        assert!(s.object_collision_free_at(&Transform::from_translation(Vec3::new(0.3, 0.1, 0.2))));
    }

    #[test]
    fn start_validation() {
        let block = Primitive::cuboid([0.05, 0.05, 0.05], Transform::from_translation(Vec3::new(0.45, -0.2, 0.1))).unwrap();
        let r = Scene::new(
            cylinder(),
            Transform::from_translation(Vec3::new(0.45, -0.2, 0.1)),
            Transform::from_translation(Vec3::new(0.45, 0.1, 0.1)),
            table(),
            vec![block],
            KinematicChain::reference(),
            HandModel::reference(),
        );
        assert!(matches!(r, Err(SceneError::StartInCollision)));
        let r = Scene::new(
            cylinder(),
            Transform::from_translation(Vec3::new(0.45, -0.2, 0.1)),
            Transform::from_translation(Vec3::new(0.45, 0.1, -0.1)),
            table(),
            vec![],
            KinematicChain::reference(),
            HandModel::reference(),
        );
        assert!(matches!(r, Err(SceneError::GoalBelowTable)));
    }

    #[test]
    fn hand_far_above_table_is_free() {
        let s = scene(vec![]);
        let tcp = Transform::new(Transform::rot_y(std::f64::consts::PI).rotation, Vec3::new(0.5, 0.0, 0.6));
        assert!(!s.check_hand_collision(&tcp, 0.0, None));
        assert!(!s.check_hand_collision(&tcp, 0.0, Some(&s.start_pose)));
    }

    #[test]
    fn palm_inside_obstacle() {
        let block = Primitive::cuboid([0.1, 0.1, 0.1], Transform::from_translation(Vec3::new(0.5, 0.3, 0.5))).unwrap();
        let s = scene(vec![block]);
        // palm centre sits 7 cm behind the TCP along -z
        let tcp = Transform::from_translation(Vec3::new(0.5, 0.3, 0.57));
        assert!(s.check_hand_collision(&tcp, 0.0, None));
    }

    #[test]
    fn home_config_is_free() {
        let s = scene(vec![]);
        assert!(!s.check_arm_collision(&s.chain.home, &ArmState::default()));
    }

    #[test]
    fn obstacle_at_elbow() {
        let s = scene(vec![]);
        let elbow = s.chain.joint_frames(&s.chain.home)[3].translation;
        let blocked = s.with_obstacles(vec![Primitive::sphere(0.05, elbow).unwrap()]);
        assert!(blocked.check_arm_collision(&s.chain.home, &ArmState::default()));
    }

    #[test]
    fn attached_object_through_table() {
        let s = scene(vec![]);
        // TCP pointing down 5 cm above the table; a 10 cm tall object hanging
        // below the TCP reaches into the table
        let target = Transform::new(Transform::rot_y(std::f64::consts::PI).rotation, Vec3::new(0.45, 0.0, 0.05));
        let q = s.chain.ik_enumerate(&target, 60, 1).solutions[0];
        let grip = Transform::from_translation(Vec3::new(0.0, 0.0, 0.1));
        let free = ArmState {
            closure: 0.0,
            free_object: None,
            attached: None,
        };
        let holding = ArmState {
            attached: Some(grip),
            ..free
        };
        assert!(s.check_arm_collision(&q, &holding));
    }

    #[test]
    fn queries_are_pure() {
        let s = scene(vec![]);
        let q = s.chain.home;
        let st = ArmState {
            closure: 0.5,
            free_object: Some(s.start_pose),
            attached: None,
        };
        assert_eq!(s.check_arm_collision(&q, &st), s.check_arm_collision(&q, &st));
    }

    #[test]
    fn scene_toml_round_trip() {
        let s = scene(vec![Primitive::sphere(0.05, Vec3::new(0.2, 0.3, 0.2)).unwrap()]);
        let text = toml::to_string(&s.to_spec()).unwrap();
        let back = Scene::from_toml(&text, Path::new(".")).unwrap();
        assert_eq!(back.obstacles, s.obstacles);
        assert!(back.goal_pose.approx_eq(&s.goal_pose, 1e-12));
        assert!(matches!(back.table.shape, Shape::Box { .. }));
    }

    #[test]
    fn object_primitive_check_against_mesh_oracle() {
        // Independent oracle: dense mesh vertices of the object tested against
        // the primitive, and dense primitive samples tested against the
        // implicit function. The sampled check may only disagree when the
        // penetration depth is within the tolerance band.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let s = scene(vec![]);
        for _ in 0..50 {
            let pose = Transform::new(
                Transform::from_axis_angle(&Vec3::new(rng.gen(), rng.gen(), rng.gen()), rng.gen_range(0.0..3.0)).rotation,
                Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
            );
            let prim = Primitive::cuboid([0.03, 0.05, 0.02], Transform::rot_z(rng.gen_range(0.0..3.0))).unwrap();
            let sampled = s.object_hits_prim(&pose, &prim, None);
            let mesh = s.object.to_mesh(64).unwrap();
            let deep = mesh
                .vertices
                .iter()
                .map(|v| prim.signed_distance_to_point(&pose.transform_point(v)))
                .fold(f64::INFINITY, f64::min);
            let dense = prim.surface_samples(5000);
            let deep2 = dense
                .iter()
                .map(|p| s.object.radial_distance(&pose.inverse_transform_point(p)))
                .fold(f64::INFINITY, f64::min);
            let depth = deep.min(deep2);
            if depth < -3.0 * CONTACT_TOL {
                assert!(sampled, "missed penetration {depth}");
            }
            if depth > 0.0 {
                assert!(!sampled, "false positive at clearance {depth}");
            }
        }
    }
}
