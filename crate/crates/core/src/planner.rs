//! Grasp prioritisation by situated manipulability and multi-goal BiRRT
//! planning of the reach and transport phases.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::grasping::{get_valid_candidates, CandidateSet, GraspCandidate, GraspError, GraspParams};
use crate::kinematics::JointConfig;
use crate::scene::{ArmState, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    AtStart,
    AtGoal,
    Average,
    RandomOrder,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::AtStart, Policy::AtGoal, Policy::Average, Policy::RandomOrder];

    pub fn name(self) -> &'static str {
        match self {
            Policy::AtStart => "at_start",
            Policy::AtGoal => "at_goal",
            Policy::Average => "average",
            Policy::RandomOrder => "random_order",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown policy '{given}'; valid policies: at_start, at_goal, average, random_order")]
pub struct UnknownPolicy {
    pub given: String,
}

impl FromStr for Policy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == norm || p.name().replace('_', "") == norm)
            .ok_or_else(|| UnknownPolicy { given: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrioritizedGrasp {
    pub grasp: GraspCandidate,
    pub score_start: f64,
    pub score_goal: f64,
    pub score_avg: f64,
    pub policy: Policy,
}

impl PrioritizedGrasp {
    /// The score the policy ranks by (`None` for the random baseline).
    pub fn policy_score(&self) -> Option<f64> {
        match self.policy {
            Policy::AtStart => Some(self.score_start),
            Policy::AtGoal => Some(self.score_goal),
            Policy::Average => Some(self.score_avg),
            Policy::RandomOrder => None,
        }
    }
}

/// `(score_start, score_goal)` for every candidate, in input order.
pub fn score_candidates(scene: &Scene, candidates: &CandidateSet, ik_budget: usize) -> Vec<(f64, f64)> {
    let start = candidates.validated_at.unwrap_or(scene.start_pose);
    let goal = candidates.generated_at;
    candidates
        .grasps
        .par_iter()
        .map(|g| {
            let s = scene.situated_manipulability(&g.tcp_at(&start), &g.state_resting(&start), ik_budget, g.ik_seed).0;
            let t = scene.situated_manipulability(&g.tcp_at(&goal), &g.state_resting(&goal), ik_budget, g.ik_seed).0;
            (s, t)
        })
        .collect()
}

/// Orders already-scored candidates by `policy`: descending score with ties
/// broken by (sample, variant), or a seeded shuffle for the random baseline.
pub fn rank(grasps: &[GraspCandidate], scores: &[(f64, f64)], policy: Policy, rng_seed: u64) -> Vec<PrioritizedGrasp> {
    let mut out: Vec<PrioritizedGrasp> = grasps
        .iter()
        .zip(scores)
        .map(|(g, &(s, t))| PrioritizedGrasp {
            grasp: *g,
            score_start: s,
            score_goal: t,
            score_avg: 0.5 * (s + t),
            policy,
        })
        .collect();
    if policy == Policy::RandomOrder {
        out.sort_by_key(|p| p.grasp.key());
        out.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    } else {
        out.sort_by(|a, b| {
            let (sa, sb) = (a.policy_score().unwrap(), b.policy_score().unwrap());
            sb.total_cmp(&sa).then(a.grasp.key().cmp(&b.grasp.key()))
        });
    }
    out
}

pub fn prioritize(candidates: &CandidateSet, scene: &Scene, policy: Policy, ik_budget: usize, rng_seed: u64) -> Vec<PrioritizedGrasp> {
    rank(&candidates.grasps, &score_candidates(scene, candidates, ik_budget), policy, rng_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    /// Maximum joint-space (2-norm) distance between consecutive path configs.
    pub step_norm: f64,
    pub rrt_max_iterations: usize,
    pub goal_bias: f64,
    pub rng_seed: u64,
    /// Per-grasp wall-clock budget (s) shared by both phases.
    pub per_grasp_timeout: f64,
    pub shortcut_attempts: usize,
    /// Distinct reach end-configurations tried per grasp.
    pub reach_retries: usize,
    /// Stop after this many grasps (all when `None`).
    pub max_grasps: Option<usize>,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            step_norm: 0.05,
            rrt_max_iterations: 20_000,
            goal_bias: 0.1,
            rng_seed: 0,
            per_grasp_timeout: 10.0,
            shortcut_attempts: 100,
            reach_retries: 3,
            max_grasps: None,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.step_norm > 0.0 && self.step_norm.is_finite()) {
            return Err(PlanError::Params("step_norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return Err(PlanError::Params("goal_bias must lie in [0, 1]".into()));
        }
        if !(self.per_grasp_timeout > 0.0) {
            return Err(PlanError::Params("per_grasp_timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PlanFailure {
    #[error("iteration budget exhausted")]
    Iterations,
    #[error("timed out")]
    Timeout,
    #[error("start or every goal configuration is invalid")]
    InvalidEndpoints,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("task infeasible: {0}")]
    Infeasible(String),
    #[error("home configuration is in collision or outside joint limits")]
    InvalidHome,
    #[error("invalid planner parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Grasp(GraspError),
}

struct Tree {
    nodes: Vec<JointConfig>,
    parent: Vec<Option<usize>>,
}

impl Tree {
    fn rooted(roots: &[JointConfig]) -> Tree {
        Tree {
            nodes: roots.to_vec(),
            parent: vec![None; roots.len()],
        }
    }

    fn nearest(&self, q: &JointConfig) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (n - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn push(&mut self, q: JointConfig, parent: usize) -> usize {
        self.nodes.push(q);
        self.parent.push(Some(parent));
        self.nodes.len() - 1
    }

    /// Configs from a root to node `i`.
    fn branch(&self, mut i: usize) -> Vec<JointConfig> {
        let mut out = vec![self.nodes[i]];
        while let Some(p) = self.parent[i] {
            out.push(self.nodes[p]);
            i = p;
        }
        out.reverse();
        out
    }
}

fn steer(from: &JointConfig, to: &JointConfig, step: f64) -> JointConfig {
    let d = to - from;
    let n = d.norm();
    if n <= step {
        *to
    } else {
        from + d * (step / n)
    }
}

/// Interior and end points of the straight segment `a → b` at spacing ≤ `step`.
pub fn interpolate(a: &JointConfig, b: &JointConfig, step: f64) -> Vec<JointConfig> {
    let n = ((b - a).norm() / step).ceil().max(1.0) as usize;
    (1..=n).map(|k| if k == n { *b } else { a + (b - a) * (k as f64 / n as f64) }).collect()
}

/// Sum of joint-space 2-norm distances along a path.
pub fn path_length(path: &[JointConfig]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Multi-goal bidirectional RRT (connect variant) from `q_start` to any of
/// `goals`, collision-checked under `state`. The connected path is
/// shortcut-smoothed and re-discretised at `step_norm`.
pub fn birrt(
    scene: &Scene,
    q_start: &JointConfig,
    goals: &[JointConfig],
    state: &ArmState,
    params: &PlannerParams,
) -> Result<Vec<JointConfig>, PlanFailure> {
    birrt_until(scene, q_start, goals, state, params, Instant::now() + Duration::from_secs_f64(params.per_grasp_timeout))
}

fn birrt_until(
    scene: &Scene,
    q_start: &JointConfig,
    goals: &[JointConfig],
    state: &ArmState,
    params: &PlannerParams,
    deadline: Instant,
) -> Result<Vec<JointConfig>, PlanFailure> {
    let valid = |q: &JointConfig| scene.arm_valid(q, state);
    let goals: Vec<JointConfig> = goals.iter().copied().filter(|g| valid(g)).collect();
    if goals.is_empty() || !valid(q_start) {
        return Err(PlanFailure::InvalidEndpoints);
    }
    if goals.iter().any(|g| (g - q_start).norm() < 1e-12) {
        return Ok(vec![*q_start]);
    }
    let step = params.step_norm;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut start_tree = Tree::rooted(&[*q_start]);
    let mut goal_tree = Tree::rooted(&goals);
    // `a` grows toward a sample; `b` tries to connect to the new node
    let mut a_is_start = true;

    for _ in 0..params.rrt_max_iterations {
        if Instant::now() > deadline {
            return Err(PlanFailure::Timeout);
        }
        let (a, b) = if a_is_start {
            (&mut start_tree, &mut goal_tree)
        } else {
            (&mut goal_tree, &mut start_tree)
        };
        let target = if rng.gen::<f64>() < params.goal_bias {
            b.nodes[rng.gen_range(0..b.nodes.len())]
        } else {
            scene.chain.random_config(&mut rng)
        };
        let near = a.nearest(&target);
        let q_new = steer(&a.nodes[near], &target, step);
        if valid(&q_new) {
            let new_idx = a.push(q_new, near);
            // greedy connect of the other tree
            let mut j = b.nearest(&q_new);
            let connected = loop {
                let q = steer(&b.nodes[j], &q_new, step);
                if !valid(&q) {
                    break None;
                }
                j = b.push(q, j);
                if (q - q_new).norm() < 1e-12 {
                    break Some(j);
                }
            };
            if let Some(b_idx) = connected {
                let (s_idx, g_idx) = if a_is_start { (new_idx, b_idx) } else { (b_idx, new_idx) };
                let mut path = start_tree.branch(s_idx);
                let mut tail = goal_tree.branch(g_idx);
                tail.reverse();
                // the meeting config appears in both branches
                path.extend(tail.into_iter().skip(1));
                return Ok(smooth(path, &valid, params, &mut rng));
            }
        }
        a_is_start = !a_is_start;
    }
    Err(PlanFailure::Iterations)
}

fn segment_valid(a: &JointConfig, b: &JointConfig, step: f64, valid: &impl Fn(&JointConfig) -> bool) -> bool {
    interpolate(a, b, step).iter().all(valid)
}

fn smooth(mut path: Vec<JointConfig>, valid: &impl Fn(&JointConfig) -> bool, params: &PlannerParams, rng: &mut ChaCha8Rng) -> Vec<JointConfig> {
    for _ in 0..params.shortcut_attempts {
        if path.len() < 3 {
            break;
        }
        let i = rng.gen_range(0..path.len() - 2);
        let j = rng.gen_range(i + 2..path.len());
        if segment_valid(&path[i], &path[j], params.step_norm, valid) {
            path.drain(i + 1..j);
        }
    }
    let mut out = vec![path[0]];
    for w in path.windows(2) {
        out.extend(interpolate(&w[0], &w[1], params.step_norm));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub chosen_grasp: PrioritizedGrasp,
    /// 1-based rank of the chosen grasp in the policy order.
    pub grasps_tried: usize,
    pub candidate_count: usize,
    pub reach_path: Vec<JointConfig>,
    pub transport_path: Vec<JointConfig>,
    /// Combined joint-space arc length over `step_norm`, rounded up.
    pub path_steps: usize,
    /// Wall-clock seconds; not serialised so result files stay reproducible.
    #[serde(skip)]
    pub planning_time: f64,
}

impl PlanResult {
    pub fn first_success(&self) -> bool {
        self.grasps_tried == 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub grasp: GraspParams,
    pub planner: PlannerParams,
}

/// Full pipeline: valid candidates, prioritisation, then reach and
/// transport planning for each grasp in order until one succeeds.
pub fn plan_pick_and_place(scene: &Scene, q_home: &JointConfig, policy: Policy, params: &PipelineParams) -> Result<PlanResult, PlanError> {
    let t0 = Instant::now();
    params.planner.validate()?;
    let candidates = match get_valid_candidates(scene, &params.grasp) {
        Ok(c) => c,
        Err(GraspError::NoCandidates) => return Err(PlanError::Infeasible("no valid grasp candidates".into())),
        Err(e) => return Err(PlanError::Grasp(e)),
    };
    let ranked = prioritize(&candidates, scene, policy, params.grasp.ik_budget, derive_seed(params.planner.rng_seed, 0));
    let mut result = plan_ranked(scene, q_home, &ranked, params)?;
    result.planning_time = t0.elapsed().as_secs_f64();
    Ok(result)
}

/// Plans through an already-ranked grasp list (the benchmark shares
/// candidates and scores across policies).
pub fn plan_ranked(scene: &Scene, q_home: &JointConfig, ranked: &[PrioritizedGrasp], params: &PipelineParams) -> Result<PlanResult, PlanError> {
    let t0 = Instant::now();
    let pp = &params.planner;
    pp.validate()?;
    let start = scene.start_pose;
    let goal = scene.goal_pose;
    let limit = pp.max_grasps.unwrap_or(usize::MAX).min(ranked.len());
    if ranked.is_empty() {
        return Err(PlanError::Infeasible("no valid grasp candidates".into()));
    }

    for (rank, pg) in ranked[..limit].iter().enumerate() {
        let g = &pg.grasp;
        let reach_state = g.state_resting(&start);
        if !scene.arm_valid(q_home, &reach_state) {
            return Err(PlanError::InvalidHome);
        }
        let hold = g.state_holding();
        let budget = params.grasp.ik_budget;
        let mut reach_goals = scene
            .chain
            .ik_enumerate_valid(&g.tcp_at(&start), budget, g.ik_seed, |q| {
                scene.arm_valid(q, &reach_state) && scene.arm_valid(q, &hold)
            })
            .solutions;
        let place_goals = scene
            .chain
            .ik_enumerate_valid(&g.tcp_at(&goal), budget, g.ik_seed, |q| scene.arm_valid(q, &hold))
            .solutions;
        if reach_goals.is_empty() || place_goals.is_empty() {
            continue;
        }
        let deadline = Instant::now() + Duration::from_secs_f64(pp.per_grasp_timeout);
        for attempt in 0..pp.reach_retries {
            if reach_goals.is_empty() {
                break;
            }
            let phase = |k: u64| PlannerParams {
                rng_seed: derive_seed(pp.rng_seed, ((rank as u64) << 8) | ((attempt as u64) << 1) | k),
                ..*pp
            };
            let Ok(reach) = birrt_until(scene, q_home, &reach_goals, &reach_state, &phase(0), deadline) else {
                break;
            };
            let end = *reach.last().unwrap();
            match birrt_until(scene, &end, &place_goals, &hold, &phase(1), deadline) {
                Ok(transport) => {
                    let steps = ((path_length(&reach) + path_length(&transport)) / pp.step_norm - 1e-9).ceil().max(0.0) as usize;
                    return Ok(PlanResult {
                        chosen_grasp: *pg,
                        grasps_tried: rank + 1,
                        candidate_count: ranked.len(),
                        reach_path: reach,
                        transport_path: transport,
                        path_steps: steps,
                        planning_time: t0.elapsed().as_secs_f64(),
                    });
                }
                Err(PlanFailure::Timeout) => break,
                Err(_) => reach_goals.retain(|q| (q - end).norm() > 1e-12),
            }
        }
    }
    Err(PlanError::Infeasible(format!("none of {limit} grasps could be planned")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Primitive, Transform, Vec3};
    use crate::grasping::{AlphaVariant, HandModel};
    use crate::kinematics::KinematicChain;
    use crate::superquadric::Superquadric;

    fn table() -> Primitive {
        Primitive::cuboid([0.4, 0.5, 0.025], Transform::from_translation(Vec3::new(0.5, 0.0, -0.025))).unwrap()
    }

    fn scene() -> Scene {
        let sq = Superquadric::at_origin(0.03, 0.03, 0.06, 0.1, 1.0).unwrap();
        Scene::new(
            sq,
            Transform::from_translation(Vec3::new(0.45, 0.2, 0.06)),
            Transform::from_translation(Vec3::new(0.45, -0.15, 0.06)),
            table(),
            vec![],
            KinematicChain::reference(),
            HandModel::reference(),
        )
        .unwrap()
    }

    fn dummy(sample: usize, variant: AlphaVariant) -> GraspCandidate {
        GraspCandidate {
            object_to_tcp: Transform::identity(),
            tcp_to_hand: Transform::identity(),
            closure: 0.0,
            variant,
            sample_index: sample,
            source_sample: (0.0, 0.0),
            ik_seed: 0,
        }
    }

    #[test]
    fn policy_parsing() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert_eq!("AtGoal".parse::<Policy>().unwrap(), Policy::AtGoal);
        let err = "best".parse::<Policy>().unwrap_err().to_string();
        assert!(err.contains("at_start") && err.contains("random_order"));
    }

    #[test]
    fn rank_orders_by_policy_with_tie_break() {
        let gs = [dummy(0, AlphaVariant::Zero), dummy(1, AlphaVariant::Zero), dummy(1, AlphaVariant::Plus)];
        let scores = [(0.01, 0.02), (0.03, 0.05), (0.03, 0.02)];
        let keys = |v: Vec<PrioritizedGrasp>| v.iter().map(|p| p.grasp.key()).collect::<Vec<_>>();
        assert_eq!(keys(rank(&gs, &scores, Policy::AtGoal, 0)), vec![(1, 0), (0, 0), (1, 1)]);
        assert_eq!(keys(rank(&gs, &scores, Policy::AtStart, 0)), vec![(1, 0), (1, 1), (0, 0)]);
        let avg = rank(&[dummy(0, AlphaVariant::Zero)], &[(0.04, 0.04)], Policy::Average, 0);
        assert_eq!(avg[0].score_avg, 0.04);
        let r1 = keys(rank(&gs, &scores, Policy::RandomOrder, 9));
        assert_eq!(r1, keys(rank(&gs, &scores, Policy::RandomOrder, 9)));
    }

    #[test]
    fn interpolation_respects_step() {
        let a = JointConfig::zeros();
        let b = JointConfig::from_element(0.1);
        let pts = interpolate(&a, &b, 0.05);
        assert_eq!(pts.len(), (b.norm() / 0.05).ceil() as usize);
        assert_eq!(*pts.last().unwrap(), b);
        let mut prev = a;
        for p in pts {
            assert!((p - prev).norm() <= 0.05 + 1e-12);
            prev = p;
        }
    }

    #[test]
    fn birrt_trivial_and_random() {
        let s = scene();
        let state = ArmState::default();
        let home = s.chain.home;
        assert_eq!(birrt(&s, &home, &[home], &state, &PlannerParams::default()).unwrap(), vec![home]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut found = 0;
        for seed in 0..10 {
            let goal = loop {
                let q = s.chain.random_config(&mut rng);
                if s.arm_valid(&q, &state) {
                    break q;
                }
            };
            let params = PlannerParams { rng_seed: seed, ..Default::default() };
            if let Ok(path) = birrt(&s, &home, &[goal], &state, &params) {
                found += 1;
                assert_eq!(path[0], home);
                assert_eq!(*path.last().unwrap(), goal);
                for w in path.windows(2) {
                    assert!((w[1] - w[0]).norm() <= params.step_norm + 1e-9);
                }
                assert!(path.iter().all(|q| s.arm_valid(q, &state)));
                assert_eq!(path, birrt(&s, &home, &[goal], &state, &params).unwrap());
            }
        }
        assert_eq!(found, 10);
    }

    #[test]
    fn birrt_rejects_invalid_goals() {
        let s = scene();
        // base joint beyond its limit
        let mut q = s.chain.home;
        q[0] = 3.0;
        assert!(!s.arm_valid(&q, &ArmState::default()));
        assert_eq!(
            birrt(&s, &s.chain.home, &[q], &ArmState::default(), &PlannerParams::default()),
            Err(PlanFailure::InvalidEndpoints)
        );
    }

    #[test]
    fn param_validation() {
        assert!(PlannerParams { step_norm: 0.0, ..Default::default() }.validate().is_err());
        assert!(PlannerParams { goal_bias: 1.5, ..Default::default() }.validate().is_err());
        assert!(PlannerParams::default().validate().is_ok());
    }
}
