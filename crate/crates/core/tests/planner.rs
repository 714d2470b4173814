use std::path::Path;

use taskgrasp::geometry::{Primitive, Transform, Vec3};
use taskgrasp::grasping::get_valid_candidates;
use taskgrasp::kinematics::{ChainSpec, JointConfig, KinematicChain};
use taskgrasp::planner::{plan_pick_and_place, prioritize, PipelineParams, PlanError, PlanResult, Policy};
use taskgrasp::scene::Scene;

fn scene_file(name: &str) -> Scene {
    Scene::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scenes").join(name)).unwrap()
}

fn params(seed: u64) -> PipelineParams {
    let mut p = PipelineParams::default();
    p.grasp.rng_seed = seed;
    p.planner.rng_seed = seed;
    p
}

/// Full re-validation of both phases of a plan.
fn check_plan(s: &Scene, r: &PlanResult, step: f64) {
    let g = &r.chosen_grasp.grasp;
    let reach_state = g.state_resting(&s.start_pose);
    let hold = g.state_holding();
    assert_eq!(r.reach_path[0], s.chain.home);
    assert_eq!(r.transport_path[0], *r.reach_path.last().unwrap());
    for (path, state) in [(&r.reach_path, &reach_state), (&r.transport_path, &hold)] {
        for q in path.iter() {
            assert!(s.chain.within_limits(q));
            assert!(!s.check_arm_collision(q, state));
        }
        for w in path.windows(2) {
            assert!((w[1] - w[0]).norm() <= step + 1e-9);
        }
    }
    assert!(s.chain.meets_tolerance(r.reach_path.last().unwrap(), &g.tcp_at(&s.start_pose)));
    // the carried object moves continuously and ends at the goal
    let poses: Vec<Transform> = r.transport_path.iter().map(|q| s.chain.fk(q) * g.grip()).collect();
    for w in poses.windows(2) {
        assert!((w[1].translation - w[0].translation).norm() <= step * 1.0);
    }
    let end = poses.last().unwrap();
    assert!((end.translation - s.goal_pose.translation).norm() < 1e-3);
    assert!(end.angle_to(&s.goal_pose) < 1e-2);
}

#[test]
fn tabletop_plan_is_valid_and_deterministic() {
    let s = scene_file("tabletop.toml");
    let p = params(3);
    let r = plan_pick_and_place(&s, &s.chain.home, Policy::AtGoal, &p).unwrap();
    check_plan(&s, &r, p.planner.step_norm);
    let steps = ((taskgrasp::planner::path_length(&r.reach_path) + taskgrasp::planner::path_length(&r.transport_path)) / p.planner.step_norm).ceil() as usize;
    assert!(r.path_steps == steps || r.path_steps + 1 == steps);
    let again = plan_pick_and_place(&s, &s.chain.home, Policy::AtGoal, &p).unwrap();
    assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn enclosed_goal_is_infeasible() {
    let s = scene_file("tabletop.toml");
    let goal = Vec3::new(0.45, -0.3, 0.06);
    let mut obstacles = s.obstacles.clone();
    let wall = |h: [f64; 3], c: Vec3| Primitive::cuboid(h, Transform::from_translation(c)).unwrap();
    obstacles.push(wall([0.005, 0.06, 0.08], goal + Vec3::new(0.055, 0.0, 0.02)));
    obstacles.push(wall([0.005, 0.06, 0.08], goal + Vec3::new(-0.055, 0.0, 0.02)));
    obstacles.push(wall([0.06, 0.005, 0.08], goal + Vec3::new(0.0, 0.055, 0.02)));
    obstacles.push(wall([0.06, 0.005, 0.08], goal + Vec3::new(0.0, -0.055, 0.02)));
    obstacles.push(wall([0.06, 0.06, 0.005], goal + Vec3::new(0.0, 0.0, 0.105)));
    let s = s.with_obstacles(obstacles).with_object(s.object, s.start_pose, Transform::from_translation(goal));
    assert!(matches!(
        plan_pick_and_place(&s, &s.chain.home, Policy::AtGoal, &params(0)),
        Err(PlanError::Infeasible(_))
    ));
}

#[test]
fn goal_priority_succeeds_first_and_beats_random_order() {
    let s = scene_file("tabletop.toml");
    let starts: Vec<Vec3> = (0..20)
        .map(|k| Vec3::new(0.25 + 0.1 * (k % 5) as f64, -0.3 + 0.15 * (k / 5) as f64, s.start_pose.translation.z))
        .collect();
    let (mut first, mut tried_goal, mut tried_random) = (0, 0, 0);
    for (k, start) in starts.iter().enumerate() {
        let sc = s.with_start(Transform::from_translation(*start));
        let p = params(k as u64);
        let a = plan_pick_and_place(&sc, &sc.chain.home, Policy::AtGoal, &p).unwrap();
        let b = plan_pick_and_place(&sc, &sc.chain.home, Policy::RandomOrder, &p).unwrap();
        first += a.first_success() as usize;
        tried_goal += a.grasps_tried;
        tried_random += b.grasps_tried;
    }
    assert!(first >= 12, "first success {first}/20");
    assert!(tried_random >= tried_goal, "random {tried_random} vs goal {tried_goal}");
}

fn scaled_chain(chain: &KinematicChain, k: f64) -> KinematicChain {
    let mut spec = ChainSpec::from(chain.clone());
    spec.base.translation *= k;
    spec.tool.translation *= k;
    for j in &mut spec.joints {
        j.origin.translation *= k;
    }
    for l in &mut spec.links {
        l.from *= k;
        l.to *= k;
        l.radius *= k;
    }
    KinematicChain::try_from(spec).unwrap()
}

#[test]
fn goal_ordering_is_invariant_to_link_scale() {
    let s = scene_file("tabletop.toml");
    let mut p = params(0);
    p.grasp.spacing = Some(0.03);
    let set = get_valid_candidates(&s, &p.grasp).unwrap();
    let ranked = prioritize(&set, &s, Policy::AtGoal, p.grasp.ik_budget, 0);
    let top: Vec<_> = ranked.iter().step_by((ranked.len() / 5).max(1)).take(5).collect();
    assert_eq!(top.len(), 5);

    let k = 1.7;
    let big = scaled_chain(&s.chain, k);
    let mut rescored = Vec::new();
    for pg in &top {
        let g = &pg.grasp;
        let tcp = g.tcp_at(&s.goal_pose);
        let state = g.state_resting(&s.goal_pose);
        let sols = s.chain.ik_enumerate_valid(&tcp, p.grasp.ik_budget, g.ik_seed, |q| !s.check_arm_collision(q, &state));
        // the same joint angles realise the scaled target on the scaled arm
        let scaled_target = Transform::new(tcp.rotation, tcp.translation * k);
        let mean: f64 = sols
            .solutions
            .iter()
            .map(|q: &JointConfig| {
                let t = big.fk(q);
                assert!((t.translation - scaled_target.translation).norm() < 1e-3 * k);
                big.manipulability(q)
            })
            .sum::<f64>()
            / sols.len() as f64;
        assert!((mean / pg.score_goal - k.powi(3)).abs() < 1e-9 * k.powi(3));
        rescored.push(mean);
    }
    let order = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx
    };
    let original: Vec<f64> = top.iter().map(|pg| pg.score_goal).collect();
    assert_eq!(order(&original), order(&rescored));
}
