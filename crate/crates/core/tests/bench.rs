use std::collections::BTreeMap;
use std::path::Path;

use taskgrasp::bench::{aggregate, format_table, generate_suite, read_csv, run_suite, write_csv, GridSpec, SuiteSpec};
use taskgrasp::planner::{PipelineParams, Policy};
use taskgrasp::scene::Scene;

fn tabletop() -> Scene {
    Scene::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scenes/tabletop.toml")).unwrap()
}

fn tiny_grid(x: f64, y: f64) -> GridSpec {
    GridSpec {
        center: [x, y],
        rows: 1,
        columns: 1,
        spacing: 0.1,
    }
}

#[test]
fn trivial_suite_succeeds_for_every_policy() {
    let suite = generate_suite(&tabletop(), &tiny_grid(0.35, 0.2), 1, 1, 4).unwrap();
    assert_eq!(suite.scenarios.len(), 1);
    let policies = Policy::ALL;
    let recs = run_suite(&suite, &policies, &PipelineParams::default(), 1).unwrap();
    assert_eq!(recs.len(), 4);
    for t in aggregate(&recs, &policies, 1, 1) {
        assert_eq!((t.first_success, t.scenario_count), (1.0, 1), "{:?}", t.policy);
    }
}

#[test]
fn collision_cells_are_excluded() {
    let s = Scene::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scenes/goal_clutter.toml")).unwrap();
    // a pillar occupies this cell
    let suite = generate_suite(&s, &tiny_grid(0.45, 0.12), 1, 2, 0);
    match suite {
        Ok(suite) => {
            assert!(suite.scenarios.is_empty());
            assert_eq!(suite.excluded.len(), 1);
        }
        Err(e) => panic!("{e}"),
    }
}

/// Recomputes the per-policy metrics straight from the CSV text.
fn recompute(csv_text: &str, repeats: usize) -> BTreeMap<String, (f64, Option<f64>, Option<f64>)> {
    let mut lines = csv_text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (pc, sc, fc, stc, tc) = (col("policy"), col("success"), col("first_success"), col("path_steps"), col("planning_time"));
    let mut acc: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let e = acc.entry(f[pc].to_string()).or_default();
        if f[fc] == "true" {
            e.0 += 1;
        }
        if f[sc] == "true" {
            e.1.push(f[stc].parse().unwrap());
            e.2.push(f[tc].parse().unwrap());
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    acc.into_iter()
        .map(|(k, (first, steps, times))| (k, (first as f64 / repeats as f64, mean(&steps), mean(&times))))
        .collect()
}

#[test]
fn aggregation_is_recomputable_from_csv() {
    let s = tabletop();
    let grid = GridSpec {
        center: [0.35, 0.15],
        rows: 1,
        columns: 2,
        spacing: 0.1,
    };
    let suite = generate_suite(&s, &grid, 1, 2, 11).unwrap();
    let policies = [Policy::AtStart, Policy::AtGoal];
    let recs = run_suite(&suite, &policies, &PipelineParams::default(), 2).unwrap();
    // sorted by (scenario, repeat, policy order)
    let order: Vec<(usize, usize)> = recs.iter().map(|r| (r.scenario, r.repeat)).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.csv");
    write_csv(&recs, &path).unwrap();
    assert_eq!(read_csv(&path).unwrap(), recs);

    let tables = aggregate(&recs, &policies, suite.scenarios.len(), suite.repeats);
    let oracle = recompute(&std::fs::read_to_string(&path).unwrap(), suite.repeats);
    for t in &tables {
        let (first, steps, time) = oracle[t.policy.name()];
        assert!((t.first_success - first).abs() < 1e-12);
        assert_eq!(t.scenario_count, suite.scenarios.len());
        match (t.mean_path_steps, steps) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
            (a, b) => assert_eq!(a, b),
        }
        match (t.mean_planning_time, time) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6 * b.max(1.0)),
            (a, b) => assert_eq!(a, b),
        }
    }
    let text = format_table(&tables);
    assert!(text.starts_with("Metric Type"));
    assert!(text.contains("at_start") && text.contains("at_goal"));
}

#[test]
fn bundled_suites_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/suites");
    for name in ["translated.toml", "rotated.toml"] {
        let (spec, scene) = SuiteSpec::load(&dir.join(name)).unwrap();
        let a = spec.generate(&scene).unwrap();
        let b = spec.generate(&scene).unwrap();
        assert_eq!(a.seeds, b.seeds);
        assert_eq!(a.scenarios.len() + a.excluded.len(), 35 * spec.rotation_steps);
    }
}
