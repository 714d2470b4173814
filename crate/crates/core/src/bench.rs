//! Benchmark harness: start poses on a grid (optionally rotated), every
//! policy planned on the same scenarios, and aggregated metrics.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geometry::{Transform, Vec3};
use crate::grasping::{get_valid_candidates, GraspParams};
use crate::planner::{plan_ranked, rank, score_candidates, PipelineParams, Policy};
use crate::scene::{Scene, SceneError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("grid cell ({x:.3}, {y:.3}) lies outside the table top")]
    GridOffTable { x: f64, y: f64 },
    #[error("invalid suite: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Start positions: `rows` along x, `columns` along y, centred on `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub center: [f64; 2],
    pub rows: usize,
    pub columns: usize,
    pub spacing: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            center: [0.45, 0.0],
            rows: 5,
            columns: 7,
            spacing: 0.1,
        }
    }
}

impl GridSpec {
    /// Cell centres, row-major.
    pub fn cells(&self) -> Vec<(usize, usize, f64, f64)> {
        let mut out = Vec::with_capacity(self.rows * self.columns);
        for r in 0..self.rows {
            for c in 0..self.columns {
                let x = self.center[0] + (r as f64 - (self.rows - 1) as f64 / 2.0) * self.spacing;
                let y = self.center[1] + (c as f64 - (self.columns - 1) as f64 / 2.0) * self.spacing;
                out.push((r, c, x, y));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: usize,
    pub row: usize,
    pub column: usize,
    /// Yaw added to the base start orientation (rad).
    pub yaw: f64,
    pub start_pose: Transform,
}

#[derive(Debug, Clone)]
pub struct ScenarioSuite {
    pub base_scene: Scene,
    pub scenarios: Vec<Scenario>,
    /// Candidate scenarios dropped because the start pose is in collision.
    pub excluded: Vec<Scenario>,
    pub repeats: usize,
    /// Per scenario, per repeat.
    pub seeds: Vec<Vec<u64>>,
}

/// Yaw offsets for `steps` equal divisions of a full turn (`1` → `{0}`).
pub fn rotation_offsets(steps: usize) -> Vec<f64> {
    (0..steps.max(1)).map(|k| k as f64 * std::f64::consts::TAU / steps.max(1) as f64).collect()
}

pub fn generate_suite(base_scene: &Scene, grid: &GridSpec, rotation_steps: usize, repeats: usize, master_seed: u64) -> Result<ScenarioSuite, BenchError> {
    if grid.rows == 0 || grid.columns == 0 || !(grid.spacing > 0.0) || repeats == 0 {
        return Err(BenchError::Invalid("grid dimensions, spacing and repeats must be positive".into()));
    }
    let table = &base_scene.table;
    for &(_, _, x, y) in &grid.cells() {
        let top = Vec3::new(x, y, base_scene.table_top() - 1e-6);
        if !table.contains(&top) {
            return Err(BenchError::GridOffTable { x, y });
        }
    }
    let base = base_scene.start_pose;
    let mut scenarios = Vec::new();
    let mut excluded = Vec::new();
    let mut id = 0;
    for yaw in rotation_offsets(rotation_steps) {
        for &(row, column, x, y) in &grid.cells() {
            let start_pose = Transform::new(
                Transform::rot_z(yaw).rotation * base.rotation,
                Vec3::new(x, y, base.translation.z),
            );
            let s = Scenario { id, row, column, yaw, start_pose };
            id += 1;
            if base_scene.object_collision_free_at(&start_pose) {
                scenarios.push(s);
            } else {
                excluded.push(s);
            }
        }
    }
    let seeds = scenarios
        .iter()
        .map(|s| (0..repeats).map(|r| derive_seed(master_seed, (s.id * repeats + r) as u64)).collect())
        .collect();
    Ok(ScenarioSuite {
        base_scene: base_scene.clone(),
        scenarios,
        excluded,
        repeats,
        seeds,
    })
}

/// One (scenario, repeat, policy) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: usize,
    pub repeat: usize,
    pub policy: Policy,
    pub seed: u64,
    pub candidates: usize,
    pub success: bool,
    pub first_success: bool,
    /// 0 when no grasp could be planned.
    pub grasps_tried: usize,
    pub path_steps: Option<usize>,
    pub planning_time: Option<f64>,
    /// `sample_index:variant` of the chosen grasp.
    pub chosen_grasp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub policy: Policy,
    pub scenario_count: usize,
    /// Rank-1 successes averaged over repeats (may be fractional).
    pub first_success: f64,
    /// Means over all successful runs, regardless of rank.
    pub mean_path_steps: Option<f64>,
    pub mean_planning_time: Option<f64>,
    pub successful_runs: usize,
    pub runs: usize,
}

impl MetricsTable {
    pub fn first_success_rate(&self) -> f64 {
        if self.scenario_count == 0 {
            0.0
        } else {
            self.first_success / self.scenario_count as f64
        }
    }
}

fn run_one(suite: &ScenarioSuite, idx: usize, repeat: usize, policies: &[Policy], params: &PipelineParams) -> Vec<RunRecord> {
    let sc = &suite.scenarios[idx];
    let seed = suite.seeds[idx][repeat];
    let scene = suite.base_scene.with_start(sc.start_pose);
    let grasp = GraspParams { rng_seed: seed, ..params.grasp };
    let t0 = Instant::now();
    let candidates = get_valid_candidates(&scene, &grasp).ok();
    let scores = candidates
        .as_ref()
        .map(|c| score_candidates(&scene, c, grasp.ik_budget))
        .unwrap_or_default();
    let shared = t0.elapsed().as_secs_f64();

    policies
        .iter()
        .enumerate()
        .map(|(k, &policy)| {
            let mut rec = RunRecord {
                scenario: sc.id,
                repeat,
                policy,
                seed,
                candidates: candidates.as_ref().map_or(0, |c| c.grasps.len()),
                success: false,
                first_success: false,
                grasps_tried: 0,
                path_steps: None,
                planning_time: None,
                chosen_grasp: None,
            };
            if let Some(c) = &candidates {
                let run_seed = derive_seed(seed, 1 + k as u64);
                let ranked = rank(&c.grasps, &scores, policy, run_seed);
                let p = PipelineParams {
                    grasp,
                    planner: crate::planner::PlannerParams { rng_seed: run_seed, ..params.planner },
                };
                if let Ok(r) = plan_ranked(&scene, &scene.chain.home, &ranked, &p) {
                    rec.success = true;
                    rec.first_success = r.first_success();
                    rec.grasps_tried = r.grasps_tried;
                    rec.path_steps = Some(r.path_steps);
                    rec.planning_time = Some(shared + r.planning_time);
                    rec.chosen_grasp = Some(format!("{}:{}", r.chosen_grasp.grasp.sample_index, r.chosen_grasp.grasp.variant.index()));
                }
            }
            log::debug!("scenario {} repeat {repeat} {policy}: success={} tried={}", sc.id, rec.success, rec.grasps_tried);
            rec
        })
        .collect()
}

/// Runs every scenario × repeat × policy. Records come back sorted by
/// (scenario, repeat, policy order) whatever the execution order.
pub fn run_suite(suite: &ScenarioSuite, policies: &[Policy], params: &PipelineParams, workers: usize) -> Result<Vec<RunRecord>, BenchError> {
    params.planner.validate().map_err(|e| BenchError::Invalid(e.to_string()))?;
    let jobs: Vec<(usize, usize)> = (0..suite.scenarios.len())
        .flat_map(|i| (0..suite.repeats).map(move |r| (i, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BenchError::Invalid(e.to_string()))?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let records: Vec<Vec<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, r)| {
                let out = run_one(suite, i, r, policies, params);
                let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                log::info!("{n}/{} runs done", jobs.len());
                out
            })
            .collect()
    });
    Ok(records.into_iter().flatten().collect())
}

/// Aggregates raw records into one table per policy (in `policies` order).
pub fn aggregate(records: &[RunRecord], policies: &[Policy], scenario_count: usize, repeats: usize) -> Vec<MetricsTable> {
    policies
        .iter()
        .map(|&policy| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.policy == policy).collect();
            let ok: Vec<&RunRecord> = mine.iter().copied().filter(|r| r.success).collect();
            let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            let firsts = mine.iter().filter(|r| r.first_success).count();
            MetricsTable {
                policy,
                scenario_count,
                first_success: firsts as f64 / repeats.max(1) as f64,
                mean_path_steps: mean(ok.iter().filter_map(|r| r.path_steps).map(|s| s as f64).collect()),
                mean_planning_time: mean(ok.iter().filter_map(|r| r.planning_time).collect()),
                successful_runs: ok.len(),
                runs: mine.len(),
            }
        })
        .collect()
}

pub fn write_csv(records: &[RunRecord], path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Plain-text table: Metric Type, Path Steps, Planning Time, Success.
pub fn format_table(tables: &[MetricsTable]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>11} {:>15} {:>14}", "Metric Type", "Path Steps", "Planning Time", "Success");
    for t in tables {
        let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        let _ = writeln!(
            s,
            "{:<14} {:>11} {:>14}s {:>14}",
            t.policy.name(),
            opt(t.mean_path_steps, 1),
            opt(t.mean_planning_time, 2),
            format!("{}/{}", trim_float(t.first_success), t.scenario_count),
        );
    }
    s
}

fn trim_float(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

/// On-disk suite description; `scene` is relative to the suite file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub format_version: u32,
    pub scene: PathBuf,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "one")]
    pub rotation_steps: usize,
    #[serde(default = "five")]
    pub repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "all_policies")]
    pub policies: Vec<Policy>,
    #[serde(default)]
    pub params: PipelineParams,
}

fn one() -> usize {
    1
}

fn five() -> usize {
    5
}

fn all_policies() -> Vec<Policy> {
    Policy::ALL.to_vec()
}

impl SuiteSpec {
    pub fn load(path: &Path) -> Result<(SuiteSpec, Scene), BenchError> {
        let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: SuiteSpec = toml::from_str(&text).map_err(|e| BenchError::Invalid(e.to_string()))?;
        if spec.format_version != 1 {
            return Err(BenchError::Invalid(format!("unsupported format_version {}", spec.format_version)));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let scene = Scene::load(&dir.join(&spec.scene))?;
        Ok((spec, scene))
    }

    pub fn generate(&self, scene: &Scene) -> Result<ScenarioSuite, BenchError> {
        generate_suite(scene, &self.grid, self.rotation_steps, self.repeats, self.master_seed)
    }
}
