use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use taskgrasp::bench::{aggregate, format_table, write_csv, SuiteSpec};
use taskgrasp::cloudfit::{fit_superquadric, load_cloud, mirror_cloud, render_single_view, sample_full_cloud, save_cloud};
use taskgrasp::geometry::Vec3;
use taskgrasp::grasping::get_valid_candidates;
use taskgrasp::planner::{plan_pick_and_place, PipelineParams, PlanError, Policy};
use taskgrasp::scene::Scene;
use taskgrasp::superquadric::Superquadric;

#[derive(Parser)]
#[command(name = "taskgrasp", version, about = "Grasp planning and pick-and-place for unknown objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a superquadric to a point cloud file.
    Fit(FitArgs),
    /// Render a synthetic cloud of a superquadric.
    RenderCloud(RenderArgs),
    /// Generate grasps valid at both the start and goal poses of a scene.
    GenGrasps(GenArgs),
    /// Plan a full pick-and-place for a scene.
    Plan(PlanArgs),
    /// Run a benchmark suite over every policy.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Cloud file (`x y z` per line, optional `viewpoint x y z` line).
    cloud: PathBuf,
    /// Skip symmetry mirroring (clouds without a viewpoint are never mirrored).
    #[arg(long)]
    no_mirror: bool,
    /// Table normal used by the mirroring step.
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,1", allow_hyphen_values = true)]
    table_normal: Vec3,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Superquadric parameters file (TOML).
    superquadric: PathBuf,
    /// Sensor position; renders a single view.
    #[arg(long, value_parser = parse_vec3, conflicts_with = "full", allow_hyphen_values = true)]
    viewpoint: Option<Vec3>,
    /// Sample this many points over the whole surface instead of a single view.
    #[arg(long)]
    full: Option<usize>,
    /// Angular resolution of the single-view sensor (rad).
    #[arg(long, default_value_t = 0.002)]
    angular_resolution: f64,
    /// Gaussian noise sigma (m).
    #[arg(long, default_value_t = 0.002)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct CommonArgs {
    /// Scene file (TOML).
    #[arg(long)]
    scene: PathBuf,
    /// Pipeline parameters file (TOML with [grasp] and [planner] tables).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Overrides the grasp and planner seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "at_goal")]
    policy: Policy,
    /// Recover the object from this cloud instead of using the scene's shape.
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    no_mirror: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Suite file (TOML).
    suite: PathBuf,
    /// Comma-separated policies (default: the suite's list).
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<Policy>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Per-run results.
    #[arg(long)]
    csv: PathBuf,
    /// Also write the formatted table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got '{s}'")),
    }
}

/// Pipeline failures that mean "no plan exists" rather than bad input.
#[derive(Debug)]
struct Infeasible(String);

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Infeasible {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::RenderCloud(a) => render(a),
        Command::GenGrasps(a) => gen_grasps(a),
        Command::Plan(a) => plan(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Infeasible>() => {
            eprintln!("infeasible: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn recover_shape(cloud_path: &Path, no_mirror: bool, table_normal: &Vec3) -> Result<Superquadric> {
    let cloud = load_cloud(cloud_path)?;
    let cloud = if no_mirror || cloud.viewpoint.is_none() {
        // a cloud without a sensor position is taken to be complete
        cloud
    } else {
        let m = mirror_cloud(&cloud, table_normal)?;
        info!("mirrored across {:?} ({} violations)", m.plane, m.violations);
        m.cloud
    };
    let fit = fit_superquadric(&cloud)?;
    info!("fit residual {:.3e} after {} iterations", fit.residual, fit.iterations);
    Ok(fit.sq)
}

fn fit(a: FitArgs) -> Result<()> {
    let sq = recover_shape(&a.cloud, a.no_mirror, &a.table_normal)?;
    write(&a.output, &toml::to_string(&sq)?)
}

fn render(a: RenderArgs) -> Result<()> {
    let text = fs::read_to_string(&a.superquadric).with_context(|| format!("reading {}", a.superquadric.display()))?;
    let sq: Superquadric = toml::from_str(&text).with_context(|| format!("parsing {}", a.superquadric.display()))?;
    let cloud = match (a.viewpoint, a.full) {
        (Some(v), None) => render_single_view(&sq, v, a.angular_resolution, a.sigma, a.seed)?,
        (None, Some(n)) => sample_full_cloud(&sq, n, a.sigma, a.seed)?,
        _ => bail!("give either --viewpoint or --full"),
    };
    save_cloud(&cloud, &a.output)?;
    Ok(())
}

fn load_params(common: &CommonArgs) -> Result<PipelineParams> {
    let mut p: PipelineParams = match &common.params {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineParams::default(),
    };
    if let Some(seed) = common.seed {
        p.grasp.rng_seed = seed;
        p.planner.rng_seed = seed;
    }
    Ok(p)
}

fn gen_grasps(a: GenArgs) -> Result<()> {
    let scene = Scene::load(&a.common.scene)?;
    let params = load_params(&a.common)?;
    let set = match get_valid_candidates(&scene, &params.grasp) {
        Ok(set) => set,
        Err(taskgrasp::grasping::GraspError::NoCandidates) => return Err(Infeasible("no valid grasp candidates".into()).into()),
        Err(e) => return Err(e.into()),
    };
    info!("{} candidates", set.grasps.len());
    write(&a.common.output, &serde_json::to_string_pretty(&set)?)
}

fn plan(a: PlanArgs) -> Result<()> {
    let mut scene = Scene::load(&a.common.scene)?;
    let params = load_params(&a.common)?;
    if let Some(cloud) = &a.cloud {
        let sq = recover_shape(cloud, a.no_mirror, &Vec3::z())?;
        scene = scene.with_recovered_object(&sq)?;
    }
    let home = scene.chain.home;
    match plan_pick_and_place(&scene, &home, a.policy, &params) {
        Ok(r) => {
            info!("planned in {:.2}s after {} grasp(s), {} steps", r.planning_time, r.grasps_tried, r.path_steps);
            write(&a.common.output, &serde_json::to_string_pretty(&r)?)
        }
        Err(PlanError::Infeasible(msg)) => Err(Infeasible(msg).into()),
        Err(e) => Err(e.into()),
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let (mut spec, scene) = SuiteSpec::load(&a.suite)?;
    if let Some(r) = a.repeats {
        spec.repeats = r;
    }
    let policies = a.policies.unwrap_or_else(|| spec.policies.clone());
    if policies.is_empty() {
        bail!("no policies selected; valid policies: at_start, at_goal, average, random_order");
    }
    let suite = spec.generate(&scene)?;
    for s in &suite.excluded {
        eprintln!("excluded scenario {} (row {}, column {}, yaw {:.3}): start pose in collision", s.id, s.row, s.column, s.yaw);
    }
    let records = taskgrasp::bench::run_suite(&suite, &policies, &spec.params, a.workers)?;
    write_csv(&records, &a.csv)?;
    let tables = aggregate(&records, &policies, suite.scenarios.len(), suite.repeats);
    let text = format_table(&tables);
    print!("{text}");
    if let Some(path) = &a.table {
        write(path, &text)?;
    }
    Ok(())
}
