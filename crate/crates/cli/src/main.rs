// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dtsdf::combine::CombineParams;
use dtsdf::dataset::{associate_timestamps, load_intrinsics, DEFAULT_MAX_DT};
use dtsdf::eval::{depth_mae, memory_ratio, memory_stats, rpe, MetricReport, RPE_WINDOW};
use dtsdf::imageio::{write_color, write_depth_png, write_direction_mask, TUM_DEPTH_UNITS};
use dtsdf::pipeline::{run_pipeline, LostPolicy, RunConfig, SourceConfig, TrackingMode};
use dtsdf::raycast::{render_store, RaycastParams, RenderResult};
use dtsdf::synthetic::{synthesize, SynthSpec};
use dtsdf::trajectory::Trajectory;
use dtsdf::{Mode, Pose, Vec3, VoxelStore};

#[derive(Parser)]
#[command(name = "dtsdf", version, about = "Directional TSDF reconstruction")]
struct Cli {
    /// More log output.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a sequence or scene and write trajectory, stats and volume.
    Run(RunArgs),
    /// Raycast a volume snapshot at a pose.
    Render(RenderArgs),
    /// Relative pose error of an estimated trajectory.
    EvalRpe(EvalRpeArgs),
    /// Post-fusion depth error of a snapshot against the input frames.
    EvalMae(EvalMaeArgs),
    /// Write a TUM-layout sequence rendered from a scene file.
    Synth(SynthArgs),
    /// Print memory statistics of a snapshot.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Regular,
    Directional,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Regular => Mode::Regular,
            ModeArg::Directional => Mode::Directional,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackingArg {
    Icp,
    GroundTruth,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TUM sequence directory or scene JSON file.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Voxel edge length in meters.
    #[arg(long, allow_negative_numbers = true)]
    voxel_size: Option<f64>,
    /// Direction-weight threshold angle in radians.
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    tracking: Option<TrackingArg>,
    #[arg(long)]
    max_frames: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Intrinsics JSON file.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Camera-to-world pose as tx,ty,tz,qx,qy,qz,qw.
    #[arg(long, conflicts_with = "trajectory", allow_hyphen_values = true)]
    pose: Option<String>,
    /// TUM trajectory to take the pose from, with --frame.
    #[arg(long, requires = "frame")]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    frame: Option<usize>,
    /// Maximum ray length in meters.
    #[arg(long, allow_negative_numbers = true)]
    max_distance: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalRpeArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = RPE_WINDOW)]
    window: usize,
    /// Directory for CSV and JSON reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalMaeArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Estimated trajectory the snapshot was fused with.
    #[arg(long)]
    trajectory: PathBuf,
    /// TUM sequence directory or scene JSON file with the input frames.
    #[arg(long)]
    source: PathBuf,
    /// Run configuration; supplies the integration distance and frame options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    max_distance: Option<f64>,
    /// Evaluate every n-th associated frame.
    #[arg(long, default_value_t = 1)]
    every: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene JSON file.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Regular-mode snapshot of the same input, for the memory ratio.
    #[arg(long)]
    regular: Option<PathBuf>,
}

enum Outcome {
    Done,
    TrackingLost,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Render(a) => render(a).map(|_| Outcome::Done),
        Command::EvalRpe(a) => eval_rpe(a).map(|_| Outcome::Done),
        Command::EvalMae(a) => eval_mae(a).map(|_| Outcome::Done),
        Command::Synth(a) => synth(a).map(|_| Outcome::Done),
        Command::Stats(a) => stats(a).map(|_| Outcome::Done),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::TrackingLost) => {
            eprintln!("tracking lost, run halted");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// Error chain joined by ": ", leaving out causes already quoted by their
/// parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if text.contains(&msg) {
            continue;
        }
        if !text.is_empty() {
            text.push_str(": ");
        }
        text.push_str(&msg);
    }
    text
}

fn source_config(path: &Path) -> Result<SourceConfig> {
    if path.is_dir() {
        Ok(SourceConfig::Sequence {
            path: path.to_path_buf(),
            max_dt: DEFAULT_MAX_DT,
        })
    } else if path.is_file() {
        Ok(SourceConfig::Scene {
            path: path.to_path_buf(),
        })
    } else {
        bail!("--source {}: no such file or directory", path.display())
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(a: RunArgs) -> Result<Outcome> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("--config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.source {
        config.source = Some(source_config(p)?);
    }
    if let Some(m) = a.mode {
        config.mode = m.into();
    }
    if let Some(v) = a.voxel_size {
        config.voxel_size = v;
    }
    if let Some(t) = a.theta {
        config.theta = t;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(t) = a.tracking {
        config.tracking = match t {
            TrackingArg::Icp => TrackingMode::Icp,
            TrackingArg::GroundTruth => TrackingMode::GroundTruth,
        };
    }
    if a.max_frames.is_some() {
        config.max_frames = a.max_frames;
    }
    if let Some(o) = &a.out {
        config.output = Some(o.clone());
    }
    config
        .validate()
        .context("invalid configuration after command-line overrides")?;

    let source_cfg = config
        .source
        .clone()
        .ok_or_else(|| anyhow!("no input: pass --source or set `source` in the config"))?;
    let out_dir = config
        .output
        .clone()
        .ok_or_else(|| anyhow!("no output directory: pass --out or set `output` in the config"))?;
    let source = source_cfg.open().context("opening the source")?;
    let mut store = VoxelStore::new(config.store_params())?;
    let output = run_pipeline(&mut store, source.as_ref(), &config)?;
    output.write(&out_dir, &store, &config)?;

    let lost = output.stats.iter().filter(|s| !s.converged).count();
    print_json(&serde_json::json!({
        "frames": output.stats.len(),
        "lost": lost,
        "halted": output.halted,
        "memory": memory_stats(&store),
        "output": out_dir,
    }));
    if output.halted && config.lost_policy == LostPolicy::Halt {
        return Ok(Outcome::TrackingLost);
    }
    Ok(Outcome::Done)
}

fn parse_pose(text: &str) -> Result<Pose> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("--pose {text:?}: expected seven comma-separated numbers"))?;
    if v.len() != 7 {
        bail!("--pose {text:?}: expected tx,ty,tz,qx,qy,qz,qw, got {} values", v.len());
    }
    let norm = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
    if !(norm > 1e-9) {
        bail!("--pose {text:?}: zero quaternion");
    }
    let q = [v[3] / norm, v[4] / norm, v[5] / norm, v[6] / norm];
    Ok(Pose::from_quaternion(Vec3::new(v[0], v[1], v[2]), q))
}

fn load_snapshot(path: &Path) -> Result<VoxelStore> {
    VoxelStore::load(path).with_context(|| format!("--snapshot {}", path.display()))
}

fn read_trajectory(path: &Path, flag: &str) -> Result<Trajectory> {
    Trajectory::read_tum(path).with_context(|| format!("{flag} {}", path.display()))
}

fn max_distance(flag: Option<f64>, config: Option<&RunConfig>) -> Result<f64> {
    let d = flag.unwrap_or_else(|| config.cloned().unwrap_or_default().max_integration_distance);
    if !(d > 0.0) {
        bail!("--max-distance {d}: must be positive");
    }
    Ok(d)
}

fn render(a: RenderArgs) -> Result<()> {
    let store = load_snapshot(&a.snapshot)?;
    let intr = load_intrinsics(&a.intrinsics).with_context(|| format!("--intrinsics {}", a.intrinsics.display()))?;
    let pose = match (&a.pose, &a.trajectory, a.frame) {
        (Some(p), _, _) => parse_pose(p)?,
        (None, Some(t), Some(k)) => {
            let traj = read_trajectory(t, "--trajectory")?;
            traj.entries()
                .get(k)
                .map(|e| e.1)
                .ok_or_else(|| anyhow!("--frame {k}: trajectory has {} poses", traj.len()))?
        }
        _ => bail!("pass --pose or --trajectory with --frame"),
    };
    let dist = max_distance(a.max_distance, None)?;
    let tau = store.truncation();
    let result = render_store(
        &store,
        &pose,
        &intr,
        &CombineParams::new(dist, tau),
        &RaycastParams::new(dist, tau),
    )?;
    write_render(&a.out, &result)?;
    let valid = result.valid.data().iter().filter(|&&v| v).count();
    print_json(&serde_json::json!({
        "valid_pixels": valid,
        "pixels": result.valid.data().len(),
        "output": a.out,
    }));
    Ok(())
}

fn write_render(dir: &Path, r: &RenderResult) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("--out {}", dir.display()))?;
    write_depth_png(&dir.join("depth.png"), &r.depth, TUM_DEPTH_UNITS)?;
    write_color(&dir.join("color.png"), &r.color)?;
    let normals = r.normal_map.map(|n| match n {
        Some(n) => [n.x, n.y, n.z].map(|c| (0.5 * (c + 1.0)) as f32),
        None => [0.0; 3],
    });
    write_color(&dir.join("normals.png"), &normals)?;
    write_direction_mask(&dir.join("directions.png"), &r.direction_mask)?;
    Ok(())
}

fn write_report(dir: &Path, name: &str, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("--out {}", dir.display()))?;
    report.write_csv(&dir.join(format!("{name}.csv")))?;
    report.write_json(&dir.join(format!("{name}.json")))?;
    Ok(())
}

fn eval_rpe(a: EvalRpeArgs) -> Result<()> {
    let est = read_trajectory(&a.est, "--est")?;
    let gt = read_trajectory(&a.gt, "--gt")?;
    let report =
        rpe(&est, &gt, a.window).with_context(|| format!("--est {} / --gt {}", a.est.display(), a.gt.display()))?;
    if let Some(dir) = &a.out {
        write_report(dir, "rpe_translation", &report.translation)?;
        write_report(dir, "rpe_rotation", &report.rotation)?;
    }
    print_json(&serde_json::json!({
        "translation": report.translation.summary_json(),
        "rotation": report.rotation.summary_json(),
    }));
    Ok(())
}

fn eval_mae(a: EvalMaeArgs) -> Result<()> {
    if a.every == 0 {
        bail!("--every must be at least 1");
    }
    let config = match &a.config {
        Some(p) => Some(RunConfig::load(p).with_context(|| format!("--config {}", p.display()))?),
        None => None,
    };
    let store = load_snapshot(&a.snapshot)?;
    let traj = read_trajectory(&a.trajectory, "--trajectory")?;
    let source = source_config(&a.source)?
        .open()
        .with_context(|| format!("--source {}", a.source.display()))?;
    let dist = max_distance(a.max_distance, config.as_ref())?;
    let opts = config.unwrap_or_default().frame_options();
    let intr = *source.intrinsics();
    let tau = store.truncation();
    let (cp, rp) = (CombineParams::new(dist, tau), RaycastParams::new(dist, tau));

    let source_ts: Vec<f64> = (0..source.len()).map(|k| source.timestamp(k)).collect();
    let pairs = associate_timestamps(&traj.timestamps(), &source_ts, DEFAULT_MAX_DT);
    if pairs.is_empty() {
        bail!(
            "--trajectory {}: no pose matches a frame timestamp of --source {}",
            a.trajectory.display(),
            a.source.display()
        );
    }
    let mut frames = Vec::new();
    let mut values = Vec::new();
    let mut skipped = 0;
    for &(i, k) in pairs.iter().step_by(a.every) {
        let frame = source.load(k, &opts)?;
        let pose = traj.entries()[i].1;
        let render = render_store(&store, &pose, &intr, &cp, &rp)?;
        match depth_mae(&render.depth, &frame.depth, None) {
            Some(e) => {
                frames.push(k);
                values.push(e * 1000.0);
            }
            None => skipped += 1,
        }
    }
    let report = MetricReport::new("mm", frames, values, skipped);
    if let Some(dir) = &a.out {
        write_report(dir, "mae", &report)?;
    }
    print_json(&report.summary_json());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::load(&a.spec).with_context(|| format!("--spec {}", a.spec.display()))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let n = synthesize(&spec, &a.out).with_context(|| format!("--out {}", a.out.display()))?;
    print_json(&serde_json::json!({ "frames": n, "output": a.out }));
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let store = load_snapshot(&a.snapshot)?;
    let s = memory_stats(&store);
    let mut value = serde_json::to_value(&s)?;
    if let Some(p) = &a.regular {
        let reg = VoxelStore::load(p).with_context(|| format!("--regular {}", p.display()))?;
        if reg.mode() != Mode::Regular {
            bail!("--regular {}: snapshot is {}", p.display(), reg.mode());
        }
        value["ratio"] = serde_json::json!(memory_ratio(&s, &memory_stats(&reg)));
    }
    print_json(&value);
    Ok(())
}
