use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hierslam_core::dataset::{format_significant, read_dataset, read_tum_file, write_dataset, write_tum_file, Dataset};
use hierslam_core::eval::{
    ablation_rows, association_report, ate_rmse, object_count_report, AblationRow, DaBenchOptions, EvalReport,
    RuntimeStats,
};
use hierslam_core::pipeline::{run_sequence, FrameDiagnostics, PipelineError};
use hierslam_core::sim::{generate_scene, pose_to_tum, SceneSpec};
use hierslam_core::{Ablation, AssociationMethod, PipelineConfig};

const TRAJECTORY_FILE: &str = "trajectory.txt";
const MAP_FILE: &str = "map.txt";
const REPORT_FILE: &str = "report.json";

const EXIT_INVALID_INPUT: u8 = 2;
const EXIT_TRACKING_LOST: u8 = 3;

#[derive(Parser)]
#[command(name = "hierslam", version, about = "Object-and-point visual odometry and mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence into a dataset directory.
    Simulate {
        /// Scene description (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track and map a dataset; writes the trajectory, a map dump and a report.
    Run {
        dataset: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Per-frame tracking diagnostics.
        #[arg(long)]
        diag_csv: Option<PathBuf>,
    },
    /// Absolute trajectory error of an estimate against a reference.
    Eval {
        estimate: PathBuf,
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Object counts and association F1 for each association method and
    /// observation model.
    BenchDa {
        dataset: PathBuf,
        /// Seed of the keyframe pose perturbation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to one method.
        #[arg(long)]
        da: Option<Da>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trajectory error of every system variant on one dataset.
    Ablate {
        dataset: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    da: Option<Da>,
    /// `on` interleaves tracking and mapping on one thread.
    #[arg(long)]
    deterministic: Option<Switch>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    Odom,
    Map,
    Alt,
    Points,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::Odom => Ablation::ObjectsInOdometryOnly,
            AblationArg::Map => Ablation::ObjectsInMappingOnly,
            AblationArg::Alt => Ablation::AlternateDaModel,
            AblationArg::Points => Ablation::PointsOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Da {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    #[value(name = "4")]
    Four,
}

impl From<Da> for AssociationMethod {
    fn from(d: Da) -> Self {
        match d {
            Da::One => AssociationMethod::Da1,
            Da::Two => AssociationMethod::Da2,
            Da::Three => AssociationMethod::Da3,
            Da::Four => AssociationMethod::Da4,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Errors caused by the user's input rather than by the environment.
#[derive(Debug, thiserror::Error)]
#[error(transparent)]
struct InvalidInput(anyhow::Error);

fn invalid<E: Into<anyhow::Error>>(e: E) -> anyhow::Error {
    InvalidInput(e.into()).into()
}

impl PipelineArgs {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(invalid)?;
                PipelineConfig::from_toml(&text).with_context(|| path.display().to_string()).map_err(invalid)?
            }
            None => PipelineConfig::default(),
        };
        if let Some(a) = self.ablation {
            cfg.ablation = a.into();
        }
        if let Some(d) = self.da {
            cfg.association.method = d.into();
        }
        if let Some(s) = self.deterministic {
            cfg.deterministic = matches!(s, Switch::On);
        }
        cfg.validate().map_err(invalid)?;
        Ok(cfg)
    }
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    read_dataset(dir).map_err(invalid)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut spec = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(invalid)?;
            SceneSpec::from_toml(&text).map_err(invalid)?
        }
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (scene, frames) = generate_scene(&spec).map_err(invalid)?;
    write_dataset(out, &scene, &frames)?;
    fs::write(out.join("scene.toml"), spec.to_toml())?;
    println!("wrote {} frames, {} objects to {}", frames.len(), scene.objects.len(), out.display());
    Ok(())
}

fn write_diagnostics(path: &Path, diagnostics: &[FrameDiagnostics]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(
        w,
        "frame,timestamp,keyframe,stage1_matches,stage1_inliers,stage2_matches,inliers,object_matches,point_matches,pose_iterations,tx,ty,tz,qx,qy,qz,qw"
    )?;
    for d in diagnostics {
        let pose: Vec<String> = pose_to_tum(&d.pose).iter().map(|v| format_significant(*v, 9)).collect();
        writeln!(
            w,
            "{},{:.6},{},{},{},{},{},{},{},{},{}",
            d.frame,
            d.timestamp,
            d.keyframe.map(|k| k.0.to_string()).unwrap_or_default(),
            d.stage1_matches,
            d.stage1_inliers,
            d.stage2_matches,
            d.inliers,
            d.object_matches.len(),
            d.point_matches.len(),
            d.pose_iterations,
            pose.join(","),
        )?;
    }
    w.flush()?;
    Ok(())
}

fn run(dataset: &Path, args: &PipelineArgs, out: &Path, diag_csv: Option<&Path>) -> anyhow::Result<u8> {
    let cfg = args.config()?;
    let data = load_dataset(dataset)?;
    let start = Instant::now();
    let output = run_sequence(&data.frames, &data.scene.intrinsics, &cfg).map_err(|e| match e {
        PipelineError::Map(_) => anyhow::Error::from(e),
        other => invalid(other),
    })?;
    let seconds = start.elapsed().as_secs_f64();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_tum_file(&out.join(TRAJECTORY_FILE), &output.trajectory)?;
    let map_path = out.join(MAP_FILE);
    let mut w = BufWriter::new(File::create(&map_path).with_context(|| format!("creating {}", map_path.display()))?);
    output.map.write_dump(&mut w)?;
    w.flush()?;
    if let Some(path) = diag_csv {
        write_diagnostics(path, &output.diagnostics)?;
    }

    let has_truth = !data.groundtruth.is_empty();
    let report = EvalReport {
        ate_rmse: if has_truth { ate_rmse(&output.trajectory, &data.groundtruth, true).ok() } else { None },
        tracked_frames: output.tracked_frames(),
        total_frames: output.frames_total,
        objects: output.map.objects().len(),
        association: has_truth.then(|| association_report(&data.frames, &output.diagnostics)),
        object_counts: None,
        runtime: RuntimeStats { frames: output.tracked_frames(), seconds },
    };
    write_json(&out.join(REPORT_FILE), &report)?;

    println!(
        "{}: tracked {}/{} frames, {} keyframes, {} points, {} objects",
        cfg.ablation.label(),
        output.tracked_frames(),
        output.frames_total,
        output.map.keyframes().len(),
        output.map.points().len(),
        output.map.objects().len()
    );
    if let Some(ate) = report.ate_rmse {
        println!("ate_rmse {}", format_significant(ate, 6));
    }
    if let Some(lost) = &output.lost {
        eprintln!("{lost}");
    }
    Ok(if output.lost_early() { EXIT_TRACKING_LOST } else { 0 })
}

#[derive(Serialize)]
struct AteReport {
    pairs: usize,
    ate_rmse: f64,
    ate_rmse_unaligned: f64,
}

fn eval(estimate: &Path, reference: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let est = read_tum_file(estimate).map_err(invalid)?;
    let gt = read_tum_file(reference).map_err(invalid)?;
    let report = AteReport {
        pairs: hierslam_core::eval::pair_by_timestamp(&est, &gt).len(),
        ate_rmse: ate_rmse(&est, &gt, true).map_err(invalid)?,
        ate_rmse_unaligned: ate_rmse(&est, &gt, false).map_err(invalid)?,
    };
    println!("pairs {}", report.pairs);
    println!("ate_rmse {}", format_significant(report.ate_rmse, 6));
    println!("ate_rmse_unaligned {}", format_significant(report.ate_rmse_unaligned, 6));
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("ate.json"), &report)?;
    }
    Ok(())
}

fn bench_da(dataset: &Path, seed: u64, da: Option<Da>, out: Option<&Path>) -> anyhow::Result<()> {
    let data = load_dataset(dataset)?;
    let opts = DaBenchOptions { seed, ..DaBenchOptions::default() };
    let mut report = object_count_report(&data.frames, &data.scene.intrinsics, &opts)?;
    if let Some(d) = da {
        let method: AssociationMethod = d.into();
        report.rows.retain(|r| r.method == method);
    }
    println!("ground truth objects: {}", report.ground_truth);
    println!("{:<6} {:<14} {:>7} {:>9} {:>7} {:>7}", "method", "model", "objects", "precision", "recall", "f1");
    for r in &report.rows {
        let model = serde_json::to_value(r.model)?;
        println!(
            "{:<6} {:<14} {:>7} {:>9.3} {:>7.3} {:>7.3}",
            r.method.label(),
            model.as_str().unwrap_or_default(),
            r.objects,
            r.association.precision(),
            r.association.recall(),
            r.association.f1()
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("bench_da.json"), &report)?;
    }
    Ok(())
}

fn ablate(dataset: &Path, args: &PipelineArgs, out: Option<&Path>) -> anyhow::Result<()> {
    let base = args.config()?;
    let data = load_dataset(dataset)?;
    if data.groundtruth.is_empty() {
        return Err(invalid(anyhow::anyhow!("{} has no ground truth", dataset.display())));
    }
    let variants = [
        Ablation::Full,
        Ablation::ObjectsInOdometryOnly,
        Ablation::ObjectsInMappingOnly,
        Ablation::AlternateDaModel,
        Ablation::PointsOnly,
    ];
    let rows: Vec<AblationRow> = ablation_rows(&data.frames, &data.scene.intrinsics, &base, &variants).map_err(invalid)?;
    println!("{:<8} {:>12} {:>9} {:>9}", "variant", "ate_rmse", "tracked", "seconds");
    for r in &rows {
        let ate = r.ate_rmse.map(|a| format_significant(a, 6)).unwrap_or_else(|| "-".into());
        println!("{:<8} {:>12} {:>9} {:>9.1}", r.ablation.label(), ate, r.tracked_frames, r.runtime.seconds);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("ablation.json"), &rows)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Simulate { config, seed, out } => simulate(config.as_deref(), seed, &out).map(|_| 0),
        Command::Run { dataset, pipeline, out, diag_csv } => run(&dataset, &pipeline, &out, diag_csv.as_deref()),
        Command::Eval { estimate, reference, out } => eval(&estimate, &reference, out.as_deref()).map(|_| 0),
        Command::BenchDa { dataset, seed, da, out } => bench_da(&dataset, seed, da, out.as_deref()).map(|_| 0),
        Command::Ablate { dataset, pipeline, out } => ablate(&dataset, &pipeline, out.as_deref()).map(|_| 0),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<InvalidInput>() { EXIT_INVALID_INPUT } else { 1 })
        }
    }
}
