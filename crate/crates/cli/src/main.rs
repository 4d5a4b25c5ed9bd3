//! `lfcal`: calibrate a planar camera array from checkerboard captures, then
//! use the result to rectify or refocus the captured light field.
//!
//! Exit codes: 0 success, 2 usage error, 3 unreadable or invalid data,
//! 4 numerical failure. All output files are written atomically; a failed
//! command leaves nothing behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lfcal::dataio::{self, DataError};
use lfcal::lightfield::{
    encode_pnm, read_pnm, rectify, refocus, sharpness, Image, LightField, LightFieldError,
};
use lfcal::optim::{optimize, per_viewpoint_errors, reprojection_rms, OptimError, TerminationReason};
use lfcal::simulator::{add_noise, generate_scene, run_noise_sweep, trial_seeds, SimConfig, SimError};
use lfcal::zhang::{run_closed_form, CalibrationError};
use lfcal::{CalibrationResult, ObservationSet, OptimizeOptions, OptimizeReport};

#[derive(Parser)]
#[command(name = "lfcal", version, about = "Camera-array calibration and light field resampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate an array from an observation file.
    Calibrate(CalibrateArgs),
    /// Generate synthetic observations from a rig preset or config file.
    Simulate(SimulateArgs),
    /// Run the noise sweep and write per-sigma accuracy statistics as CSV.
    Sweep(SweepArgs),
    /// Resample every view onto a common rotation-free target plane.
    Rectify(RectifyArgs),
    /// Average all views onto the synthetic focal plane at one depth.
    Refocus(RefocusArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Observation file (lfcal observations v1).
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    /// Calibration file to write.
    #[arg(short, long, value_name = "FILE")]
    output: PathBuf,
    /// Keep intrinsics at their closed-form values.
    #[arg(long)]
    no_intrinsics: bool,
    /// Keep distortion at zero.
    #[arg(long)]
    no_distortion: bool,
    /// Pin the skew term at zero (allows 2-frame captures).
    #[arg(long)]
    fix_skew: bool,
    /// Iteration budget for the global refinement.
    #[arg(long, value_name = "N")]
    max_iters: Option<usize>,
    /// Relative cost-improvement tolerance.
    #[arg(long, value_name = "TOL")]
    tol: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in rig: the 5x5 reference array or a single camera.
    #[arg(short, long, value_name = "NAME", default_value = "array5x5",
          conflicts_with = "config")]
    preset: String,
    /// Config file (lfcal simconfig v1) instead of a preset.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the config's noise level (px).
    #[arg(long, value_name = "SIGMA")]
    noise: Option<f64>,
    /// Observation file to write.
    #[arg(short, long, value_name = "FILE")]
    output: PathBuf,
    /// Also write the generating model as a calibration file; its report
    /// carries the model's reprojection statistics on the emitted data.
    #[arg(long, value_name = "FILE")]
    ground_truth: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Config file (lfcal simconfig v1); defaults to the 5x5 reference rig.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Comma-separated noise levels in pixels.
    #[arg(long, value_name = "LIST", default_value = "0.2,0.4,0.6,0.8,1.0,1.2,1.4,1.6,1.8")]
    sigmas: String,
    /// Trials per noise level.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    /// Override the config's master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// CSV file to write.
    #[arg(short, long, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Args)]
struct RectifyArgs {
    /// Calibration file for the rig that captured the images.
    #[arg(short, long, value_name = "FILE")]
    calibration: PathBuf,
    /// Directory for the rectified views (created if missing).
    #[arg(short, long, value_name = "DIR")]
    out_dir: PathBuf,
    /// One PGM/PPM image per viewpoint, in viewpoint order.
    #[arg(value_name = "IMAGE", required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct RefocusArgs {
    /// Calibration file for the rig that captured the images.
    #[arg(short, long, value_name = "FILE")]
    calibration: PathBuf,
    /// Synthetic focal depth in mm, measured along the reference axis.
    #[arg(short, long, value_name = "MM")]
    depth: f64,
    /// Refocused image to write.
    #[arg(short, long, value_name = "FILE")]
    output: PathBuf,
    /// One PGM/PPM image per viewpoint, in viewpoint order.
    #[arg(value_name = "IMAGE", required = true)]
    images: Vec<PathBuf>,
}

/// Anything a command can fail with, tagged with its exit code.
enum CmdError {
    Data(String),
    Numerical(String),
}

impl CmdError {
    fn code(&self) -> u8 {
        match self {
            CmdError::Data(_) => 3,
            CmdError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CmdError::Data(m) | CmdError::Numerical(m) => m,
        }
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        CmdError::Data(e.to_string())
    }
}

impl From<SimError> for CmdError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig { .. } => CmdError::Data(e.to_string()),
            _ => CmdError::Numerical(e.to_string()),
        }
    }
}

impl From<CalibrationError> for CmdError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Observation(_) | CalibrationError::InsufficientFrames { .. } => {
                CmdError::Data(e.to_string())
            }
            _ => CmdError::Numerical(e.to_string()),
        }
    }
}

impl From<OptimError> for CmdError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::ShapeMismatch { .. } | OptimError::Observation(_) => {
                CmdError::Data(e.to_string())
            }
            _ => CmdError::Numerical(e.to_string()),
        }
    }
}

impl From<LightFieldError> for CmdError {
    fn from(e: LightFieldError) -> Self {
        match e {
            LightFieldError::RayParallel | LightFieldError::Geometry(_) => {
                CmdError::Numerical(e.to_string())
            }
            _ => CmdError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Rectify(args) => cmd_rectify(args),
        Command::Refocus(args) => cmd_refocus(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// LFCAL_THREADS caps the worker pool; unset means one thread per core.
fn configure_threads() {
    if let Ok(v) = std::env::var("LFCAL_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CmdError> {
    let obs = dataio::read_observations(&args.input)?;
    obs.validate_for_calibration().map_err(|e| CmdError::Data(e.to_string()))?;

    let defaults = OptimizeOptions::default();
    let opts = OptimizeOptions {
        refine_intrinsics: !args.no_intrinsics,
        refine_distortion: !args.no_distortion,
        fix_skew: args.fix_skew,
        max_iterations: args.max_iters.unwrap_or(defaults.max_iterations),
        cost_rel_tol: args.tol.unwrap_or(defaults.cost_rel_tol),
        ..defaults
    };

    let init = run_closed_form(&obs, args.fix_skew)?;
    let result = optimize(&init, &obs, &opts)?;
    print!("{}", describe_run(&result.report, &obs));
    dataio::write_calibration(&result, &args.output)?;
    println!("calibration -> {}", args.output.display());
    Ok(())
}

fn describe_run(report: &OptimizeReport, obs: &ObservationSet) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "calibrating {} viewpoints, {} frames, {} observations",
        obs.n_viewpoints(),
        obs.n_frames(),
        obs.len()
    );
    let _ = writeln!(out, "initial rms: {:.6} px", report.initial_rms);
    let _ = writeln!(out, "final rms:   {:.6} px", report.final_rms);
    let _ = writeln!(out, "iterations:  {} ({})", report.iterations, report.termination);
    let _ = writeln!(out, "per-viewpoint rms (px):");
    for (i, rms) in report.per_viewpoint_rms.iter().enumerate() {
        let _ = writeln!(out, "  {i:3}  {rms:.6}");
    }
    let _ = writeln!(out, "spread across viewpoints: {:.6} px", report.per_viewpoint_rms_std);
    out
}

fn load_config(
    preset: Option<&str>,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<SimConfig, CmdError> {
    let mut cfg = match (preset, config) {
        (_, Some(path)) => dataio::read_sim_config(path)?,
        (Some("array5x5") | None, None) => SimConfig::array_5x5(),
        (Some("single"), None) => SimConfig::single(),
        (Some(other), None) => {
            return Err(CmdError::Data(format!(
                "unknown preset {other:?}; choose array5x5 or single"
            )))
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CmdError> {
    let mut cfg = load_config(Some(&args.preset), args.config.as_deref(), args.seed)?;
    if let Some(sigma) = args.noise {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(CmdError::Data(format!("noise level must be >= 0, got {sigma}")));
        }
        cfg.noise_sigma = sigma;
    }
    cfg.validate().map_err(CmdError::from)?;

    let (pose_seed, noise_seed) = trial_seeds(cfg.seed, 0);
    let (truth, clean) = generate_scene(&cfg, pose_seed)?;
    let obs = if cfg.noise_sigma > 0.0 {
        add_noise(&clean, cfg.noise_sigma, noise_seed)
    } else {
        clean
    };
    dataio::write_observations(&obs, &args.output)?;
    println!("{} observations -> {}", obs.len(), args.output.display());

    if let Some(path) = &args.ground_truth {
        let report = truth_report(&truth, &obs)?;
        dataio::write_calibration(&CalibrationResult { calibration: truth, report }, path)?;
        println!("ground truth -> {}", path.display());
    }
    Ok(())
}

/// Reprojection statistics of the generating model on the emitted data.
/// Zero iterations marks the report as describing a model that was stated,
/// not estimated.
fn truth_report(
    truth: &lfcal::ArrayCalibration,
    obs: &ObservationSet,
) -> Result<OptimizeReport, CmdError> {
    let rms = reprojection_rms(truth, obs)?;
    let per_viewpoint = per_viewpoint_errors(truth, obs)?;
    let mean = per_viewpoint.iter().sum::<f64>() / per_viewpoint.len() as f64;
    let var =
        per_viewpoint.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_viewpoint.len() as f64;
    Ok(OptimizeReport {
        initial_rms: rms,
        final_rms: rms,
        per_viewpoint_rms: per_viewpoint,
        per_viewpoint_rms_std: var.sqrt(),
        iterations: 0,
        termination: TerminationReason::CostConverged,
    })
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CmdError> {
    let mut cfg = load_config(None, args.config.as_deref(), args.seed)?;
    if let Some(n) = args.trials {
        cfg.n_trials = n;
    }
    cfg.validate().map_err(CmdError::from)?;

    let mut sigmas = Vec::new();
    for part in args.sigmas.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let v: f64 = part
            .parse()
            .map_err(|_| CmdError::Data(format!("bad noise level {part:?} in --sigmas")))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(CmdError::Data(format!("noise levels must be >= 0, got {v}")));
        }
        sigmas.push(v);
    }
    if sigmas.is_empty() {
        return Err(CmdError::Data("--sigmas lists no noise levels".into()));
    }

    let report = run_noise_sweep(&cfg, &sigmas)?;
    if report.rows.iter().all(|r| r.n_trials == 0) {
        return Err(CmdError::Numerical("every trial failed; nothing to report".into()));
    }
    dataio::write_atomic(&args.output, report.to_csv().as_bytes())
        .map_err(|e| CmdError::Data(e.to_string()))?;
    let attempted = sigmas.len() * cfg.n_trials;
    let failed: usize = report
        .rows
        .iter()
        .filter(|r| r.metric == lfcal::simulator::SweepMetric::RmsPx)
        .map(|r| cfg.n_trials - r.n_trials)
        .sum();
    println!(
        "{} rows ({} trials, {} failed) -> {}",
        report.rows.len(),
        attempted,
        failed,
        args.output.display()
    );
    Ok(())
}

fn load_field(calibration: &Path, images: &[PathBuf]) -> Result<LightField, CmdError> {
    let read = dataio::read_calibration(calibration)?;
    for w in &read.warnings {
        eprintln!("warning: {w}");
    }
    let mut views = Vec::with_capacity(images.len());
    for path in images {
        views.push(read_pnm(path)?);
    }
    Ok(LightField::from_calibration(&read.result.calibration, views)?)
}

fn write_image(img: &Image, path: &Path) -> Result<(), CmdError> {
    dataio::write_atomic(path, &encode_pnm(img)?).map_err(|e| CmdError::Data(e.to_string()))
}

fn cmd_rectify(args: RectifyArgs) -> Result<(), CmdError> {
    let field = load_field(&args.calibration, &args.images)?;
    // The reference camera's intrinsics define the common target plane.
    let target = field.views()[0].intrinsics;
    let rectified = rectify(&field, &target)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let ext = if rectified.views()[0].image.channels() == 3 { "ppm" } else { "pgm" };
    for (i, view) in rectified.views().iter().enumerate() {
        let path = args.out_dir.join(format!("rectified_{i:02}.{ext}"));
        write_image(&view.image, &path)?;
        println!("view {i} -> {}", path.display());
    }
    Ok(())
}

fn cmd_refocus(args: RefocusArgs) -> Result<(), CmdError> {
    let field = load_field(&args.calibration, &args.images)?;
    let img = refocus(&field, args.depth)?;
    let focus = sharpness(&img)?;
    write_image(&img, &args.output)?;
    println!("refocused at {} mm -> {}", args.depth, args.output.display());
    println!("sharpness: {focus}");
    Ok(())
}
