//! Synthetic capture sessions with known ground truth.
//!
//! A simulated rig is a planar grid of identical pinhole cameras, all
//! looking down +z. Board poses are drawn at random, rejected until every
//! board point is visible in every view, then projected through the true
//! model; Gaussian pixel noise is added on top. Seeds are derived so that
//! the board poses and the noise draws for a given trial are the same at
//! every noise level: accuracy curves over sigma then differ only by the
//! noise amplitude, not by the scenes.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    distort, project, undistort, AxisAngle, Distortion, GeometryError, Intrinsics, Point3,
    RigidTransform,
};
use crate::lightfield::Image;
use crate::observations::{BoardSpec, ObservationSet};
use crate::optim::{
    optimize, per_viewpoint_errors, population_std, refine_independently, reprojection_rms,
    ArrayCalibration, OptimizeOptions, ViewpointCalibration,
};
use crate::zhang::closed_form_details;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {detail}")]
    InvalidConfig { detail: String },
    #[error("frame {frame}: no board pose kept every point visible in {attempts} attempts")]
    PoseSearchFailed { frame: usize, attempts: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn bad_config(detail: impl Into<String>) -> SimError {
    SimError::InvalidConfig { detail: detail.into() }
}

/// Everything that defines a synthetic capture session.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Camera pitch along both grid axes, millimetres.
    pub grid_spacing_mm: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Shared by every camera in the rig.
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
    pub board: BoardSpec,
    pub n_frames: usize,
    /// Std of the Gaussian pixel noise, in pixels.
    pub noise_sigma: f64,
    pub n_trials: usize,
    pub seed: u64,
}

impl SimConfig {
    /// 5x5 rig at 10 mm pitch, VGA sensors with 700 px focals, an 7x10
    /// board at 20 mm pitch, 11 frames. The default evaluation setup.
    pub fn array_5x5() -> Self {
        Self {
            grid_rows: 5,
            grid_cols: 5,
            grid_spacing_mm: 10.0,
            image_width: 640,
            image_height: 480,
            intrinsics: Intrinsics { alpha: 700.0, beta: 700.0, gamma: 0.0, u0: 320.0, v0: 240.0 },
            distortion: Distortion::zero(),
            board: BoardSpec { rows: 7, cols: 10, spacing_mm: 20.0 },
            n_frames: 11,
            noise_sigma: 0.0,
            n_trials: 20,
            seed: 7,
        }
    }

    /// Single camera, otherwise identical to [`SimConfig::array_5x5`].
    pub fn single() -> Self {
        Self { grid_rows: 1, grid_cols: 1, ..Self::array_5x5() }
    }

    pub fn n_viewpoints(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(bad_config("camera grid must be at least 1x1"));
        }
        if self.grid_spacing_mm <= 0.0 || !self.grid_spacing_mm.is_finite() {
            return Err(bad_config(format!("grid spacing must be positive, got {}", self.grid_spacing_mm)));
        }
        if self.image_width < 2 || self.image_height < 2 {
            return Err(bad_config("image resolution must be at least 2x2"));
        }
        if self.n_frames == 0 {
            return Err(bad_config("need at least one frame"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(bad_config(format!("noise sigma must be finite and non-negative, got {}", self.noise_sigma)));
        }
        if self.n_trials == 0 {
            return Err(bad_config("need at least one trial"));
        }
        self.board.validate().map_err(|e| bad_config(e.to_string()))?;
        Ok(())
    }

    /// The true rig: cameras on a fronto-parallel grid, row-major, with
    /// viewpoint 0 at the top-left corner. No world poses yet; those come
    /// from [`generate_scene`].
    pub fn truth_rig(&self) -> ArrayCalibration {
        let s = self.grid_spacing_mm;
        let viewpoints = (0..self.n_viewpoints())
            .map(|i| {
                let (row, col) = (i / self.grid_cols, i % self.grid_cols);
                // A camera to the right of the reference sees the scene
                // shifted left: t = -c for a camera centred at c.
                let centre = Vector3::new(col as f64 * s, row as f64 * s, 0.0);
                ViewpointCalibration {
                    intrinsics: self.intrinsics,
                    distortion: self.distortion,
                    rel_pose: RigidTransform { rotation: Matrix3::identity(), translation: -centre },
                }
            })
            .collect();
        ArrayCalibration { viewpoints, world_poses: Vec::new() }
    }
}

// ---------------------------------------------------------------------------
// Seeding

/// SplitMix64 finalizer. Decorrelates consecutive stream indices.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix(master ^ stream.wrapping_mul(0x9E3779B97F4A7C15))
}

/// Per-trial (pose, noise) seeds. Deliberately independent of sigma, so the
/// same trial index replays the same scenes and the same unit noise at every
/// noise level.
pub fn trial_seeds(master: u64, trial: usize) -> (u64, u64) {
    let t = trial as u64;
    (derive_seed(master, 2 * t), derive_seed(master, 2 * t + 1))
}

// ---------------------------------------------------------------------------
// Scene generation

const POSE_ATTEMPTS: usize = 1000;
const DIST_RANGE_MM: (f64, f64) = (600.0, 1200.0);
const TILT_MAX_RAD: f64 = 35.0 * std::f64::consts::PI / 180.0;
const JITTER_MM: f64 = 40.0;

fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn sample_board_pose(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> RigidTransform {
    let tau = std::f64::consts::TAU;
    let dist = rng.random_range(DIST_RANGE_MM.0..DIST_RANGE_MM.1);
    let axis_angle = rng.random_range(0.0..tau);
    let tilt = rng.random_range(0.0..TILT_MAX_RAD);
    let spin = rng.random_range(0.0..tau);
    let jx = rng.random_range(-JITTER_MM..JITTER_MM);
    let jy = rng.random_range(-JITTER_MM..JITTER_MM);

    // Spin the board in its own plane, then tip it about an in-plane axis.
    let axis = Vector3::new(axis_angle.cos(), axis_angle.sin(), 0.0);
    let rotation = AxisAngle(axis * tilt).to_matrix() * rot_z(spin);
    let centre = Vector3::new(
        (cfg.board.cols - 1) as f64 * cfg.board.spacing_mm / 2.0,
        (cfg.board.rows - 1) as f64 * cfg.board.spacing_mm / 2.0,
        0.0,
    );
    // Board centre lands at (jx, jy, dist) in the reference camera frame.
    let translation = Vector3::new(jx, jy, dist) - rotation * centre;
    RigidTransform { rotation, translation }
}

fn fully_visible(cfg: &SimConfig, rig: &ArrayCalibration, world: &RigidTransform) -> bool {
    let (w, h) = (cfg.image_width as f64 - 1.0, cfg.image_height as f64 - 1.0);
    rig.viewpoints.iter().all(|vp| {
        let cam = vp.rel_pose.compose(world);
        cfg.board.model_points().iter().all(|m| {
            let p = cam.apply(Point3::new(m.x, m.y, 0.0));
            if p.z <= 0.0 {
                return false;
            }
            let n = distort(&vp.distortion, Vector2::new(p.x / p.z, p.y / p.z));
            let px = vp.intrinsics.normalized_to_pixel(n);
            px.x >= 0.0 && px.x <= w && px.y >= 0.0 && px.y <= h
        })
    })
}

/// Draws `n_frames` board poses, keeps only those where every board point is
/// visible in every view, and projects them through the true model. The
/// returned calibration carries the drawn world poses; the observations are
/// noise-free.
pub fn generate_scene(
    cfg: &SimConfig,
    pose_seed: u64,
) -> Result<(ArrayCalibration, ObservationSet), SimError> {
    cfg.validate()?;
    let mut rig = cfg.truth_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed);

    let mut worlds = Vec::with_capacity(cfg.n_frames);
    for frame in 0..cfg.n_frames {
        let pose = (0..POSE_ATTEMPTS)
            .map(|_| sample_board_pose(cfg, &mut rng))
            .find(|p| fully_visible(cfg, &rig, p))
            .ok_or(SimError::PoseSearchFailed { frame, attempts: POSE_ATTEMPTS })?;
        worlds.push(pose);
    }

    let mut obs = ObservationSet::new(cfg.board, cfg.n_viewpoints(), cfg.n_frames);
    for (i, vp) in rig.viewpoints.iter().enumerate() {
        for (j, world) in worlds.iter().enumerate() {
            let cam = vp.rel_pose.compose(world);
            for (k, m) in cfg.board.model_points().iter().enumerate() {
                let px = project(&vp.intrinsics, &vp.distortion, &cam, Point3::new(m.x, m.y, 0.0))?;
                obs.set(i, j, k, px);
            }
        }
    }
    rig.world_poses = worlds;
    Ok((rig, obs))
}

/// Adds i.i.d. Gaussian noise to every observed point. The unit draws depend
/// only on the seed, so sigma scales the same perturbation field.
pub fn add_noise(obs: &ObservationSet, sigma: f64, noise_seed: u64) -> ObservationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut out = obs.clone();
    for (i, j, k, p) in obs.iter() {
        let zx: f64 = StandardNormal.sample(&mut rng);
        let zy: f64 = StandardNormal.sample(&mut rng);
        out.set(i, j, k, crate::geometry::Point2::new(p.x + sigma * zx, p.y + sigma * zy));
    }
    out
}

// ---------------------------------------------------------------------------
// Accuracy trials

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ClosedForm,
    Independent,
    Global,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ClosedForm, Method::Independent, Method::Global];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::ClosedForm => "closed-form",
            Method::Independent => "independent",
            Method::Global => "global",
        })
    }
}

/// What the sweep CSV reports per (sigma, method). The per-viewpoint RMS
/// spread lives on [`TrialMetrics`] but is not a sweep column; it is a
/// per-trial comparison, not a per-sigma average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepMetric {
    AlphaRelErr,
    BetaRelErr,
    U0AbsErr,
    V0AbsErr,
    RmsPx,
}

impl SweepMetric {
    pub const ALL: [SweepMetric; 5] = [
        SweepMetric::AlphaRelErr,
        SweepMetric::BetaRelErr,
        SweepMetric::U0AbsErr,
        SweepMetric::V0AbsErr,
        SweepMetric::RmsPx,
    ];
}

impl std::fmt::Display for SweepMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepMetric::AlphaRelErr => "alpha_rel_err",
            SweepMetric::BetaRelErr => "beta_rel_err",
            SweepMetric::U0AbsErr => "u0_abs_err",
            SweepMetric::V0AbsErr => "v0_abs_err",
            SweepMetric::RmsPx => "rms_px",
        })
    }
}

/// Accuracy of one estimate against the truth it was simulated from.
/// Intrinsics errors are for the reference viewpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialMetrics {
    pub alpha_rel_err: f64,
    pub beta_rel_err: f64,
    pub u0_abs_err: f64,
    pub v0_abs_err: f64,
    pub rms_px: f64,
    pub per_viewpoint_rms_std: f64,
}

impl TrialMetrics {
    fn against_truth(truth: &SimConfig, est: &ArrayCalibration, obs: &ObservationSet) -> Option<Self> {
        let a = &est.viewpoints[0].intrinsics;
        let t = &truth.intrinsics;
        let rms = per_viewpoint_errors(est, obs).ok()?;
        Some(Self {
            alpha_rel_err: (a.alpha - t.alpha).abs() / t.alpha,
            beta_rel_err: (a.beta - t.beta).abs() / t.beta,
            u0_abs_err: (a.u0 - t.u0).abs(),
            v0_abs_err: (a.v0 - t.v0).abs(),
            rms_px: reprojection_rms(est, obs).ok()?,
            per_viewpoint_rms_std: population_std(&rms),
        })
    }

    pub fn get(&self, metric: SweepMetric) -> f64 {
        match metric {
            SweepMetric::AlphaRelErr => self.alpha_rel_err,
            SweepMetric::BetaRelErr => self.beta_rel_err,
            SweepMetric::U0AbsErr => self.u0_abs_err,
            SweepMetric::V0AbsErr => self.v0_abs_err,
            SweepMetric::RmsPx => self.rms_px,
        }
    }
}

/// One trial, evaluated three ways. A method that fails on a given draw
/// (rank-deficient closed form at high noise, say) reports `None` rather
/// than aborting the sweep.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub closed_form: Option<TrialMetrics>,
    pub independent: Option<TrialMetrics>,
    pub global: Option<TrialMetrics>,
}

impl TrialOutcome {
    pub fn get(&self, method: Method) -> Option<TrialMetrics> {
        match method {
            Method::ClosedForm => self.closed_form,
            Method::Independent => self.independent,
            Method::Global => self.global,
        }
    }
}

/// Simulates one capture at the given noise level and runs all three
/// estimators on it.
pub fn run_trial(cfg: &SimConfig, sigma: f64, trial: usize) -> Result<TrialOutcome, SimError> {
    let (pose_seed, noise_seed) = trial_seeds(cfg.seed, trial);
    let (_, clean) = generate_scene(cfg, pose_seed)?;
    let obs = add_noise(&clean, sigma, noise_seed);

    let opts = OptimizeOptions::default();
    let closed = closed_form_details(&obs, opts.fix_skew).ok();
    let closed_metrics = closed
        .as_ref()
        .and_then(|cf| TrialMetrics::against_truth(cfg, &cf.calibration, &obs));
    let independent = refine_independently(&obs, &opts)
        .ok()
        .and_then(|r| TrialMetrics::against_truth(cfg, &r.calibration, &obs));
    let global = closed
        .and_then(|cf| optimize(&cf.calibration, &obs, &opts).ok())
        .and_then(|r| TrialMetrics::against_truth(cfg, &r.calibration, &obs));

    Ok(TrialOutcome { closed_form: closed_metrics, independent, global })
}

/// One aggregated cell of a sweep: a (noise level, method, metric) triple
/// with the sample mean and population std over the trials that succeeded.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub method: Method,
    pub metric: SweepMetric,
    pub mean: f64,
    pub std: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,method,metric,mean,std,n_trials\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sigma, r.method, r.metric, r.mean, r.std, r.n_trials
            ));
        }
        out
    }

    pub fn mean_of(&self, sigma: f64, method: Method, metric: SweepMetric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.sigma == sigma && r.method == method && r.metric == metric)
            .map(|r| r.mean)
    }
}

/// Runs `cfg.n_trials` trials at each noise level, in parallel, and
/// aggregates. Trial scenes are shared across noise levels by construction
/// of the seeds, so differences along sigma are pure noise response.
pub fn run_noise_sweep(cfg: &SimConfig, sigmas: &[f64]) -> Result<SweepReport, SimError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..sigmas.len())
        .flat_map(|s| (0..cfg.n_trials).map(move |t| (s, t)))
        .collect();
    let mut outcomes = jobs
        .into_par_iter()
        .map(|(s, t)| run_trial(cfg, sigmas[s], t).map(|o| (s, t, o)))
        .collect::<Result<Vec<_>, _>>()?;
    // Deterministic aggregation order regardless of scheduling.
    outcomes.sort_by_key(|&(s, t, _)| (s, t));

    let mut rows = Vec::new();
    for (s, &sigma) in sigmas.iter().enumerate() {
        let per_sigma: Vec<&TrialOutcome> =
            outcomes.iter().filter(|&&(os, _, _)| os == s).map(|(_, _, o)| o).collect();
        for method in Method::ALL {
            let successes: Vec<TrialMetrics> =
                per_sigma.iter().filter_map(|o| o.get(method)).collect();
            for metric in SweepMetric::ALL {
                let vals: Vec<f64> = successes.iter().map(|m| m.get(metric)).collect();
                let n = vals.len();
                let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
                rows.push(SweepRow {
                    sigma,
                    method,
                    metric,
                    mean,
                    std: population_std(&vals),
                    n_trials: n,
                });
            }
        }
    }
    Ok(SweepReport { rows })
}

// ---------------------------------------------------------------------------
// Image rendering

/// Renders a textured plane at `z = depth` (reference camera frame) through
/// every camera of the rig, including each camera's distortion.
///
/// The plane spans exactly the reference camera's field of view at that
/// depth, and the texture is stretched over the span, so texture pixel (0,0)
/// appears at the top-left of the reference view.
pub fn render_plane_views(
    rig: &ArrayCalibration,
    resolution: (usize, usize),
    texture: &Image,
    depth: f64,
) -> Result<Vec<Image>, SimError> {
    let (width, height) = resolution;
    if width < 2 || height < 2 {
        return Err(bad_config("render resolution must be at least 2x2"));
    }
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(bad_config(format!("plane depth must be positive, got {depth}")));
    }
    let reference = &rig.viewpoints[0].intrinsics;
    let span_x = depth * width as f64 / reference.alpha;
    let span_y = depth * height as f64 / reference.beta;
    let (tw, th) = (texture.width() as f64, texture.height() as f64);

    let mut views = Vec::with_capacity(rig.viewpoints.len());
    for vp in &rig.viewpoints {
        let mut img = Image::zeros(width, height, texture.channels());
        let rt = vp.rel_pose.rotation.transpose();
        let origin = -(rt * vp.rel_pose.translation);
        for py in 0..height {
            for px in 0..width {
                let pixel = crate::geometry::Point2::new(px as f64, py as f64);
                let Ok(ideal) = undistort(&vp.distortion, vp.intrinsics.pixel_to_normalized(pixel))
                else {
                    continue;
                };
                let dir = rt * Vector3::new(ideal.x, ideal.y, 1.0);
                if dir.z.abs() <= 1e-12 {
                    continue;
                }
                let along = (depth - origin.z) / dir.z;
                if along <= 0.0 {
                    continue;
                }
                let hit = origin + along * dir;
                let tx = (hit.x + span_x / 2.0) / span_x * tw - 0.5;
                let ty = (hit.y + span_y / 2.0) / span_y * th - 0.5;
                for c in 0..texture.channels() {
                    // None off the texture: the pixel stays black.
                    let Some(v) = texture.sample_bilinear(tx, ty, c) else { break };
                    img.set(px, py, c, v);
                }
            }
        }
        views.push(img);
    }
    Ok(views)
}
