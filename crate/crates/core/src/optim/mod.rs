//! Joint refinement of the full array model.
//!
//! The optimizer minimizes the summed squared reprojection error over every
//! observation at once. Free parameters are, per viewpoint, the intrinsics
//! and distortion coefficients plus the pose relative to viewpoint 0, and per
//! frame the board pose in the viewpoint 0 frame. Viewpoint 0's relative
//! pose is the gauge and stays pinned at the identity.
//!
//! A damped normal-equations step (Levenberg-Marquardt) with an analytic
//! Jacobian drives the search. The closed form from [`crate::zhang`] is the
//! intended starting point; the basin around it is well behaved and a few
//! dozen iterations reach the noise floor.

mod eval;
mod lm;
mod params;

pub use eval::{jacobian, numeric_jacobian, residuals};
pub use lm::{optimize, refine_independently};
pub use params::ParameterVector;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{
    compose_world_pose, project, Distortion, GeometryError, Intrinsics, Point3, RigidTransform,
};
use crate::observations::{ObservationError, ObservationSet};
use crate::zhang::CalibrationError;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("model has {model_viewpoints} viewpoints x {model_frames} frames, observations have {obs_viewpoints} x {obs_frames}")]
    ShapeMismatch {
        model_viewpoints: usize,
        model_frames: usize,
        obs_viewpoints: usize,
        obs_frames: usize,
    },
    #[error("viewpoint {viewpoint} frame {frame} point {point}: {source}")]
    Projection {
        viewpoint: usize,
        frame: usize,
        point: usize,
        #[source]
        source: GeometryError,
    },
    #[error("normal equations stayed unsolvable under maximum damping; the problem is rank deficient")]
    SingularSystem,
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    ClosedForm(#[from] Box<CalibrationError>),
}

/// Everything calibrated for one viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewpointCalibration {
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
    /// Pose of this viewpoint relative to viewpoint 0; maps viewpoint 0
    /// coordinates into this camera's frame.
    pub rel_pose: RigidTransform,
}

/// Calibrated model of the whole rig plus the board pose of every frame.
///
/// `world_poses[j]` maps board coordinates of frame `j` into the viewpoint 0
/// camera frame, which doubles as the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayCalibration {
    pub viewpoints: Vec<ViewpointCalibration>,
    pub world_poses: Vec<RigidTransform>,
}

impl ArrayCalibration {
    pub fn n_viewpoints(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn n_frames(&self) -> usize {
        self.world_poses.len()
    }

    /// Board-to-camera pose for viewpoint `i` observing frame `j`.
    pub fn camera_pose(&self, i: usize, j: usize) -> RigidTransform {
        compose_world_pose(&self.viewpoints[i].rel_pose, &self.world_poses[j])
    }
}

/// Knobs for [`optimize`]. The defaults run the full model to convergence.
#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    /// Refine intrinsics; when false they stay at their initial values.
    pub refine_intrinsics: bool,
    /// Refine distortion; when false it stays at its initial values.
    pub refine_distortion: bool,
    /// Pin the skew at zero instead of estimating it.
    pub fix_skew: bool,
    pub max_iterations: usize,
    /// Accept convergence when the relative cost drop falls below this.
    pub cost_rel_tol: f64,
    /// Accept convergence when the max-norm of the gradient falls below this.
    pub gradient_tol: f64,
    /// Initial Levenberg-Marquardt damping factor.
    pub damping_init: f64,
    /// Replace the analytic Jacobian with central differences. Orders of
    /// magnitude slower; for debugging the analytic path only.
    pub numeric_jacobian: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            refine_intrinsics: true,
            refine_distortion: true,
            fix_skew: false,
            max_iterations: 100,
            cost_rel_tol: 1e-12,
            gradient_tol: 1e-10,
            damping_init: 1e-3,
            numeric_jacobian: false,
        }
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Relative cost improvement dropped below tolerance, or no damping
    /// level could reduce the cost further.
    CostConverged,
    /// Gradient max-norm dropped below tolerance.
    GradientConverged,
    /// Iteration budget exhausted before either tolerance was met.
    MaxIterations,
}

impl std::fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TerminationReason::CostConverged => "cost-converged",
            TerminationReason::GradientConverged => "gradient-converged",
            TerminationReason::MaxIterations => "max-iterations",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TerminationReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cost-converged" => Ok(TerminationReason::CostConverged),
            "gradient-converged" => Ok(TerminationReason::GradientConverged),
            "max-iterations" => Ok(TerminationReason::MaxIterations),
            other => Err(format!("unknown termination reason {other:?}")),
        }
    }
}

/// Fit statistics of a refinement run. RMS values are per pixel component:
/// with independent zero-mean noise of sigma pixels per component and an
/// exact model, `final_rms` approaches sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub initial_rms: f64,
    pub final_rms: f64,
    /// Reprojection RMS restricted to each viewpoint's observations.
    pub per_viewpoint_rms: Vec<f64>,
    /// Population standard deviation of `per_viewpoint_rms`; measures how
    /// evenly the error is spread across the rig.
    pub per_viewpoint_rms_std: f64,
    /// Accepted parameter updates.
    pub iterations: usize,
    pub termination: TerminationReason,
}

/// A calibrated model together with the statistics of the run that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub calibration: ArrayCalibration,
    pub report: OptimizeReport,
}

fn check_shapes(calib: &ArrayCalibration, obs: &ObservationSet) -> Result<(), OptimError> {
    if calib.n_viewpoints() != obs.n_viewpoints() || calib.n_frames() != obs.n_frames() {
        return Err(OptimError::ShapeMismatch {
            model_viewpoints: calib.n_viewpoints(),
            model_frames: calib.n_frames(),
            obs_viewpoints: obs.n_viewpoints(),
            obs_frames: obs.n_frames(),
        });
    }
    Ok(())
}

/// Summed squared reprojection error and observation counts per viewpoint.
fn per_viewpoint_sse(
    calib: &ArrayCalibration,
    obs: &ObservationSet,
) -> Result<(Vec<f64>, Vec<usize>), OptimError> {
    check_shapes(calib, obs)?;
    let model = obs.board_points();
    let mut sse = vec![0.0; calib.n_viewpoints()];
    let mut counts = vec![0usize; calib.n_viewpoints()];
    for i in 0..calib.n_viewpoints() {
        let vp = &calib.viewpoints[i];
        for j in 0..obs.n_frames() {
            let pose = calib.camera_pose(i, j);
            for (k, observed) in obs.frame_points(i, j) {
                let m = Point3::new(model[k].x, model[k].y, 0.0);
                let predicted = project(&vp.intrinsics, &vp.distortion, &pose, m)
                    .map_err(|source| OptimError::Projection { viewpoint: i, frame: j, point: k, source })?;
                let d = observed - predicted;
                sse[i] += d.x * d.x + d.y * d.y;
                counts[i] += 1;
            }
        }
    }
    Ok((sse, counts))
}

fn rms_from_sse(sse: f64, n_obs: usize) -> f64 {
    if n_obs == 0 {
        0.0
    } else {
        (sse / (2.0 * n_obs as f64)).sqrt()
    }
}

/// Per-component reprojection RMS of a model over an observation set.
pub fn reprojection_rms(calib: &ArrayCalibration, obs: &ObservationSet) -> Result<f64, OptimError> {
    let (sse, counts) = per_viewpoint_sse(calib, obs)?;
    Ok(rms_from_sse(sse.iter().sum(), counts.iter().sum()))
}

/// Reprojection RMS of each viewpoint separately. Viewpoints without
/// observations report zero.
pub fn per_viewpoint_errors(
    calib: &ArrayCalibration,
    obs: &ObservationSet,
) -> Result<Vec<f64>, OptimError> {
    let (sse, counts) = per_viewpoint_sse(calib, obs)?;
    Ok(sse.iter().zip(&counts).map(|(&s, &n)| rms_from_sse(s, n)).collect())
}

pub(crate) fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

pub(crate) fn rotation_to_axis_angle(
    pose: &RigidTransform,
) -> Result<(Vector3<f64>, Vector3<f64>), OptimError> {
    let aa = crate::geometry::AxisAngle::from_matrix(&pose.rotation)?;
    Ok((aa.0, pose.translation))
}
