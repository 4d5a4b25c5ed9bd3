//! Closed-form calibration from plane homographies.
//!
//! Each board frame seen by a viewpoint yields a homography `H = A [r1 r2 t]`
//! up to scale. The orthonormality of `r1`, `r2` puts two linear constraints
//! per frame on the entries of `B = A^-T A^-1`; stacking them over frames and
//! taking the null vector recovers the intrinsics, after which each
//! homography factors into a board pose. Per-frame relative poses between a
//! viewpoint and viewpoint 0 are then reduced to a single estimate by a
//! component-wise median, which tolerates a minority of badly estimated
//! frames.
//!
//! Everything here is linear algebra on noisy inputs; the results seed the
//! joint refinement in [`crate::optim`] and are not meant to be used as final
//! parameters.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{
    relative_from_world, AxisAngle, Distortion, GeometryError, Intrinsics, RigidTransform,
};
use crate::homography::{estimate_homography, Homography};
use crate::observations::{ObservationError, ObservationSet};
use crate::optim::{ArrayCalibration, ViewpointCalibration};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("{got} usable frames, but closed-form intrinsics need {needed}")]
    InsufficientFrames { got: usize, needed: usize },
    #[error("board orientations are rank deficient; vary the tilt between frames")]
    RankDeficient,
    #[error(
        "intrinsic extraction produced non-positive focal squares \
         (alpha^2 = {alpha_sq:.3e}, beta^2 = {beta_sq:.3e}); capture more or better-spread frames"
    )]
    FocalExtraction { alpha_sq: f64, beta_sq: f64 },
    #[error("homography column collapsed while recovering the board pose")]
    DegenerateExtrinsics,
    #[error("no usable frame is shared between viewpoint {viewpoint} and viewpoint 0")]
    NoCommonFrames { viewpoint: usize },
    #[error("cannot aggregate an empty set of poses")]
    EmptyAggregate,
    #[error("no usable closed-form pose for frame {frame}")]
    MissingFramePose { frame: usize },
    #[error("viewpoint {viewpoint}: {source}")]
    AtViewpoint {
        viewpoint: usize,
        #[source]
        source: Box<CalibrationError>,
    },
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn at_viewpoint(i: usize) -> impl FnOnce(CalibrationError) -> CalibrationError {
    move |e| CalibrationError::AtViewpoint { viewpoint: i, source: Box::new(e) }
}

/// Per-viewpoint closed-form output: intrinsics plus a board pose for every
/// frame where the homography factorization succeeded.
#[derive(Debug, Clone)]
pub struct ViewpointInit {
    pub intrinsics: Intrinsics,
    /// Indexed by the observation set's frame index.
    pub world_poses: Vec<Option<RigidTransform>>,
}

/// Full closed-form result: the assembled array model plus the per-viewpoint
/// intermediates, which the independent-refinement baseline builds on.
#[derive(Debug, Clone)]
pub struct ClosedForm {
    pub calibration: ArrayCalibration,
    pub per_viewpoint: Vec<ViewpointInit>,
}

/// Constraint row on `b = (B11, B12, B22, B13, B23, B33)` from columns `i`,
/// `j` of a homography: `h_i^T B h_j` expanded in the six entries.
fn constraint_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Recovers intrinsics from homographies of one viewpoint.
///
/// Needs three frames in general orientation, or two with `fix_skew` (the
/// extra equation pins `B12 = 0`). Frames that share a board orientation add
/// no new constraints; the stacked system is then rank deficient and reported
/// as such rather than silently producing garbage.
pub fn intrinsics_from_homographies(
    hs: &[Homography],
    fix_skew: bool,
) -> Result<Intrinsics, CalibrationError> {
    let needed = if fix_skew { 2 } else { 3 };
    if hs.len() < needed {
        return Err(CalibrationError::InsufficientFrames { got: hs.len(), needed });
    }

    let data_rows = 2 * hs.len() + fix_skew as usize;
    let rows = data_rows.max(6);
    let mut a = DMatrix::zeros(rows, 6);
    for (f, h) in hs.iter().enumerate() {
        let m = h.matrix();
        let v01 = constraint_row(m, 0, 1);
        let v00 = constraint_row(m, 0, 0);
        let v11 = constraint_row(m, 1, 1);
        for c in 0..6 {
            a[(2 * f, c)] = v01[c];
            a[(2 * f + 1, c)] = v00[c] - v11[c];
        }
    }
    if fix_skew {
        a[(2 * hs.len(), 1)] = 1.0;
    }

    // In pixel units the six unknowns differ by many orders of magnitude,
    // which would swamp the rank test. Equilibrate columns to unit norm,
    // solve, then undo the scaling on the solution.
    let mut col_scale = [1.0f64; 6];
    for c in 0..6 {
        let norm = a.column(c).norm();
        if norm > 1e-300 {
            col_scale[c] = norm;
            for r in 0..rows {
                a[(r, c)] /= norm;
            }
        }
    }

    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    if sv[4] < 1e-9 * sv[0] {
        return Err(CalibrationError::RankDeficient);
    }
    let vt = svd.v_t.as_ref().expect("SVD with v_t requested");
    let mut b = [0.0f64; 6];
    for c in 0..6 {
        b[c] = vt.row(5)[c] / col_scale[c];
    }
    // b is determined up to sign; B must be positive definite, so B11 > 0.
    if b[0] < 0.0 {
        for v in &mut b {
            *v = -*v;
        }
    }

    let (b11, b12, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    let denom = b11 * b22 - b12 * b12;
    if b11 == 0.0 || denom == 0.0 {
        return Err(CalibrationError::RankDeficient);
    }
    let v0 = (b12 * b13 - b11 * b23) / denom;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    let alpha_sq = lambda / b11;
    let beta_sq = lambda * b11 / denom;
    if !(alpha_sq > 0.0 && beta_sq > 0.0) || !alpha_sq.is_finite() || !beta_sq.is_finite() {
        return Err(CalibrationError::FocalExtraction { alpha_sq, beta_sq });
    }
    let alpha = alpha_sq.sqrt();
    let beta = beta_sq.sqrt();
    let gamma = if fix_skew { 0.0 } else { -b12 * alpha_sq * beta / lambda };
    let u0 = gamma * v0 / beta - b13 * alpha_sq / lambda;

    Ok(Intrinsics::new(alpha, beta, gamma, u0, v0)?)
}

/// Factors a homography into the board pose for known intrinsics.
///
/// `A^-1 [h1 h2 h3]` gives `[r1 r2 t]` up to a common scale fixed by
/// `|r1| = 1`; the sign is chosen so the board origin lies in front of the
/// camera, which also makes the result invariant to the sign of `H`. The
/// rotation completed by `r3 = r1 x r2` is generally not exactly orthonormal
/// on noisy input, so it is replaced by the nearest rotation matrix.
pub fn extrinsics_from_homography(
    intr: &Intrinsics,
    h: &Homography,
) -> Result<RigidTransform, CalibrationError> {
    let a_inv = intr.inverse_matrix();
    let m = h.matrix();
    let g1 = a_inv * m.column(0);
    let g2 = a_inv * m.column(1);
    let g3 = a_inv * m.column(2);
    let norm = g1.norm();
    if norm < 1e-12 {
        return Err(CalibrationError::DegenerateExtrinsics);
    }
    let scale = 1.0 / norm;
    let mut r1 = g1 * scale;
    let mut r2 = g2 * scale;
    let mut t = g3 * scale;
    if t.z < 0.0 {
        r1 = -r1;
        r2 = -r2;
        t = -t;
    }
    let r3 = r1.cross(&r2);

    let q = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = q.svd(true, true);
    let u = svd.u.as_ref().expect("SVD with u requested");
    let vt = svd.v_t.as_ref().expect("SVD with v_t requested");
    let mut rotation = u * vt;
    if rotation.determinant() < 0.0 {
        rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * vt;
    }
    Ok(RigidTransform::new(rotation, t)?)
}

fn median_inplace(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("pose components are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Reduces per-frame estimates of the same relative pose to one, taking the
/// component-wise median of translations and of axis-angle rotations.
///
/// Valid for estimates clustered around a common value, which per-frame
/// relative poses of a rigid rig are; a minority of outlier frames moves the
/// result far less than a mean would.
pub fn aggregate_relative_poses(
    poses: &[RigidTransform],
) -> Result<RigidTransform, CalibrationError> {
    if poses.is_empty() {
        return Err(CalibrationError::EmptyAggregate);
    }
    let mut comps: [Vec<f64>; 6] = Default::default();
    for pose in poses {
        let aa = AxisAngle::from_matrix(&pose.rotation)?;
        for c in 0..3 {
            comps[c].push(aa.0[c]);
            comps[3 + c].push(pose.translation[c]);
        }
    }
    let med: Vec<f64> = comps.iter_mut().map(|v| median_inplace(v)).collect();
    Ok(RigidTransform {
        rotation: AxisAngle(Vector3::new(med[0], med[1], med[2])).to_matrix(),
        translation: Vector3::new(med[3], med[4], med[5]),
    })
}

/// Closed-form intrinsics and per-frame board poses for one viewpoint.
///
/// Frames whose homography cannot be estimated (too few or degenerate
/// detections) are skipped and left as `None` in the pose list.
pub fn viewpoint_closed_form(
    obs: &ObservationSet,
    i: usize,
    fix_skew: bool,
) -> Result<ViewpointInit, CalibrationError> {
    let model = obs.board_points();
    let n_frames = obs.n_frames();
    let mut homs: Vec<Option<Homography>> = vec![None; n_frames];
    for (j, slot) in homs.iter_mut().enumerate() {
        let (mpts, ipts): (Vec<_>, Vec<_>) =
            obs.frame_points(i, j).map(|(k, p)| (model[k], p)).unzip();
        if mpts.len() < 4 {
            continue;
        }
        if let Ok(h) = estimate_homography(&mpts, &ipts) {
            *slot = Some(h);
        }
    }

    let usable: Vec<Homography> = homs.iter().flatten().copied().collect();
    let intrinsics =
        intrinsics_from_homographies(&usable, fix_skew).map_err(at_viewpoint(i))?;

    let mut world_poses = Vec::with_capacity(n_frames);
    for h in &homs {
        let pose = match h {
            Some(h) => extrinsics_from_homography(&intrinsics, h).ok(),
            None => None,
        };
        world_poses.push(pose);
    }
    Ok(ViewpointInit { intrinsics, world_poses })
}

/// Runs the closed form for every viewpoint and assembles the array model.
///
/// Board poses are anchored to viewpoint 0; its relative pose is the exact
/// identity. Each other viewpoint's relative pose is the median over the
/// frames it shares with viewpoint 0. Distortion starts at zero: the linear
/// constraints carry no information about it.
pub fn closed_form_details(
    obs: &ObservationSet,
    fix_skew: bool,
) -> Result<ClosedForm, CalibrationError> {
    obs.validate_for_calibration()?;
    let n = obs.n_viewpoints();
    let mut per_viewpoint = Vec::with_capacity(n);
    for i in 0..n {
        per_viewpoint.push(viewpoint_closed_form(obs, i, fix_skew)?);
    }

    let mut world_poses = Vec::with_capacity(obs.n_frames());
    for (j, pose) in per_viewpoint[0].world_poses.iter().enumerate() {
        world_poses.push(
            pose.ok_or(CalibrationError::MissingFramePose { frame: j })
                .map_err(at_viewpoint(0))?,
        );
    }

    let mut viewpoints = Vec::with_capacity(n);
    viewpoints.push(ViewpointCalibration {
        intrinsics: per_viewpoint[0].intrinsics,
        distortion: Distortion::zero(),
        rel_pose: RigidTransform::identity(),
    });
    for (i, init) in per_viewpoint.iter().enumerate().skip(1) {
        let rels: Vec<RigidTransform> = init
            .world_poses
            .iter()
            .zip(&world_poses)
            .filter_map(|(wi, w0)| wi.map(|wi| relative_from_world(&wi, w0)))
            .collect();
        if rels.is_empty() {
            return Err(CalibrationError::NoCommonFrames { viewpoint: i });
        }
        viewpoints.push(ViewpointCalibration {
            intrinsics: init.intrinsics,
            distortion: Distortion::zero(),
            rel_pose: aggregate_relative_poses(&rels).map_err(at_viewpoint(i))?,
        });
    }

    Ok(ClosedForm {
        calibration: ArrayCalibration { viewpoints, world_poses },
        per_viewpoint,
    })
}

/// [`closed_form_details`] without the per-viewpoint intermediates.
pub fn run_closed_form(
    obs: &ObservationSet,
    fix_skew: bool,
) -> Result<ArrayCalibration, CalibrationError> {
    Ok(closed_form_details(obs, fix_skew)?.calibration)
}
