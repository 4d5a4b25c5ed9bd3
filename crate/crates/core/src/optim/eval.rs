//! Residual and Jacobian evaluation for the joint refinement.
//!
//! Residuals are `observed - predicted`, two rows per observation, ordered
//! viewpoint-major like [`ObservationSet::iter`]. The analytic Jacobian is
//! assembled per observation from closed-form block derivatives; a central
//! difference fallback exists to cross-check it.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::geometry::{rotation_jacobian, AxisAngle, Distortion, GeometryError, Intrinsics};
use crate::observations::ObservationSet;

use super::params::{Layout, Model, ParameterVector};
use super::OptimError;

/// Largest number of parameter columns one observation can touch:
/// 5 intrinsics + 4 distortion + 6 relative pose + 6 board pose.
pub(crate) const MAX_OBS_COLS: usize = 21;

/// The two Jacobian rows of one observation, in sparse column form.
pub(crate) struct ObsRows {
    pub n: usize,
    pub cols: [usize; MAX_OBS_COLS],
    pub du: [f64; MAX_OBS_COLS],
    pub dv: [f64; MAX_OBS_COLS],
}

impl ObsRows {
    fn new() -> Self {
        Self { n: 0, cols: [0; MAX_OBS_COLS], du: [0.0; MAX_OBS_COLS], dv: [0.0; MAX_OBS_COLS] }
    }

    fn push(&mut self, col: usize, du: f64, dv: f64) {
        self.cols[self.n] = col;
        self.du[self.n] = du;
        self.dv[self.n] = dv;
        self.n += 1;
    }
}

/// Per-viewpoint and per-frame matrices reused across observations.
struct Prepared {
    rel_rot: Vec<Matrix3<f64>>,
    world_rot: Vec<Matrix3<f64>>,
}

impl Prepared {
    fn new(model: &Model) -> Self {
        Self {
            rel_rot: model.rel.iter().map(|(r, _)| AxisAngle(*r).to_matrix()).collect(),
            world_rot: model.world.iter().map(|(r, _)| AxisAngle(*r).to_matrix()).collect(),
        }
    }
}

/// Forward projection with the intermediates the derivative blocks need.
struct ProjEval {
    x: f64,
    y: f64,
    r2: f64,
    xd: f64,
    yd: f64,
    predicted: Vector2<f64>,
}

fn project_eval(
    intr: &Intrinsics,
    dist: &Distortion,
    p: &Vector3<f64>,
) -> Result<ProjEval, GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera { depth: p.z });
    }
    let x = p.x / p.z;
    let y = p.y / p.z;
    let r2 = x * x + y * y;
    let radial = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2;
    let xd = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x);
    let yd = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y;
    let predicted = Vector2::new(
        intr.alpha * xd + intr.gamma * yd + intr.u0,
        intr.beta * yd + intr.v0,
    );
    Ok(ProjEval { x, y, r2, xd, yd, predicted })
}

/// Walks all observations once, handing each residual (and, when `rows` is
/// true, its Jacobian rows) to `sink`.
fn for_each_observation<F>(
    model: &Model,
    layout: &Layout,
    obs: &ObservationSet,
    rows: bool,
    mut sink: F,
) -> Result<(), OptimError>
where
    F: FnMut(usize, usize, Vector2<f64>, Option<&ObsRows>),
{
    let prepared = Prepared::new(model);
    let board = obs.board_points();
    let mut obs_index = 0usize;

    for i in 0..layout.n_viewpoints {
        let intr = &model.intr[i];
        let dist = &model.dist[i];
        let rel_r = model.rel[i].0;
        let rel_t = model.rel[i].1;
        let r_i = &prepared.rel_rot[i];
        // Intrinsic entries of A restricted to the two pixel rows.
        let a2 = Matrix2::new(intr.alpha, intr.gamma, 0.0, intr.beta);

        for j in 0..layout.n_frames {
            let world_r = model.world[j].0;
            let world_t = model.world[j].1;
            let r_w = &prepared.world_rot[j];

            for (k, observed) in obs.frame_points(i, j) {
                let m = Vector3::new(board[k].x, board[k].y, 0.0);
                let q = r_w * m + world_t;
                let p = r_i * q + rel_t;
                let ev = project_eval(intr, dist, &p).map_err(|source| {
                    OptimError::Projection { viewpoint: i, frame: j, point: k, source }
                })?;
                let residual = Vector2::new(observed.x, observed.y) - ev.predicted;

                if !rows {
                    sink(obs_index, i, residual, None);
                    obs_index += 1;
                    continue;
                }

                let mut out = ObsRows::new();
                let (x, y, r2) = (ev.x, ev.y, ev.r2);

                // Jacobian rows are for the residual, i.e. minus the
                // prediction derivative.
                if layout.intr_len > 0 {
                    let o = layout.intr_offset(i);
                    // d(u,v)/d(alpha, beta, [gamma,] u0, v0).
                    out.push(o, -ev.xd, 0.0);
                    out.push(o + 1, 0.0, -ev.yd);
                    if layout.intr_len == 5 {
                        out.push(o + 2, -ev.yd, 0.0);
                        out.push(o + 3, -1.0, 0.0);
                        out.push(o + 4, 0.0, -1.0);
                    } else {
                        out.push(o + 2, -1.0, 0.0);
                        out.push(o + 3, 0.0, -1.0);
                    }
                }

                if layout.dist_len == 4 {
                    let o = layout.dist_offset(i);
                    // d(xd, yd)/d(k1, k2, p1, p2), then through A.
                    let dk = [
                        Vector2::new(x * r2, y * r2),
                        Vector2::new(x * r2 * r2, y * r2 * r2),
                        Vector2::new(2.0 * x * y, r2 + 2.0 * y * y),
                        Vector2::new(r2 + 2.0 * x * x, 2.0 * x * y),
                    ];
                    for (c, d) in dk.iter().enumerate() {
                        let px = a2 * d;
                        out.push(o + c, -px.x, -px.y);
                    }
                }

                // Pose blocks: the board pose is always free, the relative
                // pose for every viewpoint but the gauge.
                {
                    // d(xd, yd)/d(x, y).
                    let dr = dist.k1 + 2.0 * dist.k2 * r2;
                    let radial = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2;
                    let dxdx = radial + 2.0 * x * x * dr + 2.0 * dist.p1 * y + 6.0 * dist.p2 * x;
                    let dxdy = 2.0 * x * y * dr + 2.0 * dist.p1 * x + 2.0 * dist.p2 * y;
                    let dydy = radial + 2.0 * y * y * dr + 6.0 * dist.p1 * y + 2.0 * dist.p2 * x;
                    let dd = Matrix2::new(dxdx, dxdy, dxdy, dydy);
                    // d(x, y)/dP through the perspective division.
                    let iz = 1.0 / p.z;
                    let pn = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
                    // d(u, v)/dP.
                    let g = a2 * dd * pn;

                    if i >= 1 {
                        let o = layout.rel_offset(i);
                        let drot = g * rotation_jacobian(&AxisAngle(rel_r), &q);
                        for c in 0..3 {
                            out.push(o + c, -drot[(0, c)], -drot[(1, c)]);
                        }
                        for c in 0..3 {
                            out.push(o + 3 + c, -g[(0, c)], -g[(1, c)]);
                        }
                    }

                    let o = layout.world_offset(j);
                    let g_world = g * r_i;
                    let drot = g_world * rotation_jacobian(&AxisAngle(world_r), &m);
                    for c in 0..3 {
                        out.push(o + c, -drot[(0, c)], -drot[(1, c)]);
                    }
                    for c in 0..3 {
                        out.push(o + 3 + c, -g_world[(0, c)], -g_world[(1, c)]);
                    }
                }

                sink(obs_index, i, residual, Some(&out));
                obs_index += 1;
            }
        }
    }
    Ok(())
}

fn check_obs_shape(params: &ParameterVector, obs: &ObservationSet) -> Result<(), OptimError> {
    let l = &params.layout;
    if l.n_viewpoints != obs.n_viewpoints() || l.n_frames != obs.n_frames() {
        return Err(OptimError::ShapeMismatch {
            model_viewpoints: l.n_viewpoints,
            model_frames: l.n_frames,
            obs_viewpoints: obs.n_viewpoints(),
            obs_frames: obs.n_frames(),
        });
    }
    Ok(())
}

/// Residual vector `observed - predicted`, two entries per observation in
/// `(viewpoint, frame, point)` order.
pub fn residuals(params: &ParameterVector, obs: &ObservationSet) -> Result<DVector<f64>, OptimError> {
    check_obs_shape(params, obs)?;
    let model = params.model();
    let mut r = DVector::zeros(2 * obs.len());
    for_each_observation(&model, &params.layout, obs, false, |idx, _, res, _| {
        r[2 * idx] = res.x;
        r[2 * idx + 1] = res.y;
    })?;
    Ok(r)
}

/// Dense analytic Jacobian of [`residuals`] with respect to the parameter
/// vector.
pub fn jacobian(params: &ParameterVector, obs: &ObservationSet) -> Result<DMatrix<f64>, OptimError> {
    check_obs_shape(params, obs)?;
    let model = params.model();
    let mut j = DMatrix::zeros(2 * obs.len(), params.len());
    for_each_observation(&model, &params.layout, obs, true, |idx, _, _, rows| {
        let rows = rows.expect("rows requested");
        for c in 0..rows.n {
            j[(2 * idx, rows.cols[c])] = rows.du[c];
            j[(2 * idx + 1, rows.cols[c])] = rows.dv[c];
        }
    })?;
    Ok(j)
}

/// Central-difference Jacobian, for validating the analytic one.
pub fn numeric_jacobian(
    params: &ParameterVector,
    obs: &ObservationSet,
    step: f64,
) -> Result<DMatrix<f64>, OptimError> {
    check_obs_shape(params, obs)?;
    let mut work = params.clone();
    let n = params.len();
    let mut j = DMatrix::zeros(2 * obs.len(), n);
    for c in 0..n {
        let saved = params.values[c];
        work.values[c] = saved + step;
        let plus = residuals(&work, obs)?;
        work.values[c] = saved - step;
        let minus = residuals(&work, obs)?;
        work.values[c] = saved;
        let col = (plus - minus) / (2.0 * step);
        j.set_column(c, &col);
    }
    Ok(j)
}

/// Normal equations accumulated in one pass: `J^T J` and `J^T r`.
pub(crate) struct NormalEqs {
    pub jtj: DMatrix<f64>,
    pub jtr: DVector<f64>,
}

pub(crate) fn normal_equations(
    params: &ParameterVector,
    obs: &ObservationSet,
) -> Result<NormalEqs, OptimError> {
    check_obs_shape(params, obs)?;
    let model = params.model();
    let n = params.len();
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);
    for_each_observation(&model, &params.layout, obs, true, |_, _, res, rows| {
        let rows = rows.expect("rows requested");
        for a in 0..rows.n {
            let ca = rows.cols[a];
            jtr[ca] += rows.du[a] * res.x + rows.dv[a] * res.y;
            for b in a..rows.n {
                let cb = rows.cols[b];
                let v = rows.du[a] * rows.du[b] + rows.dv[a] * rows.dv[b];
                // Blocks are emitted in ascending column order.
                jtj[(ca, cb)] += v;
            }
        }
    })?;
    // Mirror the upper triangle.
    for r in 0..n {
        for c in (r + 1)..n {
            jtj[(c, r)] = jtj[(r, c)];
        }
    }
    Ok(NormalEqs { jtj, jtr })
}

/// Summed squared residual only, for step trials.
pub(crate) fn sum_squared_residuals(
    params: &ParameterVector,
    obs: &ObservationSet,
) -> Result<f64, OptimError> {
    check_obs_shape(params, obs)?;
    let model = params.model();
    let mut sse = 0.0;
    for_each_observation(&model, &params.layout, obs, false, |_, _, res, _| {
        sse += res.norm_squared();
    })?;
    Ok(sse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Distortion, Intrinsics, Point2, RigidTransform};
    use crate::observations::BoardSpec;
    use crate::optim::{ArrayCalibration, OptimizeOptions, ViewpointCalibration};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_problem(seed: u64) -> (ArrayCalibration, ObservationSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let board = BoardSpec { rows: 4, cols: 5, spacing_mm: 20.0 };
        let n_viewpoints = 3;
        let n_frames = 2;

        let viewpoints: Vec<ViewpointCalibration> = (0..n_viewpoints)
            .map(|i| ViewpointCalibration {
                intrinsics: Intrinsics::new(
                    700.0 + rng.random_range(-5.0..5.0),
                    700.0 + rng.random_range(-5.0..5.0),
                    rng.random_range(-0.5..0.5),
                    320.0 + rng.random_range(-3.0..3.0),
                    240.0 + rng.random_range(-3.0..3.0),
                )
                .unwrap(),
                distortion: Distortion {
                    k1: rng.random_range(-0.1..0.1),
                    k2: rng.random_range(-0.01..0.01),
                    p1: rng.random_range(-1e-3..1e-3),
                    p2: rng.random_range(-1e-3..1e-3),
                },
                rel_pose: if i == 0 {
                    RigidTransform::identity()
                } else {
                    RigidTransform {
                        rotation: AxisAngle(Vector3::new(
                            rng.random_range(-0.05..0.05),
                            rng.random_range(-0.05..0.05),
                            rng.random_range(-0.05..0.05),
                        ))
                        .to_matrix(),
                        translation: Vector3::new(
                            10.0 * i as f64,
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                        ),
                    }
                },
            })
            .collect();

        let world_poses: Vec<RigidTransform> = (0..n_frames)
            .map(|_| RigidTransform {
                rotation: AxisAngle(Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                ))
                .to_matrix(),
                translation: Vector3::new(
                    rng.random_range(-60.0..-20.0),
                    rng.random_range(-50.0..-20.0),
                    rng.random_range(600.0..900.0),
                ),
            })
            .collect();

        let calib = ArrayCalibration { viewpoints, world_poses };
        let mut obs = ObservationSet::new(board, n_viewpoints, n_frames);
        let model_pts = board.model_points();
        for i in 0..n_viewpoints {
            for j in 0..n_frames {
                let pose = calib.camera_pose(i, j);
                for (k, m) in model_pts.iter().enumerate() {
                    // Drop a few points so the missing-data path is covered.
                    if (i + j + k) % 7 == 0 {
                        continue;
                    }
                    let p = crate::geometry::project(
                        &calib.viewpoints[i].intrinsics,
                        &calib.viewpoints[i].distortion,
                        &pose,
                        crate::geometry::Point3::new(m.x, m.y, 0.0),
                    )
                    .unwrap();
                    // Offset observations so residuals are nonzero.
                    obs.set(i, j, k, Point2::new(p.x + 0.3, p.y - 0.2));
                }
            }
        }
        (calib, obs)
    }

    #[test]
    fn residuals_vanish_on_exact_observations() {
        let (calib, mut obs) = small_problem(40);
        // Rebuild observations without the offset.
        let model_pts = obs.board().model_points();
        for i in 0..obs.n_viewpoints() {
            for j in 0..obs.n_frames() {
                let pose = calib.camera_pose(i, j);
                let seen: Vec<usize> = obs.frame_points(i, j).map(|(k, _)| k).collect();
                for k in seen {
                    let m = model_pts[k];
                    let p = crate::geometry::project(
                        &calib.viewpoints[i].intrinsics,
                        &calib.viewpoints[i].distortion,
                        &pose,
                        crate::geometry::Point3::new(m.x, m.y, 0.0),
                    )
                    .unwrap();
                    obs.set(i, j, k, p);
                }
            }
        }
        let pv = ParameterVector::pack(&calib, &OptimizeOptions::default()).unwrap();
        let r = residuals(&pv, &obs).unwrap();
        assert_eq!(r.len(), 2 * obs.len());
        assert!(r.amax() < 1e-9);
    }

    #[test]
    fn analytic_jacobian_matches_central_differences() {
        for seed in [41, 42, 43] {
            let (calib, obs) = small_problem(seed);
            let pv = ParameterVector::pack(&calib, &OptimizeOptions::default()).unwrap();
            let ja = jacobian(&pv, &obs).unwrap();
            let jn = numeric_jacobian(&pv, &obs, 1e-6).unwrap();
            let scale = jn.amax().max(1.0);
            let err = (&ja - &jn).amax() / scale;
            assert!(err < 1e-6, "seed {seed}: relative deviation {err:.3e}");
        }
    }

    #[test]
    fn jacobian_respects_disabled_blocks() {
        let (calib, obs) = small_problem(44);
        let opts = OptimizeOptions {
            refine_intrinsics: false,
            refine_distortion: false,
            ..OptimizeOptions::default()
        };
        let pv = ParameterVector::pack(&calib, &opts).unwrap();
        assert_eq!(pv.len(), 2 * 6 + 2 * 6);
        let ja = jacobian(&pv, &obs).unwrap();
        let jn = numeric_jacobian(&pv, &obs, 1e-6).unwrap();
        assert!((&ja - &jn).amax() / jn.amax() < 1e-6);
    }

    #[test]
    fn gauge_columns_are_absent() {
        let (calib, obs) = small_problem(45);
        let pv = ParameterVector::pack(&calib, &OptimizeOptions::default()).unwrap();
        let j = jacobian(&pv, &obs).unwrap();
        // Viewpoint 0 residual rows must not touch any relative pose block.
        let l = &pv.layout;
        let rel_start = l.rel_offset(1);
        let rel_end = l.world_offset(0);
        let vp0_rows = 2 * (0..obs.n_frames()).map(|j| obs.count_in(0, j)).sum::<usize>();
        for r in 0..vp0_rows {
            for c in rel_start..rel_end {
                assert_eq!(j[(r, c)], 0.0);
            }
        }
    }

    #[test]
    fn normal_equations_match_the_dense_jacobian() {
        let (calib, obs) = small_problem(46);
        let pv = ParameterVector::pack(&calib, &OptimizeOptions::default()).unwrap();
        let j = jacobian(&pv, &obs).unwrap();
        let r = residuals(&pv, &obs).unwrap();
        let ne = normal_equations(&pv, &obs).unwrap();
        assert!((&ne.jtj - j.transpose() * &j).amax() < 1e-8);
        assert!((&ne.jtr - j.transpose() * &r).amax() < 1e-8);
    }

    #[test]
    fn behind_camera_points_surface_their_indices() {
        let (mut calib, obs) = small_problem(47);
        calib.world_poses[1].translation.z = -700.0;
        let pv = ParameterVector::pack(&calib, &OptimizeOptions::default()).unwrap();
        match residuals(&pv, &obs) {
            Err(OptimError::Projection { viewpoint: 0, frame: 1, .. }) => {}
            other => panic!("expected projection error, got {other:?}"),
        }
    }
}
