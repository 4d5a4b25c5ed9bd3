//! Levenberg-Marquardt driver and the per-viewpoint refinement baseline.

use crate::geometry::{relative_from_world, RigidTransform};
use crate::observations::ObservationSet;
use crate::zhang::{closed_form_details, aggregate_relative_poses, CalibrationError};

use super::eval::{normal_equations, numeric_jacobian, residuals, sum_squared_residuals, NormalEqs};
use super::params::ParameterVector;
use super::{
    rms_from_sse, ArrayCalibration, CalibrationResult, OptimError, OptimizeOptions,
    OptimizeReport, TerminationReason, ViewpointCalibration,
};

/// Consecutive step rejections allowed before giving up on one
/// linearization. With tenfold damping growth this spans forty orders of
/// magnitude, far past the point where a descent direction would have been
/// found if one existed.
const MAX_REJECTIONS: usize = 40;

fn numeric_normal_equations(
    params: &ParameterVector,
    obs: &ObservationSet,
) -> Result<NormalEqs, OptimError> {
    let j = numeric_jacobian(params, obs, 1e-6)?;
    let r = residuals(params, obs)?;
    Ok(NormalEqs { jtj: j.transpose() * &j, jtr: j.transpose() * &r })
}

/// Jointly refines the array model against all observations.
///
/// Each outer iteration linearizes once, then retries the damped step with
/// tenfold larger damping until the cost drops. A trial step that moves a
/// board point behind a camera is rejected like any non-improving step. The
/// gradient test runs before stepping, so a converged initial model returns
/// immediately with zero iterations.
pub fn optimize(
    init: &ArrayCalibration,
    obs: &ObservationSet,
    opts: &OptimizeOptions,
) -> Result<CalibrationResult, OptimError> {
    obs.validate_for_calibration()?;
    let mut params = ParameterVector::pack(init, opts)?;
    let n_obs = obs.len();

    let mut sse = sum_squared_residuals(&params, obs)?;
    let initial_rms = rms_from_sse(sse, n_obs);
    let mut lambda = opts.damping_init;
    let mut iterations = 0usize;
    let termination;

    'outer: loop {
        if iterations >= opts.max_iterations {
            termination = TerminationReason::MaxIterations;
            break;
        }
        let ne = if opts.numeric_jacobian {
            numeric_normal_equations(&params, obs)?
        } else {
            normal_equations(&params, obs)?
        };
        if ne.jtr.amax() < opts.gradient_tol {
            termination = TerminationReason::GradientConverged;
            break;
        }

        let mut rejections = 0usize;
        loop {
            let mut damped = ne.jtj.clone();
            for d in 0..damped.nrows() {
                damped[(d, d)] += lambda * ne.jtj[(d, d)];
            }
            let step = damped.cholesky().map(|ch| ch.solve(&(-&ne.jtr)));
            let solver_failed = step.is_none();

            let accepted = step.and_then(|delta| {
                let mut trial = params.clone();
                trial.set_values(&params.values + &delta);
                match sum_squared_residuals(&trial, obs) {
                    Ok(trial_sse) if trial_sse.is_finite() && trial_sse < sse => {
                        Some((trial, trial_sse))
                    }
                    // Worse cost, or the step pushed a point behind a
                    // camera; both mean the step was too large.
                    _ => None,
                }
            });

            match accepted {
                Some((trial, trial_sse)) => {
                    params = trial;
                    let prev = sse;
                    sse = trial_sse;
                    lambda = (lambda * 0.1).max(1e-12);
                    iterations += 1;
                    if prev - sse <= opts.cost_rel_tol * prev {
                        termination = TerminationReason::CostConverged;
                        break 'outer;
                    }
                    continue 'outer;
                }
                None => {
                    lambda *= 10.0;
                    rejections += 1;
                    if rejections >= MAX_REJECTIONS {
                        if solver_failed {
                            return Err(OptimError::SingularSystem);
                        }
                        // Solvable but no damping level reduces the cost:
                        // the iterate is at the attainable floor.
                        termination = TerminationReason::CostConverged;
                        break 'outer;
                    }
                }
            }
        }
    }

    let calibration = params.unpack();
    let per_viewpoint_rms = super::per_viewpoint_errors(&calibration, obs)?;
    let report = OptimizeReport {
        initial_rms,
        final_rms: rms_from_sse(sse, n_obs),
        per_viewpoint_rms_std: super::population_std(&per_viewpoint_rms),
        per_viewpoint_rms,
        iterations,
        termination,
    };
    Ok(CalibrationResult { calibration, report })
}

fn closed_form_err(e: CalibrationError) -> OptimError {
    OptimError::ClosedForm(Box::new(e))
}

/// The single-camera baseline: closed form per viewpoint, refine each
/// viewpoint's model on its own observations only, then fuse the per-frame
/// relative poses by their median.
///
/// Nothing couples the viewpoints during refinement, so each camera's board
/// poses absorb its noise independently; the fused model is evaluated
/// against all observations for the report. `initial_rms` is the closed-form
/// model's error, `iterations` the largest per-viewpoint count, and the
/// termination reason the weakest across viewpoints (any budget exhaustion
/// wins, then cost, then gradient).
pub fn refine_independently(
    obs: &ObservationSet,
    opts: &OptimizeOptions,
) -> Result<CalibrationResult, OptimError> {
    obs.validate_for_calibration()?;
    let details = closed_form_details(obs, opts.fix_skew).map_err(closed_form_err)?;
    let initial_rms = super::reprojection_rms(&details.calibration, obs)?;

    let n = obs.n_viewpoints();
    let mut world_by_viewpoint: Vec<Vec<Option<RigidTransform>>> = Vec::with_capacity(n);
    let mut viewpoints: Vec<ViewpointCalibration> = Vec::with_capacity(n);
    let mut iterations = 0usize;
    let mut any_max = false;
    let mut any_cost = false;

    for i in 0..n {
        let (sub, frame_map) = obs.viewpoint_subset(i);
        let init_poses: Result<Vec<RigidTransform>, OptimError> = frame_map
            .iter()
            .map(|&j| {
                details.per_viewpoint[i].world_poses[j].ok_or_else(|| {
                    closed_form_err(CalibrationError::AtViewpoint {
                        viewpoint: i,
                        source: Box::new(CalibrationError::MissingFramePose { frame: j }),
                    })
                })
            })
            .collect();
        let init_i = ArrayCalibration {
            viewpoints: vec![ViewpointCalibration {
                intrinsics: details.per_viewpoint[i].intrinsics,
                distortion: crate::geometry::Distortion::zero(),
                rel_pose: RigidTransform::identity(),
            }],
            world_poses: init_poses?,
        };
        let result = optimize(&init_i, &sub, opts)?;

        iterations = iterations.max(result.report.iterations);
        match result.report.termination {
            TerminationReason::MaxIterations => any_max = true,
            TerminationReason::CostConverged => any_cost = true,
            TerminationReason::GradientConverged => {}
        }

        let mut worlds = vec![None; obs.n_frames()];
        for (sub_j, &old_j) in frame_map.iter().enumerate() {
            worlds[old_j] = Some(result.calibration.world_poses[sub_j]);
        }
        world_by_viewpoint.push(worlds);
        viewpoints.push(result.calibration.viewpoints.into_iter().next().expect("one viewpoint"));
    }

    // Viewpoint 0 anchors every frame, so its refined poses are all present.
    let world_poses: Vec<RigidTransform> =
        world_by_viewpoint[0].iter().map(|p| p.expect("anchored frame")).collect();

    for (i, vp) in viewpoints.iter_mut().enumerate().skip(1) {
        let rels: Vec<RigidTransform> = world_by_viewpoint[i]
            .iter()
            .zip(&world_poses)
            .filter_map(|(wi, w0)| wi.map(|wi| relative_from_world(&wi, w0)))
            .collect();
        vp.rel_pose = aggregate_relative_poses(&rels).map_err(|e| {
            closed_form_err(CalibrationError::AtViewpoint { viewpoint: i, source: Box::new(e) })
        })?;
    }

    let calibration = ArrayCalibration { viewpoints, world_poses };
    let final_rms = super::reprojection_rms(&calibration, obs)?;
    let per_viewpoint_rms = super::per_viewpoint_errors(&calibration, obs)?;
    let termination = if any_max {
        TerminationReason::MaxIterations
    } else if any_cost {
        TerminationReason::CostConverged
    } else {
        TerminationReason::GradientConverged
    };
    let report = OptimizeReport {
        initial_rms,
        final_rms,
        per_viewpoint_rms_std: super::population_std(&per_viewpoint_rms),
        per_viewpoint_rms,
        iterations,
        termination,
    };
    Ok(CalibrationResult { calibration, report })
}
