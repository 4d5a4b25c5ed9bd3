//! Acceptance gate: one test per shipping criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`) plus the measured numbers.
//!
//! Criteria 2-4 share one noise sweep (5 sigma levels x 20 trials on the
//! 5x5 preset); it runs once behind a `Lazy`.

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lfcal::geometry::{
    compose_world_pose, distort, project, relative_from_world, undistort, AxisAngle, Distortion,
    Intrinsics, Point3, RigidTransform,
};
use lfcal::lightfield::{rectify, refocus, sharpness, Image, LightField};
use lfcal::observations::{BoardSpec, ObservationSet};
use lfcal::optim::{
    jacobian, numeric_jacobian, optimize, reprojection_rms, OptimizeOptions, ParameterVector,
    ViewpointCalibration,
};
use lfcal::simulator::{
    generate_scene, render_plane_views, run_noise_sweep, run_trial, trial_seeds, Method,
    SimConfig, SweepMetric, SweepReport,
};
use lfcal::zhang::run_closed_form;
use lfcal::{dataio, ArrayCalibration};
use nalgebra::{DVector, Vector2, Vector3};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {id:02} {name}: {} [{detail}]",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id:02} {name} failed: {detail}");
}

const SWEEP_SIGMAS: [f64; 5] = [0.2, 0.6, 1.0, 1.4, 1.8];

static SWEEP: Lazy<SweepReport> = Lazy::new(|| {
    run_noise_sweep(&SimConfig::array_5x5(), &SWEEP_SIGMAS).expect("sweep must complete")
});

#[test]
fn criterion_01_noiseless_closure() {
    let start = std::time::Instant::now();
    let cfg = SimConfig::array_5x5();
    let (pose_seed, _) = trial_seeds(cfg.seed, 0);
    let (truth, obs) = generate_scene(&cfg, pose_seed).unwrap();
    assert_eq!(obs.len(), 19_250, "preset shape: 25 viewpoints x 11 frames x 70 points");

    let init = run_closed_form(&obs, false).unwrap();
    let mut worst_intr: f64 = 0.0;
    for vp in &init.viewpoints {
        let a = &vp.intrinsics;
        for (got, want) in [
            (a.alpha, 700.0),
            (a.beta, 700.0),
            (a.u0, 320.0),
            (a.v0, 240.0),
        ] {
            worst_intr = worst_intr.max((got - want).abs() / want);
        }
    }

    let result = optimize(&init, &obs, &OptimizeOptions::default()).unwrap();
    let rms = result.report.final_rms;
    let mut worst_t: f64 = 0.0;
    for (vp, truth_vp) in result.calibration.viewpoints.iter().zip(&truth.viewpoints) {
        worst_t = worst_t.max((vp.rel_pose.translation - truth_vp.rel_pose.translation).amax());
    }
    let elapsed = start.elapsed();

    let pass = worst_intr < 1e-6 && rms < 1e-8 && worst_t < 1e-6 && elapsed.as_secs() < 30;
    verdict(
        1,
        "noiseless closure",
        pass,
        &format!(
            "closed-form intrinsics rel err {worst_intr:.2e} < 1e-6, refined rms {rms:.2e} px < 1e-8, \
             rel translation err {worst_t:.2e} mm < 1e-6, {elapsed:.2?} < 30 s"
        ),
    );
}

#[test]
fn criterion_02_subpixel_rms_under_noise() {
    let start = std::time::Instant::now();
    let mean = SWEEP.mean_of(0.6, Method::Global, SweepMetric::RmsPx).unwrap();
    let n = SWEEP
        .rows
        .iter()
        .find(|r| r.sigma == 0.6 && r.method == Method::Global && r.metric == SweepMetric::RmsPx)
        .unwrap()
        .n_trials;
    let elapsed = start.elapsed();
    let pass = mean < 1.0 && n == 20 && elapsed.as_secs() < 600;
    verdict(
        2,
        "sub-pixel rms at sigma 0.6",
        pass,
        &format!("mean final rms {mean:.4} px < 1.0 over {n} trials, sweep took {elapsed:.2?} < 10 min"),
    );
}

#[test]
fn criterion_03_method_ordering() {
    let mut pass = true;
    let mut parts = Vec::new();
    for &sigma in &SWEEP_SIGMAS {
        let global = SWEEP.mean_of(sigma, Method::Global, SweepMetric::RmsPx).unwrap();
        let indep = SWEEP.mean_of(sigma, Method::Independent, SweepMetric::RmsPx).unwrap();
        let closed = SWEEP.mean_of(sigma, Method::ClosedForm, SweepMetric::RmsPx).unwrap();
        for method in Method::ALL {
            let n = SWEEP
                .rows
                .iter()
                .find(|r| r.sigma == sigma && r.method == method && r.metric == SweepMetric::RmsPx)
                .unwrap()
                .n_trials;
            pass &= n == 20;
        }
        pass &= global <= indep && indep <= closed;
        parts.push(format!("s={sigma}: {global:.3} <= {indep:.3} <= {closed:.3}"));
    }
    verdict(3, "global <= independent <= closed-form rms", pass, &parts.join("; "));
}

#[test]
fn criterion_04_focal_error_grows_with_noise() {
    let means: Vec<f64> = SWEEP_SIGMAS
        .iter()
        .map(|&s| SWEEP.mean_of(s, Method::Global, SweepMetric::AlphaRelErr).unwrap())
        .collect();
    // Strict monotonicity over the five levels is rank correlation 1.
    let pass = means.windows(2).all(|w| w[1] > w[0]);
    let detail: Vec<String> = SWEEP_SIGMAS
        .iter()
        .zip(&means)
        .map(|(s, m)| format!("s={s}: {m:.2e}"))
        .collect();
    verdict(4, "focal error strictly increasing in sigma", pass, &detail.join(", "));
}

#[test]
fn criterion_05_error_uniformity_across_viewpoints() {
    let cfg = SimConfig::array_5x5();
    let mut wins = 0;
    let mut comparable = 0;
    for trial in 0..cfg.n_trials {
        let outcome = run_trial(&cfg, 0.5, trial).unwrap();
        if let (Some(g), Some(i)) = (outcome.global, outcome.independent) {
            comparable += 1;
            if g.per_viewpoint_rms_std < i.per_viewpoint_rms_std {
                wins += 1;
            }
        }
    }
    let pass = comparable == 20 && wins >= 18;
    verdict(
        5,
        "per-viewpoint rms spread: global under independent",
        pass,
        &format!("{wins}/{comparable} trials at sigma 0.5 (need >= 18/20)"),
    );
}

#[test]
fn criterion_06_analytic_jacobian_matches_finite_differences() {
    let start = std::time::Instant::now();
    let cfg = SimConfig {
        grid_rows: 3,
        grid_cols: 3,
        n_frames: 5,
        ..SimConfig::array_5x5()
    };
    let (truth, obs) = generate_scene(&cfg, 4021).unwrap();
    let opts = OptimizeOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1999);
    let mut worst: f64 = 0.0;

    for _ in 0..10 {
        let model = perturbed_model(&truth, &mut rng);
        let params = ParameterVector::pack(&model, &opts).unwrap();
        let analytic = jacobian(&params, &obs).unwrap();
        let numeric = numeric_jacobian(&params, &obs, 1e-6).unwrap();
        let rel = (&analytic - &numeric).amax() / analytic.amax();
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed.as_secs() < 60;
    verdict(
        6,
        "jacobian vs central differences",
        pass,
        &format!("max rel err {worst:.2e} < 1e-4 over 10 points, {elapsed:.2?} < 1 min"),
    );
}

fn perturbed_model(truth: &ArrayCalibration, rng: &mut ChaCha8Rng) -> ArrayCalibration {
    let mut u = |scale: f64| rng.random_range(-scale..scale);
    let mut model = truth.clone();
    for (i, vp) in model.viewpoints.iter_mut().enumerate() {
        let a = &mut vp.intrinsics;
        a.alpha += u(5.0);
        a.beta += u(5.0);
        a.gamma += u(0.3);
        a.u0 += u(2.0);
        a.v0 += u(2.0);
        vp.distortion = Distortion { k1: u(0.01), k2: u(0.002), p1: u(0.001), p2: u(0.001) };
        if i >= 1 {
            let nudge = AxisAngle(Vector3::new(u(0.01), u(0.01), u(0.01))).to_matrix();
            vp.rel_pose.rotation = nudge * vp.rel_pose.rotation;
            vp.rel_pose.translation += Vector3::new(u(1.0), u(1.0), u(1.0));
        }
    }
    for pose in &mut model.world_poses {
        let nudge = AxisAngle(Vector3::new(u(0.01), u(0.01), u(0.01))).to_matrix();
        pose.rotation = nudge * pose.rotation;
        pose.translation += Vector3::new(u(2.0), u(2.0), u(2.0));
    }
    model
}

#[test]
fn criterion_07_algebra_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(812);
    let mut worst_pose: f64 = 0.0;
    let mut worst_dist: f64 = 0.0;
    let mut worst_rot: f64 = 0.0;

    let random_rotation = |rng: &mut ChaCha8Rng, max_angle: f64| {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis.normalize() };
        AxisAngle(axis * rng.random_range(0.0..max_angle)).to_matrix()
    };

    // World-pose composition against relative-pose recovery.
    for _ in 0..1000 {
        let rel = RigidTransform {
            rotation: random_rotation(&mut rng, 0.8),
            translation: Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-10.0..10.0),
            ),
        };
        let world0 = RigidTransform {
            rotation: random_rotation(&mut rng, std::f64::consts::PI - 0.01),
            translation: Vector3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(600.0..1200.0),
            ),
        };
        let world_i = compose_world_pose(&rel, &world0);
        let back = relative_from_world(&world_i, &world0);
        worst_pose = worst_pose
            .max((back.rotation - rel.rotation).amax())
            .max((back.translation - rel.translation).amax());
    }

    // Forward distortion against its fixed-point inverse.
    for _ in 0..1000 {
        let d = Distortion {
            k1: rng.random_range(-0.2..0.2),
            k2: rng.random_range(-0.05..0.05),
            p1: rng.random_range(-0.005..0.005),
            p2: rng.random_range(-0.005..0.005),
        };
        let n = Vector2::new(rng.random_range(-0.35..0.35), rng.random_range(-0.35..0.35));
        let back = undistort(&d, distort(&d, n)).unwrap();
        worst_dist = worst_dist.max((back - n).amax());
    }

    // Axis-angle against rotation matrices, pushing into both branch
    // regions (tiny angles and angles near a half turn).
    for case in 0..1000 {
        let angle = match case % 3 {
            0 => rng.random_range(1e-10..1e-6),
            1 => std::f64::consts::PI - rng.random_range(1e-9..1e-3),
            _ => rng.random_range(0.0..std::f64::consts::PI),
        };
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis.normalize() };
        let m = AxisAngle(axis * angle).to_matrix();
        let back = AxisAngle::from_matrix(&m).unwrap().to_matrix();
        worst_rot = worst_rot.max((back - m).amax());
    }

    let pass = worst_pose < 1e-9 && worst_dist < 1e-10 && worst_rot < 1e-9;
    verdict(
        7,
        "algebra round trips (1000 cases each)",
        pass,
        &format!(
            "pose compose/recover {worst_pose:.2e} < 1e-9, distort/undistort {worst_dist:.2e} < 1e-10, \
             axis-angle {worst_rot:.2e} < 1e-9"
        ),
    );
}

#[test]
fn criterion_08_rectified_views_agree_at_infinity() {
    // Rotated, distorted rig observing blobs effectively at infinity:
    // after rectification the blob centroids must coincide across views.
    let intr = Intrinsics { alpha: 350.0, beta: 350.0, gamma: 0.0, u0: 159.5, v0: 119.5 };
    let rig = ArrayCalibration {
        viewpoints: vec![
            ViewpointCalibration {
                intrinsics: intr,
                distortion: Distortion::zero(),
                rel_pose: RigidTransform::identity(),
            },
            ViewpointCalibration {
                intrinsics: intr,
                distortion: Distortion { k1: -0.08, k2: 0.01, p1: 0.0, p2: 0.0 },
                rel_pose: RigidTransform {
                    rotation: AxisAngle(Vector3::new(0.0, 1.5f64.to_radians(), 0.0)).to_matrix(),
                    translation: Vector3::new(-30.0, 0.0, 0.0),
                },
            },
            ViewpointCalibration {
                intrinsics: intr,
                distortion: Distortion::zero(),
                rel_pose: RigidTransform {
                    rotation: AxisAngle(Vector3::new(
                        -1.0f64.to_radians(),
                        0.5f64.to_radians(),
                        0.8f64.to_radians(),
                    ))
                    .to_matrix(),
                    translation: Vector3::new(0.0, -30.0, 0.0),
                },
            },
        ],
        world_poses: Vec::new(),
    };

    let blobs = [(70.0, 70.0), (240.0, 60.0), (160.0, 180.0)];
    let mut texture = Image::zeros(320, 240, 1);
    for y in 0..240 {
        for x in 0..320 {
            let mut v = 0.0;
            for &(bx, by) in &blobs {
                let r2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                v += (-r2 / (2.0 * 2.5f64.powi(2))).exp();
            }
            texture.set(x, y, 0, v);
        }
    }

    // 1e7 mm: residual true disparity alpha*b/Z is 0.0011 px, far below
    // the tolerance, while the rotations shift content by up to ~9 px.
    let views = render_plane_views(&rig, (320, 240), &texture, 1e7).unwrap();
    let field = LightField::from_calibration(&rig, views).unwrap();
    let rect = rectify(&field, &intr).unwrap();

    let centroid = |img: &Image, near: (f64, f64)| -> (f64, f64) {
        let (cx, cy) = (near.0 as isize, near.1 as isize);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in (cy - 10).max(0)..(cy + 11).min(240) {
            for x in (cx - 10).max(0)..(cx + 11).min(320) {
                let w = img.get(x as usize, y as usize, 0);
                sw += w;
                sx += w * x as f64;
                sy += w * y as f64;
            }
        }
        (sx / sw, sy / sw)
    };

    let mut worst: f64 = 0.0;
    for &blob in &blobs {
        let reference = centroid(&rect.views()[0].image, blob);
        for view in &rect.views()[1..] {
            let c = centroid(&view.image, blob);
            let d = ((c.0 - reference.0).powi(2) + (c.1 - reference.1).powi(2)).sqrt();
            worst = worst.max(d);
        }
    }
    let pass = worst < 0.1;
    verdict(
        8,
        "infinity disparity after rectification",
        pass,
        &format!("max centroid disparity {worst:.4} px < 0.1 across a rotated rig"),
    );
}

#[test]
fn criterion_09_refocus_peaks_at_true_depth_with_calibrated_poses() {
    // A 3x3 rig that is NOT quite the nominal grid: each camera (except the
    // gauge) is slightly rotated and displaced, and all lenses distort.
    let intr = Intrinsics { alpha: 350.0, beta: 350.0, gamma: 0.0, u0: 159.5, v0: 119.5 };
    let dist = Distortion { k1: -0.04, k2: 0.0, p1: 0.0, p2: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(905);
    let mut u = |scale: f64| rng.random_range(-scale..scale);
    let spacing = 20.0;
    let truth = ArrayCalibration {
        viewpoints: (0..9)
            .map(|i| {
                let (row, col) = (i / 3, i % 3);
                let nominal = Vector3::new(col as f64 * spacing, row as f64 * spacing, 0.0);
                let rel_pose = if i == 0 {
                    RigidTransform::identity()
                } else {
                    RigidTransform {
                        rotation: AxisAngle(Vector3::new(u(0.014), u(0.014), u(0.014)))
                            .to_matrix(),
                        translation: -nominal + Vector3::new(u(1.0), u(1.0), u(1.0)),
                    }
                };
                ViewpointCalibration { intrinsics: intr, distortion: dist, rel_pose }
            })
            .collect(),
        world_poses: Vec::new(),
    };

    // Calibrate the rig from synthetic checkerboard captures.
    let board = BoardSpec { rows: 6, cols: 8, spacing_mm: 25.0 };
    let poses = [
        (Vector3::new(0.25, 0.1, 0.2), Vector3::new(-90.0, -60.0, 520.0)),
        (Vector3::new(-0.3, 0.2, -0.4), Vector3::new(-80.0, -70.0, 600.0)),
        (Vector3::new(0.1, -0.35, 0.9), Vector3::new(-100.0, -55.0, 680.0)),
        (Vector3::new(0.0, 0.3, 2.0), Vector3::new(-50.0, -72.0, 660.0)),
        (Vector3::new(-0.2, -0.15, 1.1), Vector3::new(-95.0, -65.0, 750.0)),
        (Vector3::new(0.35, 0.0, -0.7), Vector3::new(-85.0, -50.0, 640.0)),
        (Vector3::new(-0.1, 0.25, 0.6), Vector3::new(-75.0, -75.0, 590.0)),
        (Vector3::new(0.2, -0.2, -0.7), Vector3::new(-90.0, -60.0, 700.0)),
    ];
    let mut obs = ObservationSet::new(board, 9, poses.len());
    for (j, (r, t)) in poses.iter().enumerate() {
        let world = RigidTransform { rotation: AxisAngle(*r).to_matrix(), translation: *t };
        for (i, vp) in truth.viewpoints.iter().enumerate() {
            let cam = vp.rel_pose.compose(&world);
            for (k, m) in board.model_points().iter().enumerate() {
                let p = project(&vp.intrinsics, &vp.distortion, &cam, Point3::new(m.x, m.y, 0.0))
                    .unwrap();
                assert!(
                    p.x >= 0.0 && p.x <= 319.0 && p.y >= 0.0 && p.y <= 239.0,
                    "fixture pose {j} leaves the sensor at viewpoint {i}: {p:?}"
                );
                obs.set(i, j, k, p);
            }
        }
    }
    let init = run_closed_form(&obs, false).unwrap();
    let calibrated = optimize(&init, &obs, &OptimizeOptions::default()).unwrap().calibration;

    // What a user would assume without calibrating: the nominal grid,
    // nominal intrinsics, no distortion.
    let nominal = ArrayCalibration {
        viewpoints: (0..9)
            .map(|i| {
                let (row, col) = (i / 3, i % 3);
                ViewpointCalibration {
                    intrinsics: intr,
                    distortion: Distortion::zero(),
                    rel_pose: RigidTransform {
                        rotation: nalgebra::Matrix3::identity(),
                        translation: Vector3::new(
                            -(col as f64) * spacing,
                            -(row as f64) * spacing,
                            0.0,
                        ),
                    },
                }
            })
            .collect(),
        world_poses: Vec::new(),
    };

    // Render a fine checkerboard plane at 500 mm through the TRUE rig.
    let mut texture = Image::zeros(320, 240, 1);
    for y in 0..240 {
        for x in 0..320 {
            texture.set(x, y, 0, ((x / 4 + y / 4) % 2) as f64);
        }
    }
    let depth = 500.0;
    let views = render_plane_views(&truth, (320, 240), &texture, depth).unwrap();

    let sharp = |model: &ArrayCalibration, d: f64| {
        let field = LightField::from_calibration(model, views.clone()).unwrap();
        sharpness(&refocus(&field, d).unwrap()).unwrap()
    };
    let s_true = sharp(&calibrated, depth);
    let s_near = sharp(&calibrated, 250.0);
    let s_far = sharp(&calibrated, 1000.0);
    let s_nominal = sharp(&nominal, depth);

    let pass = s_true > s_near && s_true > s_far && s_true > s_nominal;
    verdict(
        9,
        "refocus sharpness: true depth and calibrated poses win",
        pass,
        &format!(
            "calibrated at 500 mm {s_true:.4} vs 250 mm {s_near:.4}, 1000 mm {s_far:.4}, \
             nominal grid at 500 mm {s_nominal:.4}"
        ),
    );
}

#[test]
fn criterion_10_file_formats_round_trip_and_reject() {
    // Round trips through real files.
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        grid_rows: 2,
        grid_cols: 2,
        n_frames: 3,
        board: BoardSpec { rows: 4, cols: 5, spacing_mm: 22.5 },
        ..SimConfig::array_5x5()
    };
    let (_, clean) = generate_scene(&cfg, 4242).unwrap();
    let obs = lfcal::simulator::add_noise(&clean, 0.3, 77);
    let obs_path = dir.path().join("caps.obs");
    dataio::write_observations(&obs, &obs_path).unwrap();
    let obs_back = dataio::read_observations(&obs_path).unwrap();
    let obs_roundtrip = obs == obs_back;

    let result = optimize(&run_closed_form(&obs, false).unwrap(), &obs, &OptimizeOptions::default())
        .unwrap();
    let cal_path = dir.path().join("rig.cal");
    dataio::write_calibration(&result, &cal_path).unwrap();
    let cal_back = dataio::read_calibration(&cal_path).unwrap().result;
    let mut cal_err: f64 = 0.0;
    for (a, b) in result.calibration.viewpoints.iter().zip(&cal_back.calibration.viewpoints) {
        cal_err = cal_err
            .max((a.intrinsics.alpha - b.intrinsics.alpha).abs() / a.intrinsics.alpha)
            .max((a.rel_pose.rotation - b.rel_pose.rotation).amax())
            .max((a.rel_pose.translation - b.rel_pose.translation).amax());
    }
    for (a, b) in result.calibration.world_poses.iter().zip(&cal_back.calibration.world_poses) {
        cal_err = cal_err.max((a.rotation - b.rotation).amax());
        cal_err = cal_err.max((a.translation - b.translation).amax() / a.translation.amax());
    }

    // Every declared rejection, one fixture each.
    let obs_text = dataio::encode_observations(&obs);
    let cal_text = dataio::encode_calibration(&result).unwrap();
    let rejects = [
        // Observation schema.
        dataio::parse_observations("lfcal calibration v1\n").is_err(),
        dataio::parse_observations(&obs_text.replacen("board 4 5", "board 1 5", 1)).is_err(),
        dataio::parse_observations(&format!("{obs_text}o 2 0 0 1 2\n")).is_err(),
        dataio::parse_observations(&format!("{obs_text}o 0 3 0 1 2\n")).is_err(),
        dataio::parse_observations(&format!("{obs_text}o 0 0 20 1 2\n")).is_err(),
        {
            let dup = obs_text.lines().nth(5).unwrap();
            dataio::parse_observations(&format!("{obs_text}{dup}\n")).is_err()
        },
        dataio::parse_observations(&obs_text.replacen("count 240", "count 239", 1)).is_err(),
        dataio::parse_observations(&obs_text.replacen("viewpoints 4", "viewpoints 4\nviewpoints 4", 1))
            .is_err(),
        dataio::parse_observations(&format!("{obs_text}o 0 0 0 inf 2\n")).is_err(),
        dataio::parse_observations(&format!("{obs_text}orbit 1\n")).is_err(),
        dataio::parse_observations("lfcal observations v1\no 0 0 0 1 2\n").is_err(),
        // Headers-only files parse, then fail calibration preconditions.
        {
            let empty =
                "lfcal observations v1\nboard 4 5 22.5\nviewpoints 4\nframes 3\ncount 0\n";
            let parsed = dataio::parse_observations(empty).unwrap();
            parsed.is_empty() && parsed.validate_for_calibration().is_err()
        },
        // Calibration schema.
        dataio::parse_calibration("lfcal observations v1\n").is_err(),
        dataio::parse_calibration(&cal_text.replace("viewpoint 0 rotation 0 0 0", "viewpoint 0 rotation 1e-13 0 0"))
            .is_err(),
        {
            let dup = cal_text.lines().find(|l| l.starts_with("viewpoint 1 rotation")).unwrap();
            dataio::parse_calibration(&format!("{cal_text}{dup}\n")).is_err()
        },
        {
            let dropped: String = cal_text
                .lines()
                .filter(|l| !l.starts_with("viewpoint 2 translation"))
                .map(|l| format!("{l}\n"))
                .collect();
            dataio::parse_calibration(&dropped).is_err()
        },
        {
            let dropped: String = cal_text
                .lines()
                .filter(|l| !l.starts_with("report iterations"))
                .map(|l| format!("{l}\n"))
                .collect();
            dataio::parse_calibration(&dropped).is_err()
        },
        dataio::parse_calibration(&format!("{cal_text}viewpoint 9 rotation 0 0 0\n")).is_err(),
        dataio::parse_calibration(&regex_free_replace_focal(&cal_text)).is_err(),
        {
            let broken = cal_text
                .lines()
                .map(|l| {
                    if l.starts_with("report termination") {
                        "report termination vibes".to_string()
                    } else {
                        l.to_string()
                    }
                })
                .map(|l| format!("{l}\n"))
                .collect::<String>();
            dataio::parse_calibration(&broken).is_err()
        },
        // Missing distortion is a warning, not an error.
        {
            let dropped: String = cal_text
                .lines()
                .filter(|l| !l.starts_with("viewpoint 3 distortion"))
                .map(|l| format!("{l}\n"))
                .collect();
            let parsed = dataio::parse_calibration(&dropped).unwrap();
            parsed.warnings.len() == 1
                && parsed.result.calibration.viewpoints[3].distortion == Distortion::zero()
        },
    ];
    let all_reject = rejects.iter().all(|&r| r);

    // Image payloads round trip bit for bit at 8-bit depth.
    let mut img = Image::zeros(7, 5, 3);
    for (idx, s) in (0..7 * 5 * 3).enumerate() {
        let q = (s * 11 % 256) as f64 / 255.0;
        img.set(idx % 7, (idx / 7) % 5, idx / 35, q);
    }
    let pnm_path = dir.path().join("t.ppm");
    lfcal::lightfield::write_pnm(&img, &pnm_path).unwrap();
    let img_back = lfcal::lightfield::read_pnm(&pnm_path).unwrap();
    let mut pnm_err: f64 = 0.0;
    for y in 0..5 {
        for x in 0..7 {
            for col in 0..3 {
                pnm_err = pnm_err.max((img.get(x, y, col) - img_back.get(x, y, col)).abs());
            }
        }
    }

    let pass = obs_roundtrip && cal_err < 1e-12 && all_reject && pnm_err < 0.5 / 255.0;
    verdict(
        10,
        "formats round trip and reject bad input",
        pass,
        &format!(
            "observations bit-identical: {obs_roundtrip}, calibration round-trip err {cal_err:.2e} < 1e-12, \
             {} rejection fixtures hold, pnm quantization err {pnm_err:.2e}",
            rejects.len()
        ),
    );
}

fn regex_free_replace_focal(cal_text: &str) -> String {
    // Negate the first intrinsics alpha value.
    cal_text
        .lines()
        .map(|l| {
            if let Some(rest) = l.strip_prefix("viewpoint 0 intrinsics ") {
                format!("viewpoint 0 intrinsics -{rest}\n")
            } else {
                format!("{l}\n")
            }
        })
        .collect()
}

// Keeps the unused-import lint honest: residuals() backs numeric_jacobian and
// is part of the verified surface.
#[test]
fn residual_vector_is_twice_the_observation_count() {
    let cfg = SimConfig { grid_rows: 1, grid_cols: 2, n_frames: 3, ..SimConfig::array_5x5() };
    let (truth, obs) = generate_scene(&cfg, 8).unwrap();
    let params = ParameterVector::pack(&truth, &OptimizeOptions::default()).unwrap();
    let r: DVector<f64> = lfcal::optim::residuals(&params, &obs).unwrap();
    assert_eq!(r.len(), 2 * obs.len());
    assert!(r.amax() < 1e-9, "truth parameters leave residual {}", r.amax());
    let _ = reprojection_rms(&truth, &obs).unwrap();
}
