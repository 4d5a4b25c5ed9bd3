//! On-disk formats: observation files, calibration files, simulation
//! configs.
//!
//! All three are line-based UTF-8. `#` starts a comment, blank lines are
//! ignored, the first meaningful line is a magic string naming format and
//! version. Floats are written in Rust's shortest round-trip form, so a
//! write/read cycle reproduces every value bit for bit.
//!
//! Writes go through a temp file in the target directory followed by a
//! rename, so readers never see a partially written file and a failed write
//! leaves nothing behind.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{AxisAngle, Distortion, Intrinsics, Point2, RigidTransform};
use crate::observations::{BoardSpec, ObservationSet};
use crate::optim::{
    ArrayCalibration, CalibrationResult, OptimizeReport, TerminationReason, ViewpointCalibration,
};
use crate::simulator::SimConfig;

const OBSERVATIONS_MAGIC: &str = "lfcal observations v1";
const CALIBRATION_MAGIC: &str = "lfcal calibration v1";
const SIMCONFIG_MAGIC: &str = "lfcal simconfig v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("{detail}")]
    Validation { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, detail: impl Into<String>) -> DataError {
    DataError::Parse { line, detail: detail.into() }
}

fn validation(detail: impl Into<String>) -> DataError {
    DataError::Validation { detail: detail.into() }
}

/// Writes via a temp file in the destination directory plus an atomic
/// rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Meaningful lines with their 1-based numbers: comments and blanks dropped,
/// inline comments stripped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(idx, raw)| {
        let line = match raw.find('#') {
            Some(cut) => &raw[..cut],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            None
        } else {
            Some((idx + 1, line))
        }
    })
}

fn parse_fields<T: std::str::FromStr>(
    line: usize,
    what: &str,
    fields: &[&str],
    expected: usize,
) -> Result<Vec<T>, DataError> {
    if fields.len() != expected {
        return Err(parse_err(
            line,
            format!("{what} takes {expected} values, got {}", fields.len()),
        ));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<T>()
                .map_err(|_| parse_err(line, format!("{what}: cannot parse {f:?}")))
        })
        .collect()
}

fn parse_finite(line: usize, what: &str, fields: &[&str], expected: usize) -> Result<Vec<f64>, DataError> {
    let vals = parse_fields::<f64>(line, what, fields, expected)?;
    if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
        return Err(parse_err(line, format!("{what}: non-finite value {bad}")));
    }
    Ok(vals)
}

// ---------------------------------------------------------------------------
// Observations

/// Serializes an observation set. Records appear in `(viewpoint, frame,
/// point)` order.
pub fn encode_observations(obs: &ObservationSet) -> String {
    let board = obs.board();
    let mut out = String::new();
    let _ = writeln!(out, "{OBSERVATIONS_MAGIC}");
    let _ = writeln!(out, "board {} {} {}", board.rows, board.cols, board.spacing_mm);
    let _ = writeln!(out, "viewpoints {}", obs.n_viewpoints());
    let _ = writeln!(out, "frames {}", obs.n_frames());
    let _ = writeln!(out, "count {}", obs.len());
    for (i, j, k, p) in obs.iter() {
        let _ = writeln!(out, "o {i} {j} {k} {} {}", p.x, p.y);
    }
    out
}

pub fn parse_observations(text: &str) -> Result<ObservationSet, DataError> {
    let mut lines = content_lines(text);
    let (line, magic) = lines.next().ok_or(validation("empty file"))?;
    if magic != OBSERVATIONS_MAGIC {
        return Err(parse_err(line, format!("expected {OBSERVATIONS_MAGIC:?}, got {magic:?}")));
    }

    let mut board: Option<BoardSpec> = None;
    let mut n_viewpoints: Option<usize> = None;
    let mut n_frames: Option<usize> = None;
    let mut declared: Option<usize> = None;
    let mut obs: Option<ObservationSet> = None;
    let mut records = 0usize;

    for (line, content) in lines {
        let mut it = content.split_whitespace();
        let key = it.next().expect("non-empty line");
        let fields: Vec<&str> = it.collect();
        match key {
            "board" => {
                if board.is_some() {
                    return Err(validation(format!("line {line}: duplicate 'board'")));
                }
                let rc = parse_fields::<usize>(line, "board", &fields[..2.min(fields.len())], 2)?;
                let spacing = parse_finite(line, "board spacing", &fields[2..], 1)?[0];
                let spec = BoardSpec { rows: rc[0], cols: rc[1], spacing_mm: spacing };
                spec.validate().map_err(|e| parse_err(line, e.to_string()))?;
                board = Some(spec);
            }
            "viewpoints" => {
                if n_viewpoints.is_some() {
                    return Err(validation(format!("line {line}: duplicate 'viewpoints'")));
                }
                n_viewpoints = Some(parse_fields::<usize>(line, "viewpoints", &fields, 1)?[0]);
            }
            "frames" => {
                if n_frames.is_some() {
                    return Err(validation(format!("line {line}: duplicate 'frames'")));
                }
                n_frames = Some(parse_fields::<usize>(line, "frames", &fields, 1)?[0]);
            }
            "count" => {
                if declared.is_some() {
                    return Err(validation(format!("line {line}: duplicate 'count'")));
                }
                declared = Some(parse_fields::<usize>(line, "count", &fields, 1)?[0]);
            }
            "o" => {
                let set = match obs.as_mut() {
                    Some(set) => set,
                    None => {
                        let b = board.ok_or(parse_err(line, "record before 'board' header"))?;
                        let n = n_viewpoints
                            .ok_or(parse_err(line, "record before 'viewpoints' header"))?;
                        let t =
                            n_frames.ok_or(parse_err(line, "record before 'frames' header"))?;
                        if n == 0 {
                            return Err(validation("viewpoint count must be positive"));
                        }
                        obs = Some(ObservationSet::new(b, n, t));
                        obs.as_mut().expect("just set")
                    }
                };
                if fields.len() != 5 {
                    return Err(parse_err(line, "record takes 'o i j k x y'"));
                }
                let idx = parse_fields::<usize>(line, "record index", &fields[..3], 3)?;
                let xy = parse_finite(line, "record position", &fields[3..], 2)?;
                let (i, j, k) = (idx[0], idx[1], idx[2]);
                if i >= set.n_viewpoints() || j >= set.n_frames() || k >= set.board().point_count()
                {
                    return Err(parse_err(
                        line,
                        format!(
                            "index ({i}, {j}, {k}) out of range for {} viewpoints, {} frames, {} points",
                            set.n_viewpoints(),
                            set.n_frames(),
                            set.board().point_count()
                        ),
                    ));
                }
                if set.get(i, j, k).is_some() {
                    return Err(validation(format!(
                        "line {line}: duplicate observation ({i}, {j}, {k})"
                    )));
                }
                set.set(i, j, k, Point2::new(xy[0], xy[1]));
                records += 1;
            }
            other => return Err(parse_err(line, format!("unknown directive {other:?}"))),
        }
    }

    let declared = declared.ok_or(validation("missing 'count' header"))?;
    if declared != records {
        return Err(validation(format!(
            "'count' declares {declared} records but the file holds {records}"
        )));
    }
    match obs {
        Some(set) => Ok(set),
        None => {
            // A headers-only file is valid when it declares zero records.
            let b = board.ok_or(validation("missing 'board' header"))?;
            let n = n_viewpoints.ok_or(validation("missing 'viewpoints' header"))?;
            let t = n_frames.ok_or(validation("missing 'frames' header"))?;
            if n == 0 {
                return Err(validation("viewpoint count must be positive"));
            }
            Ok(ObservationSet::new(b, n, t))
        }
    }
}

pub fn write_observations(obs: &ObservationSet, path: &Path) -> Result<(), DataError> {
    write_atomic(path, encode_observations(obs).as_bytes())?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<ObservationSet, DataError> {
    parse_observations(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Calibration

/// A calibration read back from disk, with non-fatal notes (e.g. a viewpoint
/// without a distortion line, which reads as zero distortion).
#[derive(Debug, Clone)]
pub struct ReadCalibration {
    pub result: CalibrationResult,
    pub warnings: Vec<String>,
}

/// Serializes a calibration result.
///
/// Rotations are stored as axis-angle vectors, which read back as valid
/// rotations no matter how the numbers are perturbed. Viewpoint 0 is the
/// gauge: its pose is written as literal zeros and must be the identity.
pub fn encode_calibration(result: &CalibrationResult) -> Result<String, DataError> {
    let calib = &result.calibration;
    let gauge = &calib.viewpoints[0].rel_pose;
    if (gauge.rotation - nalgebra::Matrix3::identity()).amax() > 1e-9
        || gauge.translation.amax() > 1e-9
    {
        return Err(validation("viewpoint 0's relative pose must be the identity"));
    }

    let mut out = String::new();
    let _ = writeln!(out, "{CALIBRATION_MAGIC}");
    let _ = writeln!(out, "viewpoints {}", calib.n_viewpoints());
    let _ = writeln!(out, "frames {}", calib.n_frames());
    for (i, vp) in calib.viewpoints.iter().enumerate() {
        let a = &vp.intrinsics;
        let _ = writeln!(
            out,
            "viewpoint {i} intrinsics {} {} {} {} {}",
            a.alpha, a.beta, a.gamma, a.u0, a.v0
        );
        let d = &vp.distortion;
        let _ = writeln!(out, "viewpoint {i} distortion {} {} {} {}", d.k1, d.k2, d.p1, d.p2);
        if i == 0 {
            let _ = writeln!(out, "viewpoint 0 rotation 0 0 0");
            let _ = writeln!(out, "viewpoint 0 translation 0 0 0");
        } else {
            let aa = axis_angle_of(&vp.rel_pose, || format!("viewpoint {i} rotation"))?;
            let _ = writeln!(out, "viewpoint {i} rotation {} {} {}", aa.x, aa.y, aa.z);
            let t = &vp.rel_pose.translation;
            let _ = writeln!(out, "viewpoint {i} translation {} {} {}", t.x, t.y, t.z);
        }
    }
    for (j, pose) in calib.world_poses.iter().enumerate() {
        let aa = axis_angle_of(pose, || format!("frame {j} rotation"))?;
        let _ = writeln!(out, "frame {j} rotation {} {} {}", aa.x, aa.y, aa.z);
        let t = &pose.translation;
        let _ = writeln!(out, "frame {j} translation {} {} {}", t.x, t.y, t.z);
    }
    let r = &result.report;
    let _ = writeln!(out, "report initial_rms {}", r.initial_rms);
    let _ = writeln!(out, "report final_rms {}", r.final_rms);
    let rms_list: Vec<String> = r.per_viewpoint_rms.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "report per_viewpoint_rms {}", rms_list.join(" "));
    let _ = writeln!(out, "report per_viewpoint_rms_std {}", r.per_viewpoint_rms_std);
    let _ = writeln!(out, "report iterations {}", r.iterations);
    let _ = writeln!(out, "report termination {}", r.termination);
    Ok(out)
}

fn axis_angle_of(
    pose: &RigidTransform,
    what: impl Fn() -> String,
) -> Result<Vector3<f64>, DataError> {
    AxisAngle::from_matrix(&pose.rotation)
        .map(|aa| aa.0)
        .map_err(|e| validation(format!("{}: {e}", what())))
}

pub fn parse_calibration(text: &str) -> Result<ReadCalibration, DataError> {
    let mut lines = content_lines(text);
    let (line, magic) = lines.next().ok_or(validation("empty file"))?;
    if magic != CALIBRATION_MAGIC {
        return Err(parse_err(line, format!("expected {CALIBRATION_MAGIC:?}, got {magic:?}")));
    }

    let mut n_viewpoints: Option<usize> = None;
    let mut n_frames: Option<usize> = None;
    // Keyed by (scope, index, field); values are (line, numbers).
    let mut entries: HashMap<(String, usize, String), (usize, Vec<f64>)> = HashMap::new();
    let mut report_lines: HashMap<String, (usize, String)> = HashMap::new();

    for (line, content) in lines {
        let mut it = content.split_whitespace();
        let key = it.next().expect("non-empty line");
        let fields: Vec<&str> = it.collect();
        match key {
            "viewpoints" => {
                if n_viewpoints.is_some() {
                    return Err(validation(format!("line {line}: duplicate 'viewpoints'")));
                }
                n_viewpoints = Some(parse_fields::<usize>(line, "viewpoints", &fields, 1)?[0]);
            }
            "frames" => {
                if n_frames.is_some() {
                    return Err(validation(format!("line {line}: duplicate 'frames'")));
                }
                n_frames = Some(parse_fields::<usize>(line, "frames", &fields, 1)?[0]);
            }
            "viewpoint" | "frame" => {
                if fields.len() < 2 {
                    return Err(parse_err(line, format!("'{key}' takes an index and a field")));
                }
                let index: usize = fields[0]
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad index {:?}", fields[0])))?;
                let field = fields[1].to_string();
                let expected = match (key, field.as_str()) {
                    ("viewpoint", "intrinsics") => 5,
                    ("viewpoint", "distortion") => 4,
                    (_, "rotation") | (_, "translation") => 3,
                    _ => return Err(parse_err(line, format!("unknown field {field:?}"))),
                };
                let vals = parse_finite(line, &field, &fields[2..], expected)?;
                if entries
                    .insert((key.to_string(), index, field.clone()), (line, vals))
                    .is_some()
                {
                    return Err(validation(format!(
                        "line {line}: duplicate '{key} {index} {field}'"
                    )));
                }
            }
            "report" => {
                if fields.is_empty() {
                    return Err(parse_err(line, "'report' takes a field"));
                }
                let field = fields[0].to_string();
                let rest = fields[1..].join(" ");
                if report_lines.insert(field.clone(), (line, rest)).is_some() {
                    return Err(validation(format!("line {line}: duplicate 'report {field}'")));
                }
            }
            other => return Err(parse_err(line, format!("unknown directive {other:?}"))),
        }
    }

    let n = n_viewpoints.ok_or(validation("missing 'viewpoints' header"))?;
    let t = n_frames.ok_or(validation("missing 'frames' header"))?;
    if n == 0 {
        return Err(validation("viewpoint count must be positive"));
    }
    for ((scope, index, _), (line, _)) in &entries {
        let limit = if scope == "viewpoint" { n } else { t };
        if *index >= limit {
            return Err(parse_err(
                *line,
                format!("{scope} {index} out of range ({limit} declared)"),
            ));
        }
    }

    let mut warnings = Vec::new();
    let take = |entries: &HashMap<(String, usize, String), (usize, Vec<f64>)>,
                scope: &str,
                index: usize,
                field: &str|
     -> Result<Vec<f64>, DataError> {
        entries
            .get(&(scope.to_string(), index, field.to_string()))
            .map(|(_, v)| v.clone())
            .ok_or(validation(format!("{scope} {index} is missing '{field}'")))
    };

    let mut viewpoints = Vec::with_capacity(n);
    for i in 0..n {
        let a = take(&entries, "viewpoint", i, "intrinsics")?;
        let intrinsics = Intrinsics::new(a[0], a[1], a[2], a[3], a[4])
            .map_err(|e| validation(format!("viewpoint {i}: {e}")))?;
        let distortion = match entries.get(&("viewpoint".into(), i, "distortion".into())) {
            Some((_, d)) => Distortion { k1: d[0], k2: d[1], p1: d[2], p2: d[3] },
            None => {
                warnings.push(format!("viewpoint {i}: no distortion line, assuming zero"));
                Distortion::zero()
            }
        };
        let r = take(&entries, "viewpoint", i, "rotation")?;
        let tr = take(&entries, "viewpoint", i, "translation")?;
        let rel_pose = if i == 0 {
            if r.iter().any(|&v| v != 0.0) || tr.iter().any(|&v| v != 0.0) {
                return Err(validation(
                    "viewpoint 0's pose must be exactly zero; it is the gauge".to_string(),
                ));
            }
            RigidTransform::identity()
        } else {
            RigidTransform {
                rotation: AxisAngle(Vector3::new(r[0], r[1], r[2])).to_matrix(),
                translation: Vector3::new(tr[0], tr[1], tr[2]),
            }
        };
        viewpoints.push(ViewpointCalibration { intrinsics, distortion, rel_pose });
    }

    let mut world_poses = Vec::with_capacity(t);
    for j in 0..t {
        let r = take(&entries, "frame", j, "rotation")?;
        let tr = take(&entries, "frame", j, "translation")?;
        world_poses.push(RigidTransform {
            rotation: AxisAngle(Vector3::new(r[0], r[1], r[2])).to_matrix(),
            translation: Vector3::new(tr[0], tr[1], tr[2]),
        });
    }

    let report = parse_report(&report_lines, n)?;
    Ok(ReadCalibration {
        result: CalibrationResult {
            calibration: ArrayCalibration { viewpoints, world_poses },
            report,
        },
        warnings,
    })
}

fn parse_report(
    report_lines: &HashMap<String, (usize, String)>,
    n_viewpoints: usize,
) -> Result<OptimizeReport, DataError> {
    let get = |field: &str| -> Result<(usize, String), DataError> {
        report_lines
            .get(field)
            .cloned()
            .ok_or(validation(format!("missing 'report {field}'")))
    };
    let float = |field: &str| -> Result<f64, DataError> {
        let (line, text) = get(field)?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        Ok(parse_finite(line, field, &fields, 1)?[0])
    };

    let initial_rms = float("initial_rms")?;
    let final_rms = float("final_rms")?;
    let per_viewpoint_rms_std = float("per_viewpoint_rms_std")?;
    let (line, list) = get("per_viewpoint_rms")?;
    let fields: Vec<&str> = list.split_whitespace().collect();
    let per_viewpoint_rms = parse_finite(line, "per_viewpoint_rms", &fields, n_viewpoints)?;
    let (line, iters) = get("iterations")?;
    let iterations =
        parse_fields::<usize>(line, "iterations", &iters.split_whitespace().collect::<Vec<_>>(), 1)?[0];
    let (line, term) = get("termination")?;
    let termination: TerminationReason =
        term.trim().parse().map_err(|e: String| parse_err(line, e))?;

    Ok(OptimizeReport {
        initial_rms,
        final_rms,
        per_viewpoint_rms,
        per_viewpoint_rms_std,
        iterations,
        termination,
    })
}

pub fn write_calibration(result: &CalibrationResult, path: &Path) -> Result<(), DataError> {
    write_atomic(path, encode_calibration(result)?.as_bytes())?;
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<ReadCalibration, DataError> {
    parse_calibration(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Simulation config

/// Parses a simulation config. Every line is optional and overrides the
/// 5x5 array preset, so a config file only states what differs from it.
pub fn parse_sim_config(text: &str) -> Result<SimConfig, DataError> {
    let mut lines = content_lines(text);
    let (line, magic) = lines.next().ok_or(validation("empty file"))?;
    if magic != SIMCONFIG_MAGIC {
        return Err(parse_err(line, format!("expected {SIMCONFIG_MAGIC:?}, got {magic:?}")));
    }

    let mut cfg = SimConfig::array_5x5();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, content) in lines {
        let mut it = content.split_whitespace();
        let key = it.next().expect("non-empty line");
        let fields: Vec<&str> = it.collect();
        if let Some(prev) = seen.insert(key.to_string(), line) {
            return Err(validation(format!(
                "line {line}: duplicate '{key}' (first on line {prev})"
            )));
        }
        match key {
            "grid" => {
                let v = parse_fields::<usize>(line, "grid", &fields, 2)?;
                cfg.grid_cols = v[0];
                cfg.grid_rows = v[1];
            }
            "grid_spacing_mm" => cfg.grid_spacing_mm = parse_finite(line, key, &fields, 1)?[0],
            "image" => {
                let v = parse_fields::<usize>(line, "image", &fields, 2)?;
                cfg.image_width = v[0];
                cfg.image_height = v[1];
            }
            "intrinsics" => {
                let v = parse_finite(line, key, &fields, 5)?;
                cfg.intrinsics = Intrinsics::new(v[0], v[1], v[2], v[3], v[4])
                    .map_err(|e| parse_err(line, e.to_string()))?;
            }
            "distortion" => {
                let v = parse_finite(line, key, &fields, 4)?;
                cfg.distortion = Distortion { k1: v[0], k2: v[1], p1: v[2], p2: v[3] };
            }
            "board" => {
                let rc = parse_fields::<usize>(line, "board", &fields[..2.min(fields.len())], 2)?;
                let spacing = parse_finite(line, "board spacing", &fields[2..], 1)?[0];
                cfg.board = BoardSpec { rows: rc[0], cols: rc[1], spacing_mm: spacing };
            }
            "frames" => cfg.n_frames = parse_fields::<usize>(line, key, &fields, 1)?[0],
            "noise_sigma" => cfg.noise_sigma = parse_finite(line, key, &fields, 1)?[0],
            "trials" => cfg.n_trials = parse_fields::<usize>(line, key, &fields, 1)?[0],
            "seed" => cfg.seed = parse_fields::<u64>(line, key, &fields, 1)?[0],
            other => return Err(parse_err(line, format!("unknown directive {other:?}"))),
        }
    }
    cfg.validate().map_err(|e| validation(e.to_string()))?;
    Ok(cfg)
}

pub fn read_sim_config(path: &Path) -> Result<SimConfig, DataError> {
    parse_sim_config(&std::fs::read_to_string(path)?)
}
