//! Flattening of the array model into the optimizer's parameter vector.
//!
//! Block order: per viewpoint the enabled intrinsic and distortion entries,
//! then six pose parameters (axis-angle, translation) for each viewpoint
//! except the gauge-fixed viewpoint 0, then six per frame for the board
//! poses. Offsets are pure functions of the problem shape and the options,
//! so the Jacobian assembly and the packing here cannot drift apart.

use nalgebra::{DVector, Vector3};

use crate::geometry::{AxisAngle, Distortion, Intrinsics, RigidTransform};

use super::{ArrayCalibration, OptimError, OptimizeOptions, ViewpointCalibration};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Layout {
    pub n_viewpoints: usize,
    pub n_frames: usize,
    /// 5 entries, 4 with the skew pinned, 0 when intrinsics are frozen.
    pub intr_len: usize,
    /// 4 entries, 0 when distortion is frozen.
    pub dist_len: usize,
}

impl Layout {
    pub fn new(n_viewpoints: usize, n_frames: usize, opts: &OptimizeOptions) -> Self {
        let intr_len = if !opts.refine_intrinsics {
            0
        } else if opts.fix_skew {
            4
        } else {
            5
        };
        let dist_len = if opts.refine_distortion { 4 } else { 0 };
        Self { n_viewpoints, n_frames, intr_len, dist_len }
    }

    pub fn per_viewpoint(&self) -> usize {
        self.intr_len + self.dist_len
    }

    pub fn n_params(&self) -> usize {
        self.n_viewpoints * self.per_viewpoint()
            + 6 * (self.n_viewpoints - 1)
            + 6 * self.n_frames
    }

    pub fn intr_offset(&self, i: usize) -> usize {
        i * self.per_viewpoint()
    }

    pub fn dist_offset(&self, i: usize) -> usize {
        i * self.per_viewpoint() + self.intr_len
    }

    /// Offset of the relative pose block of viewpoint `i >= 1`.
    pub fn rel_offset(&self, i: usize) -> usize {
        debug_assert!(i >= 1);
        self.n_viewpoints * self.per_viewpoint() + 6 * (i - 1)
    }

    pub fn world_offset(&self, j: usize) -> usize {
        self.n_viewpoints * self.per_viewpoint() + 6 * (self.n_viewpoints - 1) + 6 * j
    }
}

/// The array model with rotations in axis-angle form, the representation the
/// residual and Jacobian code evaluates.
#[derive(Debug, Clone)]
pub(crate) struct Model {
    pub intr: Vec<Intrinsics>,
    pub dist: Vec<Distortion>,
    /// `(axis-angle, translation)`; entry 0 is zero and never touched.
    pub rel: Vec<(Vector3<f64>, Vector3<f64>)>,
    pub world: Vec<(Vector3<f64>, Vector3<f64>)>,
}

impl Model {
    pub fn from_calibration(calib: &ArrayCalibration) -> Result<Self, OptimError> {
        let mut rel = Vec::with_capacity(calib.n_viewpoints());
        for vp in &calib.viewpoints {
            rel.push(super::rotation_to_axis_angle(&vp.rel_pose)?);
        }
        let mut world = Vec::with_capacity(calib.n_frames());
        for pose in &calib.world_poses {
            world.push(super::rotation_to_axis_angle(pose)?);
        }
        Ok(Self {
            intr: calib.viewpoints.iter().map(|v| v.intrinsics).collect(),
            dist: calib.viewpoints.iter().map(|v| v.distortion).collect(),
            rel,
            world,
        })
    }

    pub fn to_calibration(&self) -> ArrayCalibration {
        let viewpoints = (0..self.intr.len())
            .map(|i| ViewpointCalibration {
                intrinsics: self.intr[i],
                distortion: self.dist[i],
                rel_pose: if i == 0 {
                    // Gauge: keep the exact identity rather than a rebuilt one.
                    RigidTransform::identity()
                } else {
                    RigidTransform {
                        rotation: AxisAngle(self.rel[i].0).to_matrix(),
                        translation: self.rel[i].1,
                    }
                },
            })
            .collect();
        let world_poses = self
            .world
            .iter()
            .map(|(r, t)| RigidTransform {
                rotation: AxisAngle(*r).to_matrix(),
                translation: *t,
            })
            .collect();
        ArrayCalibration { viewpoints, world_poses }
    }
}

/// The flat parameter vector plus everything needed to rebuild a full model:
/// layout and the frozen blocks that are not being optimized.
#[derive(Debug, Clone)]
pub struct ParameterVector {
    pub(crate) layout: Layout,
    pub(crate) values: DVector<f64>,
    pub(crate) base: Model,
}

impl ParameterVector {
    /// Flattens `init` according to the options.
    pub fn pack(init: &ArrayCalibration, opts: &OptimizeOptions) -> Result<Self, OptimError> {
        let layout = Layout::new(init.n_viewpoints(), init.n_frames(), opts);
        let base = Model::from_calibration(init)?;
        let mut values = DVector::zeros(layout.n_params());
        for i in 0..layout.n_viewpoints {
            write_intrinsics(&mut values, layout.intr_offset(i), layout.intr_len, &base.intr[i]);
            if layout.dist_len == 4 {
                let o = layout.dist_offset(i);
                let d = &base.dist[i];
                values[o] = d.k1;
                values[o + 1] = d.k2;
                values[o + 2] = d.p1;
                values[o + 3] = d.p2;
            }
            if i >= 1 {
                write_pose(&mut values, layout.rel_offset(i), &base.rel[i]);
            }
        }
        for j in 0..layout.n_frames {
            write_pose(&mut values, layout.world_offset(j), &base.world[j]);
        }
        Ok(Self { layout, values, base })
    }

    /// Rebuilds the full model, merging optimized values over frozen blocks.
    pub fn unpack(&self) -> ArrayCalibration {
        self.model().to_calibration()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn set_values(&mut self, values: DVector<f64>) {
        assert_eq!(values.len(), self.layout.n_params());
        self.values = values;
    }

    /// Model at the current values, in the evaluator's representation.
    pub(crate) fn model(&self) -> Model {
        let mut m = self.base.clone();
        let l = &self.layout;
        for i in 0..l.n_viewpoints {
            if l.intr_len > 0 {
                m.intr[i] = read_intrinsics(&self.values, l.intr_offset(i), l.intr_len);
            }
            if l.dist_len == 4 {
                let o = l.dist_offset(i);
                m.dist[i] = Distortion {
                    k1: self.values[o],
                    k2: self.values[o + 1],
                    p1: self.values[o + 2],
                    p2: self.values[o + 3],
                };
            }
            if i >= 1 {
                m.rel[i] = read_pose(&self.values, l.rel_offset(i));
            }
        }
        for j in 0..l.n_frames {
            m.world[j] = read_pose(&self.values, l.world_offset(j));
        }
        m
    }
}

fn write_intrinsics(values: &mut DVector<f64>, offset: usize, len: usize, intr: &Intrinsics) {
    match len {
        0 => {}
        4 => {
            values[offset] = intr.alpha;
            values[offset + 1] = intr.beta;
            values[offset + 2] = intr.u0;
            values[offset + 3] = intr.v0;
        }
        5 => {
            values[offset] = intr.alpha;
            values[offset + 1] = intr.beta;
            values[offset + 2] = intr.gamma;
            values[offset + 3] = intr.u0;
            values[offset + 4] = intr.v0;
        }
        _ => unreachable!(),
    }
}

fn read_intrinsics(values: &DVector<f64>, offset: usize, len: usize) -> Intrinsics {
    match len {
        4 => Intrinsics {
            alpha: values[offset],
            beta: values[offset + 1],
            gamma: 0.0,
            u0: values[offset + 2],
            v0: values[offset + 3],
        },
        5 => Intrinsics {
            alpha: values[offset],
            beta: values[offset + 1],
            gamma: values[offset + 2],
            u0: values[offset + 3],
            v0: values[offset + 4],
        },
        _ => unreachable!(),
    }
}

fn write_pose(values: &mut DVector<f64>, offset: usize, pose: &(Vector3<f64>, Vector3<f64>)) {
    for c in 0..3 {
        values[offset + c] = pose.0[c];
        values[offset + 3 + c] = pose.1[c];
    }
}

fn read_pose(values: &DVector<f64>, offset: usize) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(values[offset], values[offset + 1], values[offset + 2]),
        Vector3::new(values[offset + 3], values[offset + 4], values[offset + 5]),
    )
}
