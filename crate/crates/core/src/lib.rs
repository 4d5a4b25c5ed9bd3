//! Calibration and resampling for planar camera arrays.
//!
//! The library covers the full pipeline for turning checkerboard captures
//! from a grid of viewpoints into a metric light field:
//!
//! 1. closed-form per-viewpoint calibration from plane homographies
//!    ([`zhang`]),
//! 2. joint refinement of intrinsics, distortion, relative poses and board
//!    poses over all viewpoints at once ([`optim`]),
//! 3. resampling of the calibrated views: rectification to a common
//!    rotation-free grid and synthetic refocusing ([`lightfield`]).
//!
//! [`simulator`] generates synthetic scenes with known ground truth for
//! testing and noise studies, and [`dataio`] defines the on-disk observation
//! and calibration formats.
//!
//! Units are millimetres for lengths and pixels for image coordinates
//! throughout.

pub mod dataio;
pub mod geometry;
pub mod homography;
pub mod lightfield;
pub mod observations;
pub mod optim;
pub mod simulator;
pub mod zhang;

pub use geometry::{AxisAngle, Distortion, Intrinsics, Point2, Point3, RigidTransform};
pub use observations::{BoardSpec, ObservationSet};
pub use optim::{ArrayCalibration, CalibrationResult, OptimizeOptions, OptimizeReport};
