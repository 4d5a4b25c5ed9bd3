//! Plane-to-image homography estimation.
//!
//! The direct linear transform is solved on coordinates normalized so that
//! each point set is centered at the origin with mean distance sqrt(2); this
//! keeps the design matrix well conditioned regardless of pixel magnitudes.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Point2;

#[derive(Debug, Error)]
pub enum HomographyError {
    #[error("need at least {needed} point pairs, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("model and image point counts differ: {model} vs {image}")]
    LengthMismatch { model: usize, image: usize },
    #[error("point configuration is degenerate (collinear or coincident)")]
    Degenerate,
    #[error("point maps to infinity: w = {w:.3e}")]
    AtInfinity { w: f64 },
}

/// 3x3 plane projective map, scaled so the bottom-right entry is 1 whenever
/// it is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Self {
        let w = m[(2, 2)];
        if w.abs() > 1e-12 {
            Self(m / w)
        } else {
            Self(m)
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Maps a point through the homography, with the perspective division.
pub fn apply_homography(h: &Homography, p: Point2) -> Result<Point2, HomographyError> {
    let q = h.0 * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() <= 1e-12 {
        return Err(HomographyError::AtInfinity { w: q.z });
    }
    Ok(Point2::new(q.x / q.z, q.y / q.z))
}

/// Similarity that moves `pts` to centroid zero, mean distance sqrt(2).
fn normalizing_transform(pts: &[Point2]) -> Result<Matrix3<f64>, HomographyError> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(HomographyError::Degenerate);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s, 0.0, -s * cx, //
        0.0, s, -s * cy, //
        0.0, 0.0, 1.0,
    ))
}

fn transform_point(t: &Matrix3<f64>, p: Point2) -> Point2 {
    Point2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// Stacks the two DLT rows per correspondence. Exposed within the crate so
/// tests can compare conditioning with and without normalization.
pub(crate) fn dlt_design_matrix(model: &[Point2], image: &[Point2]) -> DMatrix<f64> {
    // At least 9 rows so the thin SVD carries the full right-singular basis.
    let rows = (2 * model.len()).max(9);
    let mut a = DMatrix::zeros(rows, 9);
    for (i, (m, p)) in model.iter().zip(image).enumerate() {
        let (x, y) = (m.x, m.y);
        let (u, v) = (p.x, p.y);
        let top = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        let bottom = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v];
        for c in 0..9 {
            a[(2 * i, c)] = top[c];
            a[(2 * i + 1, c)] = bottom[c];
        }
    }
    a
}

/// Estimates the homography mapping `model` points to `image` points.
///
/// Needs four correspondences in general position; a collinear or repeated
/// configuration leaves the system rank deficient and is reported as
/// [`HomographyError::Degenerate`].
pub fn estimate_homography(model: &[Point2], image: &[Point2]) -> Result<Homography, HomographyError> {
    if model.len() != image.len() {
        return Err(HomographyError::LengthMismatch { model: model.len(), image: image.len() });
    }
    if model.len() < 4 {
        return Err(HomographyError::InsufficientPoints { needed: 4, got: model.len() });
    }

    let t_model = normalizing_transform(model)?;
    let t_image = normalizing_transform(image)?;
    let mn: Vec<Point2> = model.iter().map(|&p| transform_point(&t_model, p)).collect();
    let pn: Vec<Point2> = image.iter().map(|&p| transform_point(&t_image, p)).collect();

    let a = dlt_design_matrix(&mn, &pn);
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    // Nine columns: a sound configuration has rank 8, one null direction.
    if sv[7] < 1e-10 * sv[0] {
        return Err(HomographyError::Degenerate);
    }
    let vt = svd.v_t.as_ref().expect("SVD with v_t requested");
    let h = vt.row(8);
    let hn = Matrix3::new(
        h[0], h[1], h[2], //
        h[3], h[4], h[5], //
        h[6], h[7], h[8],
    );

    let t_image_inv = t_image.try_inverse().expect("similarity is invertible");
    Ok(Homography::new(t_image_inv * hn * t_model))
}
