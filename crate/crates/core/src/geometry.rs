//! Camera model primitives: intrinsics, lens distortion, rigid transforms and
//! the axis-angle rotation parameterization.
//!
//! The projection model is the usual pinhole-plus-distortion chain. A point
//! `M` in some reference frame is moved into the camera frame by a rigid
//! transform, perspective-divided, distorted in normalized coordinates and
//! finally mapped to pixels by the intrinsic matrix:
//!
//! ```text
//! P = R M + t,   (x, y) = (P.x / P.z, P.y / P.z)
//! (x', y') = distort(x, y)
//! u = alpha x' + gamma y' + u0,   v = beta y' + v0
//! ```
//!
//! Rotations cross module boundaries as matrices; the optimizer and the file
//! formats use the minimal [`AxisAngle`] form.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

/// Tolerance for the orthonormality checks on rotation inputs.
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("focal lengths must be positive, got alpha = {alpha}, beta = {beta}")]
    InvalidFocal { alpha: f64, beta: f64 },
    #[error("matrix is not a rotation: max |R^T R - I| = {deviation:.3e}, det = {det:.6}")]
    NotARotation { deviation: f64, det: f64 },
    #[error("point at depth {depth} is not in front of the camera")]
    BehindCamera { depth: f64 },
    #[error("undistortion did not converge within {iterations} iterations, residual {residual:.3e}")]
    UndistortDiverged { iterations: usize, residual: f64 },
}

/// Pinhole intrinsic parameters, pixel units.
///
/// `gamma` is the skew of the pixel grid; it is zero for all practical
/// sensors but kept as a parameter so calibration can confirm that.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub u0: f64,
    pub v0: f64,
}

impl Intrinsics {
    pub fn new(alpha: f64, beta: f64, gamma: f64, u0: f64, v0: f64) -> Result<Self, GeometryError> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(GeometryError::InvalidFocal { alpha, beta });
        }
        Ok(Self { alpha, beta, gamma, u0, v0 })
    }

    /// Upper-triangular intrinsic matrix `A`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.alpha, self.gamma, self.u0, //
            0.0, self.beta, self.v0, //
            0.0, 0.0, 1.0,
        )
    }

    /// Inverse of [`Intrinsics::matrix`], in closed form.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let (a, b, g, u0, v0) = (self.alpha, self.beta, self.gamma, self.u0, self.v0);
        Matrix3::new(
            1.0 / a,
            -g / (a * b),
            (g * v0 - b * u0) / (a * b),
            0.0,
            1.0 / b,
            -v0 / b,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel position of a (distorted) normalized image point.
    pub fn normalized_to_pixel(&self, n: Vector2<f64>) -> Point2 {
        Point2::new(
            self.alpha * n.x + self.gamma * n.y + self.u0,
            self.beta * n.y + self.v0,
        )
    }

    /// Normalized image coordinates of a pixel. Inverse of
    /// [`Intrinsics::normalized_to_pixel`].
    pub fn pixel_to_normalized(&self, p: Point2) -> Vector2<f64> {
        let y = (p.y - self.v0) / self.beta;
        let x = (p.x - self.u0 - self.gamma * y) / self.alpha;
        Vector2::new(x, y)
    }
}

/// Radial (`k1`, `k2`) and tangential (`p1`, `p2`) lens distortion acting on
/// normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }
}

/// Forward distortion on a normalized image point.
pub fn distort(d: &Distortion, n: Vector2<f64>) -> Vector2<f64> {
    let (x, y) = (n.x, n.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2;
    Vector2::new(
        x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x),
        y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y,
    )
}

const UNDISTORT_MAX_ITERS: usize = 50;
const UNDISTORT_TOL: f64 = 1e-12;

/// Inverts [`distort`] by fixed-point iteration.
///
/// Converges for the small coefficients seen in practice; for coefficients
/// strong enough that the iteration stalls, reports the residual rather than
/// returning a wrong point.
pub fn undistort(d: &Distortion, target: Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
    let mut n = target;
    for _ in 0..UNDISTORT_MAX_ITERS {
        let (x, y) = (n.x, n.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2;
        let tx = 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x);
        let ty = d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y;
        let next = Vector2::new((target.x - tx) / radial, (target.y - ty) / radial);
        let step = (next - n).amax();
        n = next;
        if step < UNDISTORT_TOL {
            return Ok(n);
        }
    }
    let residual = (distort(d, n) - target).norm();
    Err(GeometryError::UndistortDiverged { iterations: UNDISTORT_MAX_ITERS, residual })
}

/// Rotation followed by translation: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self` after `other`: `(self * other).apply(p) == self.apply(other.apply(p))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }
}

fn check_rotation(m: &Matrix3<f64>) -> Result<(), GeometryError> {
    let gram = m.transpose() * m - Matrix3::identity();
    let deviation = gram.amax();
    let det = m.determinant();
    if deviation > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(GeometryError::NotARotation { deviation, det });
    }
    Ok(())
}

/// Rotation as a vector along the axis with magnitude equal to the angle in
/// radians. The minimal three-parameter form used by the optimizer and the
/// calibration file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Rotation matrix via the Rodrigues formula.
    ///
    /// `R = I + a [r]x + b [r]x^2` with `a = sin(t)/t`, `b = (1-cos(t))/t^2`;
    /// both coefficients switch to series expansions near `t = 0` where the
    /// closed forms lose precision.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let r = self.0;
        let theta2 = r.norm_squared();
        let (a, b) = if theta2 < 1e-16 {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let theta = theta2.sqrt();
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        let k = skew(&r);
        Matrix3::identity() + k * a + k * k * b
    }

    /// Axis-angle vector of a rotation matrix, angle in `[0, pi]`.
    ///
    /// The generic branch recovers the axis from the antisymmetric part of
    /// `R`, which scales with `sin(t)`. Close to `pi` that signal drowns in
    /// rounding noise amplified by `t / sin(t)`, so there the axis is taken
    /// from the symmetric part instead: `(R + R^T - 2 cos(t) I)` equals
    /// `2 (1 - cos(t)) v v^T`, whose dominant column gives the axis with its
    /// sign fixed by the antisymmetric part.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, GeometryError> {
        check_rotation(m)?;
        let w = Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        ) * 0.5;
        let s = w.norm();
        let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = s.atan2(c);

        if c <= -0.5 && s < 1e-4 {
            // v v^T = (R + R^T - 2 c I) / (2 (1 - c)); largest diagonal as
            // pivot for a stable axis estimate.
            let sym = m + m.transpose() - Matrix3::identity() * (2.0 * c);
            let scale = 2.0 * (1.0 - c);
            let pivot = (0..3)
                .max_by(|&i, &j| sym[(i, i)].partial_cmp(&sym[(j, j)]).unwrap())
                .unwrap();
            let mut axis = Vector3::from_iterator((0..3).map(|i| sym[(i, pivot)] / scale));
            axis[pivot] = (sym[(pivot, pivot)] / scale).max(0.0).sqrt();
            for i in 0..3 {
                if i != pivot {
                    axis[i] /= axis[pivot].max(1e-300);
                }
            }
            let axis = axis.normalize();
            // The sign is meaningful while sin(t) is above the noise; at pi
            // itself both signs give the same rotation.
            let axis = if w.dot(&axis) < 0.0 { -axis } else { axis };
            return Ok(Self(axis * theta));
        }
        if s <= 1e-9 {
            // Angle near zero: w already equals r to second order.
            return Ok(Self(w));
        }
        Ok(Self(w * (theta / s)))
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Derivative of the rotated vector `R(r) p` with respect to the axis-angle
/// vector `r`, as a 3x3 matrix of columns `d(R p)/d r_i`.
///
/// Uses the closed form
/// `d(Rp)/dr_i = ((r_i [r]x + [r x ((I - R) e_i)]x) / |r|^2) R p`,
/// which breaks down as `|r| -> 0`; below `1e-6` radians a second-order
/// expansion in `r` takes over (its truncation error is below the cancellation
/// noise of the closed form there).
pub fn rotation_jacobian(aa: &AxisAngle, p: &Vector3<f64>) -> Matrix3<f64> {
    let r = aa.0;
    let theta2 = r.norm_squared();
    let mut j = Matrix3::zeros();
    if theta2 < 1e-12 {
        // R p ~ p + r x p + r x (r x p) / 2; differentiate in r.
        let rxp = r.cross(p);
        for i in 0..3 {
            let e = Vector3::ith(i, 1.0);
            let col = e.cross(p) + (e.cross(&rxp) + r.cross(&e.cross(p))) * 0.5;
            j.set_column(i, &col);
        }
        return j;
    }
    let rm = aa.to_matrix();
    let rp = rm * p;
    for i in 0..3 {
        let e = Vector3::ith(i, 1.0);
        let v = r.cross(&(e - rm.column(i).into_owned()));
        let col = (r[i] * skew(&r) + skew(&v)) * rp / theta2;
        j.set_column(i, &col);
    }
    j
}

/// Projects a point `m` through pose, distortion and intrinsics to pixels.
///
/// `pose` maps the point's frame into the camera frame. Points with
/// non-positive depth have no image and produce an error.
pub fn project(
    intr: &Intrinsics,
    dist: &Distortion,
    pose: &RigidTransform,
    m: Point3,
) -> Result<Point2, GeometryError> {
    let p = pose.rotation * m.coords + pose.translation;
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera { depth: p.z });
    }
    let n = Vector2::new(p.x / p.z, p.y / p.z);
    Ok(intr.normalized_to_pixel(distort(dist, n)))
}

/// World pose of viewpoint `i` from its pose relative to viewpoint 0:
/// `R_i^w = R_i R_0^w`, `t_i^w = R_i t_0^w + t_i`.
pub fn compose_world_pose(rel: &RigidTransform, world0: &RigidTransform) -> RigidTransform {
    rel.compose(world0)
}

/// Pose of viewpoint `i` relative to viewpoint 0 given both world poses.
/// Inverse of [`compose_world_pose`] in its first argument.
pub fn relative_from_world(world_i: &RigidTransform, world_0: &RigidTransform) -> RigidTransform {
    let rotation = world_i.rotation * world_0.rotation.transpose();
    let translation = world_i.translation - rotation * world_0.translation;
    RigidTransform { rotation, translation }
}
