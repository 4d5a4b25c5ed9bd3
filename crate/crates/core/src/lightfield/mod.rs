//! Calibrated multi-view images as a two-plane light field, with
//! rectification and synthetic refocusing.
//!
//! The two-plane parameterization places the camera plane at the viewpoints
//! and indexes each ray by where it crosses that plane, `(s, t)`, and by its
//! direction `(u, v)` expressed in the viewpoint 0 frame. With the rig
//! calibrated, every pixel of every view maps to such a ray, which is what
//! makes the synthetic-aperture operations geometric rather than heuristic.

mod image;

pub use image::{decode_pnm, encode_pnm, read_pnm, write_pnm, Image};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{distort, undistort, Distortion, GeometryError, Intrinsics, Point2, RigidTransform};
use crate::optim::ArrayCalibration;

#[derive(Debug, Error)]
pub enum LightFieldError {
    #[error("image dimensions {width}x{height}x{channels} do not match {len} samples")]
    DimensionMismatch { width: usize, height: usize, channels: usize, len: usize },
    #[error("{channels}-channel images have no PGM/PPM form (1 or 3 supported)")]
    ChannelCount { channels: usize },
    #[error("not a usable PGM/PPM stream: {detail}")]
    Format { detail: String },
    #[error("only 8-bit images are supported, maxval is {got}")]
    Maxval { got: u32 },
    #[error("pixel payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("light field needs at least one view")]
    NoViews,
    #[error("view {index} is {got_w}x{got_h}x{got_c}, expected {want_w}x{want_h}x{want_c}")]
    ViewShape {
        index: usize,
        got_w: usize,
        got_h: usize,
        got_c: usize,
        want_w: usize,
        want_h: usize,
        want_c: usize,
    },
    #[error("{images} images supplied for {views} calibrated viewpoints")]
    CountMismatch { views: usize, images: usize },
    #[error("view 0 must carry the identity pose; it defines the ray frame")]
    UnanchoredReference,
    #[error("ray is parallel to the camera plane")]
    RayParallel,
    #[error("synthetic focus depth must be positive, got {depth}")]
    BadDepth { depth: f64 },
    #[error("image {width}x{height} is too small for a gradient measure")]
    TooSmall { width: usize, height: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One calibrated view: its image and the parameters mapping pixels to rays.
#[derive(Debug, Clone)]
pub struct LightFieldView {
    pub image: Image,
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
    /// Maps viewpoint 0 coordinates into this camera's frame.
    pub rel_pose: RigidTransform,
}

/// A set of calibrated views sharing one ray frame (viewpoint 0's).
#[derive(Debug, Clone)]
pub struct LightField {
    views: Vec<LightFieldView>,
    /// Camera-plane crossing of each view's central ray; equals the lateral
    /// part of the view's translation.
    st: Vec<(f64, f64)>,
}

impl LightField {
    /// Validates that all views share dimensions and that view 0 carries the
    /// identity pose, which anchors the `(u, v)` and `(s, t)` frames.
    pub fn new(views: Vec<LightFieldView>) -> Result<Self, LightFieldError> {
        let first = views.first().ok_or(LightFieldError::NoViews)?;
        let (w, h, c) = (first.image.width(), first.image.height(), first.image.channels());
        for (index, v) in views.iter().enumerate() {
            if v.image.width() != w || v.image.height() != h || v.image.channels() != c {
                return Err(LightFieldError::ViewShape {
                    index,
                    got_w: v.image.width(),
                    got_h: v.image.height(),
                    got_c: v.image.channels(),
                    want_w: w,
                    want_h: h,
                    want_c: c,
                });
            }
        }
        let id = RigidTransform::identity();
        let v0 = &views[0].rel_pose;
        if (v0.rotation - id.rotation).amax() > 1e-9 || (v0.translation - id.translation).amax() > 1e-9
        {
            return Err(LightFieldError::UnanchoredReference);
        }
        let st = views.iter().map(|v| slant_to_st(&v.rel_pose, (0.0, 0.0))).collect();
        Ok(Self { views, st })
    }

    /// Pairs a calibration with captured images, in viewpoint order.
    pub fn from_calibration(
        calib: &ArrayCalibration,
        images: Vec<Image>,
    ) -> Result<Self, LightFieldError> {
        if images.len() != calib.n_viewpoints() {
            return Err(LightFieldError::CountMismatch {
                views: calib.n_viewpoints(),
                images: images.len(),
            });
        }
        let views = calib
            .viewpoints
            .iter()
            .zip(images)
            .map(|(vp, image)| LightFieldView {
                image,
                intrinsics: vp.intrinsics,
                distortion: vp.distortion,
                rel_pose: vp.rel_pose,
            })
            .collect();
        Self::new(views)
    }

    pub fn views(&self) -> &[LightFieldView] {
        &self.views
    }

    /// Camera-plane coordinates of each view.
    pub fn st_coordinates(&self) -> &[(f64, f64)] {
        &self.st
    }
}

/// Ray direction of a pixel, as slant coordinates `(u, v)` in the viewpoint 0
/// frame: the pixel's sight ray is `(u, v, 1)` up to scale.
///
/// Undistorts the pixel, so inherits the divergence error for extreme
/// distortion coefficients; a ray turned parallel to the camera plane (only
/// possible for rotations near 90 degrees) has no slant form.
pub fn pixel_to_slant(
    intr: &Intrinsics,
    dist: &Distortion,
    rel_pose: &RigidTransform,
    p: Point2,
) -> Result<(f64, f64), LightFieldError> {
    let n = undistort(dist, intr.pixel_to_normalized(p))?;
    let d = rel_pose.rotation.transpose() * Vector3::new(n.x, n.y, 1.0);
    if d.z <= 1e-12 {
        return Err(LightFieldError::RayParallel);
    }
    Ok((d.x / d.z, d.y / d.z))
}

/// Camera-plane crossing `(s, t)` of the ray with slant `(u, v)` seen from
/// the view with the given relative pose: `(s, t) = t_z (u, v) + (t_x, t_y)`.
pub fn slant_to_st(rel_pose: &RigidTransform, uv: (f64, f64)) -> (f64, f64) {
    let t = rel_pose.translation;
    (t.z * uv.0 + t.x, t.z * uv.1 + t.y)
}

/// Resamples every view onto a common rotation-free, distortion-free grid
/// with the given intrinsics.
///
/// Each output view keeps its translation but drops its rotation and
/// distortion, so matching scene points differ between rectified views by a
/// pure depth-dependent disparity. Pixels that map outside the source image
/// are zero.
pub fn rectify(lf: &LightField, target: &Intrinsics) -> Result<LightField, LightFieldError> {
    let mut out_views = Vec::with_capacity(lf.views.len());
    for view in &lf.views {
        let (w, h, c) = (view.image.width(), view.image.height(), view.image.channels());
        let mut out = Image::zeros(w, h, c);
        for py in 0..h {
            for px in 0..w {
                // Ray of the output pixel in the viewpoint 0 frame, rotated
                // into the source camera, then through its lens.
                let n = target.pixel_to_normalized(Point2::new(px as f64, py as f64));
                let d = view.rel_pose.rotation * Vector3::new(n.x, n.y, 1.0);
                if d.z <= 1e-12 {
                    continue;
                }
                let nd = distort(&view.distortion, nalgebra::Vector2::new(d.x / d.z, d.y / d.z));
                let src = view.intrinsics.normalized_to_pixel(nd);
                for ch in 0..c {
                    if let Some(v) = view.image.sample_bilinear(src.x, src.y, ch) {
                        out.set(px, py, ch, v);
                    }
                }
            }
        }
        out_views.push(LightFieldView {
            image: out,
            intrinsics: *target,
            distortion: Distortion::zero(),
            rel_pose: RigidTransform {
                rotation: nalgebra::Matrix3::identity(),
                translation: view.rel_pose.translation,
            },
        });
    }
    LightField::new(out_views)
}

/// Synthetic-aperture refocus at a frontoparallel plane at `depth`.
///
/// The output uses viewpoint 0's pixel grid. Each output pixel is traced to
/// its point on the focal plane, that point is projected into every view,
/// and the in-bounds samples are averaged. Scene content on the plane adds
/// coherently; content off the plane is blurred by the parallax spread.
pub fn refocus(lf: &LightField, depth: f64) -> Result<Image, LightFieldError> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(LightFieldError::BadDepth { depth });
    }
    let reference = &lf.views[0];
    let (w, h, c) = (reference.image.width(), reference.image.height(), reference.image.channels());
    let mut out = Image::zeros(w, h, c);
    let mut acc = vec![0.0f64; c];
    for py in 0..h {
        for px in 0..w {
            let n = undistort(
                &reference.distortion,
                reference.intrinsics.pixel_to_normalized(Point2::new(px as f64, py as f64)),
            )?;
            let plane_point = Vector3::new(n.x * depth, n.y * depth, depth);

            acc.fill(0.0);
            let mut covering = 0usize;
            for view in &lf.views {
                let p = view.rel_pose.rotation * plane_point + view.rel_pose.translation;
                if p.z <= 0.0 {
                    continue;
                }
                let nd = distort(&view.distortion, nalgebra::Vector2::new(p.x / p.z, p.y / p.z));
                let src = view.intrinsics.normalized_to_pixel(nd);
                match view.image.sample_bilinear(src.x, src.y, 0) {
                    None => continue,
                    Some(first) => {
                        acc[0] += first;
                        for (ch, a) in acc.iter_mut().enumerate().skip(1) {
                            *a += view.image.sample_bilinear(src.x, src.y, ch).unwrap();
                        }
                        covering += 1;
                    }
                }
            }
            if covering > 0 {
                for (ch, a) in acc.iter().enumerate() {
                    out.set(px, py, ch, a / covering as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Mean squared central-difference gradient magnitude over interior pixels,
/// averaged across channels. Focused content scores higher than blurred.
pub fn sharpness(img: &Image) -> Result<f64, LightFieldError> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    if w < 3 || h < 3 {
        return Err(LightFieldError::TooSmall { width: w, height: h });
    }
    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let gx = 0.5 * (img.get(x + 1, y, ch) - img.get(x - 1, y, ch));
                let gy = 0.5 * (img.get(x, y + 1, ch) - img.get(x, y - 1, ch));
                total += gx * gx + gy * gy;
            }
        }
    }
    Ok(total / (((w - 2) * (h - 2) * c) as f64))
}
