//! Pinhole cameras, rigid poses, and the image/depth containers shared by the
//! rest of the crate.
//!
//! Conventions used everywhere:
//!
//! * column vectors, right-handed frames, camera looks down `+z`, image `x`
//!   points right and `y` points down;
//! * a [`Pose`] maps world points into the camera frame,
//!   `x_cam = R * x_world + t`;
//! * pixel `(row, col)` has its center at the continuous coordinate
//!   `(u, v) = (col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance of the rotation invariants checked by [`Pose::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Orthonormality residual above which composed rotations are projected back
/// onto SO(3).
const REORTHONORMALIZE_ABOVE: f64 = 1e-7;

/// Pinhole intrinsics in scalar form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be at least 1x1"));
        }
        let in_range = |c: f64, n: usize| c.is_finite() && c >= 0.0 && c < n as f64;
        if !in_range(self.cx, self.width) || !in_range(self.cy, self.height) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside a {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// The 4x4 homogeneous intrinsic matrix.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        Matrix4::new(
            self.fx, 0.0, self.cx, 0.0, //
            0.0, self.fy, self.cy, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous coordinate of the center of pixel `(row, col)`.
    pub fn pixel_center(row: usize, col: usize) -> Vector2<f64> {
        Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width as f64 && px.y <= self.height as f64
    }
}

/// Square-pixel intrinsics for a horizontal field of view, principal point at
/// the image center.
pub fn intrinsics_from_fov(fov_deg: f64, width: usize, height: usize) -> Result<CameraIntrinsics> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::invalid(format!(
            "field of view must lie in (0, 180) degrees, got {fov_deg}"
        )));
    }
    let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
}

/// Back-projects pixel `px` at z-depth `depth` into the camera frame.
pub fn unproject(px: Vector2<f64>, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::invalid(format!("depth must be positive, got {depth}")));
    }
    if !k.contains(&px) {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) outside the {}x{} image",
            px.x, px.y, k.width, k.height
        )));
    }
    Ok(Vector3::new(
        (px.x - k.cx) / k.fx * depth,
        (px.y - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Projects a camera-frame point to pixel coordinates, returning the pixel and
/// its z-depth.
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<(Vector2<f64>, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok((
        Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy),
        p.z,
    ))
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    /// Builds a pose, rejecting rotations that violate orthonormality or
    /// handedness by more than [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        let residual = orthonormality_residual(&rotation);
        let det = rotation.determinant();
        if !(residual <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(Error::invalid(format!(
                "rotation is not in SO(3): orthonormality residual {residual:e}, det {det}"
            )));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose from a rotation vector (axis times angle in radians) and a
    /// translation.
    pub fn from_axis_angle(rotvec: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Rotation3::new(rotvec).into_inner(),
            translation,
        }
    }

    /// Projects an arbitrary 3x3 matrix onto the nearest rotation.
    pub fn from_nearest_rotation(m: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: nearest_rotation(&m),
            translation,
        }
    }

    /// Camera looking from `eye` at `target`; `up` fixes the roll so that
    /// image `y` points along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        let fnorm = forward.norm();
        if !(fnorm > 0.0) {
            return Err(Error::invalid("eye and target coincide"));
        }
        let z = forward / fnorm;
        let right = z.cross(&up);
        let rnorm = right.norm();
        if rnorm < 1e-12 {
            return Err(Error::invalid("viewing direction is parallel to up"));
        }
        let x = right / rnorm;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Pose {
            rotation,
            translation: -(rotation * eye),
        })
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
        .renormalized()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    /// Parses a row-major homogeneous matrix. The rotation block is projected
    /// onto SO(3) when it is within 1e-6 of a rotation (text round-trips lose
    /// a few ulps); anything further away is rejected.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Pose> {
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "last row of a rigid transform must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        if orthonormality_residual(&rotation) > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6
        {
            return Err(Error::invalid("rotation block is not a rotation"));
        }
        let pose = Pose {
            rotation,
            translation,
        };
        Ok(pose.renormalized())
    }

    fn renormalized(self) -> Pose {
        if orthonormality_residual(&self.rotation) > REORTHONORMALIZE_ABOVE {
            Pose {
                rotation: nearest_rotation(&self.rotation),
                translation: self.translation,
            }
        } else {
            self
        }
    }
}

/// Largest absolute entry of `R Rᵀ - I`.
pub fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).abs().max()
}

/// Nearest rotation in the Frobenius sense (polar decomposition via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd computed u");
    let v_t = svd.v_t.expect("svd computed v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Metric z-depth per pixel with a foreground mask; background entries hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            values: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.values.len() != n || self.mask.len() != n {
            return Err(Error::shape(
                format!("{n} depth and mask entries"),
                format!("{} depths, {} mask entries", self.values.len(), self.mask.len()),
            ));
        }
        for (i, (&d, &m)) in self.values.iter().zip(&self.mask).enumerate() {
            if m && !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid(format!("foreground depth {d} at index {i}")));
            }
            if !m && d != 0.0 {
                return Err(Error::invalid(format!(
                    "background depth must be 0, got {d} at index {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Linear RGB plus coverage alpha, every channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGBA {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

impl ImageRGBA {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3], alpha: f64) -> Self {
        ImageRGBA {
            width,
            height,
            rgb: vec![rgb; width * height],
            alpha: vec![alpha; width * height],
        }
    }

    /// All-white, zero-coverage image.
    pub fn background(width: usize, height: usize) -> Self {
        Self::filled(width, height, [1.0; 3], 0.0)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rgb.len() != n || self.alpha.len() != n {
            return Err(Error::shape(
                format!("{n} pixels"),
                format!("{} rgb, {} alpha", self.rgb.len(), self.alpha.len()),
            ));
        }
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !self.rgb.iter().flatten().copied().all(ok) || !self.alpha.iter().copied().all(ok) {
            return Err(Error::invalid("image channels must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ImageRGBA) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        Ok(())
    }
}

/// On-disk camera record: intrinsics plus a row-major world-to-camera matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_cam: [f64; 16],
}

impl CameraRecord {
    pub fn new(pose: &Pose, k: &CameraIntrinsics) -> Self {
        CameraRecord {
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            world_to_cam: pose.to_row_major(),
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::from_row_major(&self.world_to_cam)
    }
}
