//! Relative coordinate maps: per-pixel 3D positions expressed in the frame of
//! a chosen main camera and normalized into `[-1, 1]`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{unproject, CameraIntrinsics, DepthMap, ImageRGBA, Pose};

/// Slack allowed on the `[-1, 1]` bound.
pub const RANGE_EPS: f64 = 1e-6;

/// Affine map `x -> (x - offset) / scale` from main-camera coordinates to
/// normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub offset: [f64; 3],
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn new(offset: Vector3<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || !offset.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "normalization needs finite offset and positive scale, got {scale}"
            )));
        }
        Ok(NormalizationTransform {
            offset: offset.into(),
            scale,
        })
    }

    pub fn identity() -> Self {
        NormalizationTransform {
            offset: [0.0; 3],
            scale: 1.0,
        }
    }

    /// Centres the look-at target (the world origin) and divides by 1.1x the
    /// rig radius, so anything inside the rig sphere lands in `[-1, 1]`.
    pub fn for_rig(pose_main: &Pose, rig_radius: f64) -> Result<Self> {
        Self::new(pose_main.transform_point(&Vector3::zeros()), rig_radius * 1.1)
    }

    pub fn offset(&self) -> Vector3<f64> {
        Vector3::from(self.offset)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        (x - self.offset()) / self.scale
    }

    pub fn invert(&self, x: &Vector3<f64>) -> Vector3<f64> {
        x * self.scale + self.offset()
    }
}

/// Per-pixel normalized main-frame coordinates with a foreground mask.
/// Background pixels hold `(0, 0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeCoordinateMap {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
    pub norm: NormalizationTransform,
}

impl RelativeCoordinateMap {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Foreground pixels in row-major order as `(row, col, normalized coord)`.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize, Vector3<f64>)> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .zip(&self.coords)
            .enumerate()
            .filter(|(_, (m, _))| **m)
            .map(move |(i, (_, c))| (i / w, i % w, *c))
    }

    /// Main-frame coordinates in scene units.
    pub fn denormalized(&self) -> Vec<Vector3<f64>> {
        self.coords
            .iter()
            .zip(&self.mask)
            .map(|(c, m)| if *m { self.norm.invert(c) } else { Vector3::zeros() })
            .collect()
    }

    /// Checks the range and sentinel invariants.
    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.len() || self.mask.len() != self.len() {
            return Err(Error::shape(
                format!("{} coords and mask entries", self.len()),
                format!("{} coords, {} mask", self.coords.len(), self.mask.len()),
            ));
        }
        for (i, (c, m)) in self.coords.iter().zip(&self.mask).enumerate() {
            if *m {
                for v in c.iter() {
                    if !(v.abs() <= 1.0 + RANGE_EPS) {
                        return Err(Error::OutOfRange {
                            row: i / self.width,
                            col: i % self.width,
                            value: *v,
                        });
                    }
                }
            } else if *c != Vector3::zeros() {
                return Err(Error::invalid(format!("background pixel {i} carries a coordinate")));
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        Ok(())
    }
}

fn build(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    norm: &NormalizationTransform,
    to_main: Option<&Pose>,
) -> Result<RelativeCoordinateMap> {
    depth.validate()?;
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::shape(
            format!("{}x{} depth map", k.width, k.height),
            format!("{}x{}", depth.width, depth.height),
        ));
    }
    if depth.foreground_count() == 0 {
        return Err(Error::EmptyView);
    }
    let mut coords = vec![Vector3::zeros(); depth.values.len()];
    for (i, c) in coords.iter_mut().enumerate() {
        if !depth.mask[i] {
            continue;
        }
        let px = CameraIntrinsics::pixel_center(i / depth.width, i % depth.width);
        let cam = unproject(px, depth.values[i], k)?;
        let main = match to_main {
            Some(p) => p.transform_point(&cam),
            None => cam,
        };
        *c = norm.apply(&main);
    }
    let rcm = RelativeCoordinateMap {
        width: depth.width,
        height: depth.height,
        coords,
        mask: depth.mask.clone(),
        norm: *norm,
    };
    rcm.validate()?;
    Ok(rcm)
}

/// RCM of the main view: unprojected depth in its own camera frame.
pub fn build_rcm_main(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    norm: &NormalizationTransform,
) -> Result<RelativeCoordinateMap> {
    build(depth, k, norm, None)
}

/// RCM of view `j`: unprojected depth carried into the main camera frame by
/// `pose_main ∘ pose_j⁻¹`. Reduces to [`build_rcm_main`] when the poses are
/// equal.
pub fn build_rcm(
    depth: &DepthMap,
    pose_j: &Pose,
    pose_main: &Pose,
    k: &CameraIntrinsics,
    norm: &NormalizationTransform,
) -> Result<RelativeCoordinateMap> {
    if pose_j == pose_main {
        return build(depth, k, norm, None);
    }
    let to_main = pose_main.compose(&pose_j.inverse());
    build(depth, k, norm, Some(&to_main))
}

/// Foreground points of several views with their colours, `xyzrgb` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPointCloud {
    pub points: Vec<[f64; 6]>,
}

impl FusedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect()
    }
}

/// Concatenates foreground pixels view-major, then row-major.
pub fn rcm_to_pointcloud(
    rcms: &[RelativeCoordinateMap],
    images: &[ImageRGBA],
) -> Result<FusedPointCloud> {
    if rcms.len() != images.len() {
        return Err(Error::shape(
            format!("{} images", rcms.len()),
            images.len(),
        ));
    }
    let mut points = Vec::with_capacity(rcms.iter().map(|r| r.foreground_count()).sum());
    for (rcm, img) in rcms.iter().zip(images) {
        if rcm.width != img.width || rcm.height != img.height {
            return Err(Error::shape(
                format!("{}x{} image", rcm.width, rcm.height),
                format!("{}x{}", img.width, img.height),
            ));
        }
        for (i, (c, m)) in rcm.coords.iter().zip(&rcm.mask).enumerate() {
            if *m {
                let rgb = img.rgb[i];
                points.push([
                    c.x,
                    c.y,
                    c.z,
                    rgb[0].clamp(0.0, 1.0),
                    rgb[1].clamp(0.0, 1.0),
                    rgb[2].clamp(0.0, 1.0),
                ]);
            }
        }
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite point in fused cloud".into()));
    }
    Ok(FusedPointCloud { points })
}

/// Mean squared coordinate error over the union of both masks. A pixel
/// present in only one map is compared against the `(0, 0, 0)` sentinel.
pub fn rcm_mse(pred: &RelativeCoordinateMap, gt: &RelativeCoordinateMap) -> Result<f64> {
    pred.same_shape(gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if !(pred.mask[i] || gt.mask[i]) {
            continue;
        }
        let a = if pred.mask[i] { pred.coords[i] } else { Vector3::zeros() };
        let b = if gt.mask[i] { gt.coords[i] } else { Vector3::zeros() };
        sum += (a - b).norm_squared();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / (3 * count) as f64 })
}

/// Uniformly random main-view index, reproducible from `seed`.
pub fn choose_main_view(num_views: usize, seed: u64) -> Result<usize> {
    if num_views == 0 {
        return Err(Error::invalid("cannot choose a main view out of zero views"));
    }
    Ok(ChaCha8Rng::seed_from_u64(seed).random_range(0..num_views))
}
