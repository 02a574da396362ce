//! Camera pose recovery from 3D-2D correspondences (DLT + Gauss-Newton inside
//! RANSAC) and the pose error metrics used for evaluation.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix6, Rotation3, SMatrix, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{nearest_rotation, skew, CameraIntrinsics, ImageRGBA, Pose};
use crate::rcm::RelativeCoordinateMap;
use crate::splat::GaussianSplatSet;

/// Minimum number of correspondences for the linear solver.
pub const MIN_CORRESPONDENCES: usize = 6;

/// Upper bound on the correspondences scored per RANSAC hypothesis.
pub const RANSAC_SUBSAMPLE: usize = 5000;
const HYPOTHESIS_REFINE_ITERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Main-frame point in scene units.
    pub point3: Vector3<f64>,
    /// Observed pixel coordinate.
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Indices into the correspondence list, ascending.
    pub inliers: Vec<usize>,
    /// Mean reprojection error over the inliers, in pixels.
    pub mean_reproj_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iters: usize,
    /// Reprojection error below which a correspondence is an inlier, pixels.
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iters: 512,
            inlier_threshold: 2.0,
            min_inlier_fraction: 0.1,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || !(self.inlier_threshold > 0.0)
            || !(self.min_inlier_fraction > 0.0 && self.min_inlier_fraction <= 1.0)
        {
            return Err(Error::invalid(format!("invalid RANSAC configuration {self:?}")));
        }
        Ok(())
    }
}

fn reprojection_residual(pose: &Pose, c: &Correspondence, k: &CameraIntrinsics) -> Option<Vector2<f64>> {
    let x = pose.transform_point(&c.point3);
    if !(x.z > 0.0) {
        return None;
    }
    Some(Vector2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy) - c.pixel)
}

/// Sum of squared reprojection errors; infinite when any point falls behind
/// the camera.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    let mut cost = 0.0;
    for c in corrs {
        match reprojection_residual(pose, c, k) {
            Some(r) => cost += r.norm_squared(),
            None => return f64::INFINITY,
        }
    }
    cost
}

/// Linear (DLT) pose from at least six correspondences with known
/// intrinsics. The 3x4 projection is solved in normalized image coordinates
/// with conditioned 3D points, then projected onto a rigid transform.
pub fn pnp_minimal(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Pose> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(Error::Degenerate(format!(
            "need at least {MIN_CORRESPONDENCES} correspondences, got {}",
            corrs.len()
        )));
    }
    let n = corrs.len();
    let centroid = corrs.iter().map(|c| c.point3).sum::<Vector3<f64>>() / n as f64;
    let spread = corrs.iter().map(|c| (c.point3 - centroid).norm()).sum::<f64>() / n as f64;
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Degenerate("all 3D points coincide".into()));
    }
    let s = spread / 3f64.sqrt();

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, c) in corrs.iter().enumerate() {
        let p = (c.point3 - centroid) / s;
        let x = (c.pixel.x - k.cx) / k.fx;
        let y = (c.pixel.y - k.cy) / k.fy;
        let hp = [p.x, p.y, p.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = -hp[j];
            a[(2 * i, 8 + j)] = x * hp[j];
            a[(2 * i + 1, 4 + j)] = -hp[j];
            a[(2 * i + 1, 8 + j)] = y * hp[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[order.len() - 2]];
    if !(second_smallest > 1e-8 * largest) {
        return Err(Error::Degenerate(
            "design matrix has a multi-dimensional null space (coplanar or collinear points?)".into(),
        ));
    }
    let v: Vec<f64> = v_t.row(order[order.len() - 1]).iter().copied().collect();
    let p = Matrix3x4::from_row_slice(&v);

    let m_cond = p.fixed_view::<3, 3>(0, 0).into_owned();
    let t_cond = p.column(3).into_owned();
    let mut m = m_cond / s;
    let mut t = t_cond - m_cond * centroid / s;
    if m.determinant() < 0.0 {
        m = -m;
        t = -t;
    }
    let r = nearest_rotation(&m);
    let scale = (r.transpose() * m).trace() / 3.0;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate("projection matrix has no positive scale".into()));
    }
    Ok(Pose {
        rotation: r,
        translation: t / scale,
    })
}

/// Gauss-Newton on the reprojection error with left-multiplied axis-angle
/// rotation updates and step halving.
pub fn refine_pose(
    init: &Pose,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    iters: usize,
) -> Result<Pose> {
    let mut pose = *init;
    for c in corrs {
        let z = pose.transform_point(&c.point3).z;
        if !(z > 0.0) {
            return Err(Error::BehindCamera { z });
        }
    }
    let mut cost = reprojection_cost(&pose, corrs, k);
    if !cost.is_finite() {
        return Err(Error::Numerical(format!("initial reprojection cost is {cost}")));
    }
    for _ in 0..iters {
        if cost == 0.0 {
            break;
        }
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corrs {
            let rq = pose.rotation * c.point3;
            let x = rq + pose.translation;
            let iz = 1.0 / x.z;
            let r = Vector2::new(k.fx * x.x * iz + k.cx, k.fy * x.y * iz + k.cy) - c.pixel;
            let dproj = SMatrix::<f64, 2, 3>::new(
                k.fx * iz,
                0.0,
                -k.fx * x.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * x.y * iz * iz,
            );
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -skew(&rq)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(delta) = jtj.cholesky().map(|ch| -ch.solve(&jtr)) else {
            break;
        };
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite Gauss-Newton step".into()));
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=10 {
            let d = delta * step;
            let rot = Rotation3::new(Vector3::new(d[0], d[1], d[2])).into_inner();
            let candidate = Pose {
                rotation: nearest_if_needed(rot * pose.rotation),
                translation: pose.translation + Vector3::new(d[3], d[4], d[5]),
            };
            let c = reprojection_cost(&candidate, corrs, k);
            if c.is_nan() {
                return Err(Error::Numerical("reprojection cost is NaN".into()));
            }
            if c < cost {
                accepted = Some((candidate, c, d.norm()));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((p, c, norm)) => {
                pose = p;
                cost = c;
                if norm < 1e-10 {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(pose)
}

fn nearest_if_needed(r: Matrix3<f64>) -> Matrix3<f64> {
    if crate::geom::orthonormality_residual(&r) > 1e-12 {
        nearest_rotation(&r)
    } else {
        r
    }
}

fn inliers_of(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics, threshold: f64) -> Vec<usize> {
    corrs
        .iter()
        .enumerate()
        .filter(|(_, c)| reprojection_residual(pose, c, k).is_some_and(|r| r.norm() < threshold))
        .map(|(i, _)| i)
        .collect()
}

fn hypothesis(
    sample_pool: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
    iteration: usize,
) -> Option<(usize, Pose)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iteration as u64);
    let picks = rand::seq::index::sample(&mut rng, sample_pool.len(), MIN_CORRESPONDENCES);
    let minimal: Vec<Correspondence> = picks.iter().map(|i| sample_pool[i]).collect();
    let linear = pnp_minimal(&minimal, k).ok()?;
    // the DLT has 11 degrees of freedom for 12 equations and soaks up pixel
    // noise; a rigid polish on the same six points keeps the hypothesis usable
    let pose = refine_pose(&linear, &minimal, k, HYPOTHESIS_REFINE_ITERS).unwrap_or(linear);
    let score = sample_pool
        .iter()
        .filter(|c| reprojection_residual(&pose, c, k).is_some_and(|r| r.norm() < cfg.inlier_threshold))
        .count();
    Some((score, pose))
}

/// RANSAC over six-point DLT hypotheses, followed by Gauss-Newton refinement
/// on the consensus set. Deterministic for a given seed: every hypothesis
/// draws from its own stream of the seeded generator.
pub fn solve_pnp_ransac_correspondences(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::NoConsensus { inliers: 0, total: n });
    }
    let stride = n.div_ceil(RANSAC_SUBSAMPLE);
    let pool: Vec<Correspondence> = corrs.iter().step_by(stride).copied().collect();

    let best = (0..cfg.max_iters)
        .into_par_iter()
        .filter_map(|i| hypothesis(&pool, k, cfg, i).map(|(score, pose)| (score, i, pose)))
        .reduce_with(|a, b| {
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                b
            } else {
                a
            }
        });
    let Some((_, _, mut pose)) = best else {
        return Err(Error::NoConsensus { inliers: 0, total: n });
    };

    let needed = ((cfg.min_inlier_fraction * n as f64).ceil() as usize).max(MIN_CORRESPONDENCES);
    let mut inliers = inliers_of(&pose, corrs, k, cfg.inlier_threshold);
    if inliers.len() < needed {
        return Err(Error::NoConsensus {
            inliers: inliers.len(),
            total: n,
        });
    }
    for _ in 0..2 {
        let consensus: Vec<Correspondence> = inliers.iter().map(|&i| corrs[i]).collect();
        if let Ok(linear) = pnp_minimal(&consensus, k) {
            if reprojection_cost(&linear, &consensus, k) < reprojection_cost(&pose, &consensus, k) {
                pose = linear;
            }
        }
        pose = refine_pose(&pose, &consensus, k, 20)?;
        inliers = inliers_of(&pose, corrs, k, cfg.inlier_threshold);
        if inliers.len() < needed {
            return Err(Error::NoConsensus {
                inliers: inliers.len(),
                total: n,
            });
        }
    }
    let consensus: Vec<Correspondence> = inliers.iter().map(|&i| corrs[i]).collect();
    pose = refine_pose(&pose, &consensus, k, 20)?;
    let mean_reproj_error = consensus
        .iter()
        .map(|c| reprojection_residual(&pose, c, k).map_or(f64::INFINITY, |r| r.norm()))
        .sum::<f64>()
        / consensus.len() as f64;
    if !mean_reproj_error.is_finite() {
        return Err(Error::Numerical("refined pose pushes inliers behind the camera".into()));
    }
    Ok(PoseEstimate {
        pose,
        inliers,
        mean_reproj_error,
    })
}

/// Foreground pixels of an RCM paired with their denormalized coordinates.
pub fn rcm_correspondences(rcm: &RelativeCoordinateMap) -> Vec<Correspondence> {
    rcm.foreground()
        .map(|(row, col, c)| Correspondence {
            point3: rcm.norm.invert(&c),
            pixel: CameraIntrinsics::pixel_center(row, col),
        })
        .collect()
}

/// Pose of the RCM's own camera relative to the main camera. Background
/// pixels are excluded through the RCM mask before sampling.
pub fn solve_pnp_ransac(
    rcm: &RelativeCoordinateMap,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    if rcm.width != k.width || rcm.height != k.height {
        return Err(Error::shape(
            format!("{}x{} RCM", k.width, k.height),
            format!("{}x{}", rcm.width, rcm.height),
        ));
    }
    solve_pnp_ransac_correspondences(&rcm_correspondences(rcm), k, cfg)
}

/// Same as [`solve_pnp_ransac`] with splat centers in place of RCM
/// coordinates. The set must be pixel-aligned and cover a single view.
pub fn solve_pose_from_centers(
    splats: &GaussianSplatSet,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    let provenance = splats
        .provenance
        .as_ref()
        .ok_or_else(|| Error::invalid("splat set is not pixel-aligned"))?;
    if let Some(first) = provenance.first() {
        if provenance.iter().any(|p| p.view != first.view) {
            return Err(Error::invalid("splat set spans more than one view"));
        }
    }
    let mut corrs: Vec<(usize, Correspondence)> = splats
        .splats
        .iter()
        .zip(provenance)
        .map(|(s, p)| {
            (
                p.row * k.width + p.col,
                Correspondence {
                    point3: splats.norm.invert(&s.center),
                    pixel: CameraIntrinsics::pixel_center(p.row, p.col),
                },
            )
        })
        .collect();
    corrs.sort_by_key(|(i, _)| *i);
    let corrs: Vec<Correspondence> = corrs.into_iter().map(|(_, c)| c).collect();
    solve_pnp_ransac_correspondences(&corrs, k, cfg)
}

/// Mask of pixels that are not near-white (any channel ≤ 0.99), for imported
/// data without an exact foreground mask.
pub fn non_white_mask(image: &ImageRGBA) -> Vec<bool> {
    image
        .rgb
        .iter()
        .map(|px| !px.iter().all(|v| *v > 0.99))
        .collect()
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    let r = a.rotation.transpose() * b.rotation;
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

/// Euclidean distance between translations, in scene units.
pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Fraction of errors strictly below `threshold_deg`.
pub fn accuracy_at_threshold(errors_deg: &[f64], threshold_deg: f64) -> Result<f64> {
    if errors_deg.is_empty() {
        return Err(Error::invalid("accuracy of an empty error list"));
    }
    Ok(errors_deg.iter().filter(|e| **e < threshold_deg).count() as f64 / errors_deg.len() as f64)
}
