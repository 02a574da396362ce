//! Image and geometry quality metrics: PSNR, SSIM, Chamfer distance, pose
//! error aggregation.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{ImageRGBA, Pose};
use crate::pose::{accuracy_at_threshold, rotation_error_deg, translation_error};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean squared error over the RGB channels.
pub fn mse(a: &ImageRGBA, b: &ImageRGBA) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.len()) as f64)
}

/// `10 log10(1 / MSE)` over RGB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageRGBA, b: &ImageRGBA) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Truncated 1D Gaussian window, renormalized per output position so the
/// border pixels use only in-bounds taps.
struct Window {
    taps: Vec<(usize, Vec<f64>)>,
}

impl Window {
    fn new(n: usize) -> Self {
        let half = (SSIM_WINDOW / 2) as isize;
        let kernel: Vec<f64> = (-half..=half)
            .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        let taps = (0..n as isize)
            .map(|p| {
                let lo = (p - half).max(0);
                let hi = (p + half).min(n as isize - 1);
                let w: Vec<f64> = (lo..=hi).map(|q| kernel[(q - p + half) as usize]).collect();
                let total: f64 = w.iter().sum();
                (lo as usize, w.into_iter().map(|v| v / total).collect())
            })
            .collect();
        Window { taps }
    }
}

/// Separable windowed mean of a `w x h` plane, and its adjoint.
struct Filter {
    rows: Window,
    cols: Window,
    w: usize,
    h: usize,
}

impl Filter {
    fn new(w: usize, h: usize) -> Self {
        Filter {
            rows: Window::new(h),
            cols: Window::new(w),
            w,
            h,
        }
    }

    fn apply(&self, plane: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for r in 0..h {
            for (c, (start, wts)) in self.cols.taps.iter().enumerate() {
                tmp[r * w + c] = wts.iter().enumerate().map(|(j, v)| v * plane[r * w + start + j]).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for (r, (start, wts)) in self.rows.taps.iter().enumerate() {
            for c in 0..w {
                out[r * w + c] = wts.iter().enumerate().map(|(j, v)| v * tmp[(start + j) * w + c]).sum();
            }
        }
        out
    }

    fn adjoint(&self, plane: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for (r, (start, wts)) in self.rows.taps.iter().enumerate() {
            for c in 0..w {
                let v = plane[r * w + c];
                for (j, wt) in wts.iter().enumerate() {
                    tmp[(start + j) * w + c] += wt * v;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for r in 0..h {
            for (c, (start, wts)) in self.cols.taps.iter().enumerate() {
                let v = tmp[r * w + c];
                for (j, wt) in wts.iter().enumerate() {
                    out[r * w + start + j] += wt * v;
                }
            }
        }
        out
    }
}

fn channel(img: &ImageRGBA, c: usize) -> Vec<f64> {
    img.rgb.iter().map(|p| p[c]).collect()
}

fn ssim_impl(a: &ImageRGBA, b: &ImageRGBA, want_grad: bool) -> Result<(f64, Option<Vec<[f64; 3]>>)> {
    a.same_shape(b)?;
    if a.is_empty() {
        return Err(Error::invalid("SSIM of an empty image"));
    }
    let n = a.len();
    let filter = Filter::new(a.width, a.height);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; n]);
    let norm = 1.0 / (3 * n) as f64;
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter.apply(&x);
        let my = filter.apply(&y);
        let exx = filter.apply(&sq(&x, &x));
        let eyy = filter.apply(&sq(&y, &y));
        let exy = filter.apply(&sq(&x, &y));
        let mut d_mu = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for p in 0..n {
            let a1 = 2.0 * mx[p] * my[p] + SSIM_C1;
            let a2 = 2.0 * (exy[p] - mx[p] * my[p]) + SSIM_C2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + SSIM_C1;
            let b2 = (exx[p] - mx[p] * mx[p]) + (eyy[p] - my[p] * my[p]) + SSIM_C2;
            let den = b1 * b2;
            let s = a1 * a2 / den;
            total += s;
            if want_grad {
                d_mu[p] = (2.0 * my[p] * a2 - 2.0 * my[p] * a1) / den
                    - s * (2.0 * mx[p] / b1 - 2.0 * mx[p] / b2);
                d_exx[p] = -s / b2;
                d_exy[p] = 2.0 * a1 / den;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = filter.adjoint(&d_mu);
            let g_exx = filter.adjoint(&d_exx);
            let g_exy = filter.adjoint(&d_exy);
            for p in 0..n {
                g[p][c] = norm * (g_mu[p] + 2.0 * x[p] * g_exx[p] + y[p] * g_exy[p]);
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM over pixels and RGB channels: 11x11 Gaussian window (σ = 1.5),
/// border windows truncated and renormalized, `C1 = 0.01²`, `C2 = 0.03²`.
pub fn ssim(a: &ImageRGBA, b: &ImageRGBA) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to the RGB of `a`.
pub fn ssim_with_grad(a: &ImageRGBA, b: &ImageRGBA) -> Result<(f64, Vec<[f64; 3]>)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn sqdist(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

/// Static 3D k-d tree for exact nearest-neighbour distances.
pub struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::build(points, &mut order, 0);
        KdTree { points, order }
    }

    fn build(points: &[Vector3<f64>], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let (left, right) = idx.split_at_mut(mid);
        Self::build(points, left, depth + 1);
        Self::build(points, &mut right[1..], depth + 1);
    }

    /// Squared distance to the nearest stored point (infinite when empty).
    pub fn nearest_sq(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.order, 0, q, &mut best);
        best
    }

    fn search(&self, idx: &[usize], depth: usize, q: &Vector3<f64>, best: &mut f64) {
        if idx.is_empty() {
            return;
        }
        let mid = idx.len() / 2;
        let p = &self.points[idx[mid]];
        let d = sqdist(p, q);
        if d < *best {
            *best = d;
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (&idx[..mid], &idx[mid + 1..])
        } else {
            (&idx[mid + 1..], &idx[..mid])
        };
        self.search(near, depth + 1, q, best);
        if diff * diff <= *best {
            self.search(far, depth + 1, q, best);
        }
    }
}

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance from
/// `a` to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Chamfer distance needs two non-empty point sets"));
    }
    let one_way = |from: &[Vector3<f64>], to: &[Vector3<f64>]| {
        let tree = KdTree::new(to);
        from.iter().map(|p| tree.nearest_sq(p)).sum::<f64>() / from.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// Lower median (the smaller middle element for even counts).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Some(v[(v.len() - 1) / 2])
}

/// How pose errors are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseEvalMode {
    /// Relative pose of every view pair `(i, j)`, `i < j`.
    #[default]
    Pairwise,
    /// Each view against the main view (the main view scores zero).
    Anchored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub median_rotation_error_deg: f64,
    pub acc_at_15: f64,
    pub acc_at_30: f64,
    pub median_translation_error: f64,
    pub rotation_errors_deg: Vec<f64>,
    pub translation_errors: Vec<f64>,
}

/// Compares predicted and ground-truth poses after expressing both relative
/// to the main view.
pub fn pose_metrics(pred: &[Pose], gt: &[Pose], main_view: usize, mode: PoseEvalMode) -> Result<PoseMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} poses", gt.len()), pred.len()));
    }
    if main_view >= pred.len() {
        return Err(Error::invalid(format!("main view {main_view} out of {} views", pred.len())));
    }
    let gauge = |poses: &[Pose]| -> Vec<Pose> {
        let anchor = poses[main_view].inverse();
        poses.iter().map(|p| p.compose(&anchor)).collect()
    };
    let (pred, gt) = (gauge(pred), gauge(gt));
    let mut rot = Vec::new();
    let mut trans = Vec::new();
    match mode {
        PoseEvalMode::Pairwise => {
            for i in 0..pred.len() {
                for j in i + 1..pred.len() {
                    let rp = pred[j].compose(&pred[i].inverse());
                    let rg = gt[j].compose(&gt[i].inverse());
                    rot.push(rotation_error_deg(&rp, &rg));
                    trans.push(translation_error(&rp, &rg));
                }
            }
        }
        PoseEvalMode::Anchored => {
            for (p, g) in pred.iter().zip(&gt) {
                rot.push(rotation_error_deg(p, g));
                trans.push(translation_error(p, g));
            }
        }
    }
    if rot.is_empty() {
        return Err(Error::invalid("pairwise pose metrics need at least two views"));
    }
    pose_metrics_from_errors(rot, trans)
}

pub fn pose_metrics_from_errors(rotation_errors_deg: Vec<f64>, translation_errors: Vec<f64>) -> Result<PoseMetrics> {
    Ok(PoseMetrics {
        median_rotation_error_deg: lower_median(&rotation_errors_deg)
            .ok_or_else(|| Error::invalid("no rotation errors"))?,
        acc_at_15: accuracy_at_threshold(&rotation_errors_deg, 15.0)?,
        acc_at_30: accuracy_at_threshold(&rotation_errors_deg, 30.0)?,
        median_translation_error: lower_median(&translation_errors)
            .ok_or_else(|| Error::invalid("no translation errors"))?,
        rotation_errors_deg,
        translation_errors,
    })
}

/// Perceptual image distance (for example a learned metric); lower is better.
pub trait PerceptualMetric: Sync {
    fn distance(&self, pred: &ImageRGBA, gt: &ImageRGBA) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScores {
    pub psnr: f64,
    pub ssim: f64,
    /// Absent unless a perceptual metric was supplied.
    pub perceptual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewScores>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_perceptual: Option<f64>,
    pub pose: Option<PoseMetrics>,
    pub chamfer: Option<f64>,
}

#[derive(Default)]
pub struct EvalOptions<'a> {
    pub main_view: usize,
    pub pose_mode: PoseEvalMode,
    pub perceptual: Option<&'a dyn PerceptualMetric>,
}

/// Aggregates image metrics (means), pose metrics (medians) and Chamfer
/// distance. Empty pose lists or clouds leave the corresponding block out.
pub fn evaluate_run(
    pred_views: &[ImageRGBA],
    gt_views: &[ImageRGBA],
    pred_poses: &[Pose],
    gt_poses: &[Pose],
    pred_cloud: &[Vector3<f64>],
    gt_surface: &[Vector3<f64>],
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    if pred_views.len() != gt_views.len() {
        return Err(Error::shape(format!("{} views", gt_views.len()), pred_views.len()));
    }
    let views = pred_views
        .iter()
        .zip(gt_views)
        .map(|(p, g)| {
            Ok(ViewScores {
                psnr: psnr(p, g)?,
                ssim: ssim(p, g)?,
                perceptual: opts.perceptual.map(|m| m.distance(p, g)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: &dyn Fn(&ViewScores) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = views.iter().map(f).collect();
        vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let pose = if pred_poses.is_empty() && gt_poses.is_empty() {
        None
    } else {
        Some(pose_metrics(pred_poses, gt_poses, opts.main_view, opts.pose_mode)?)
    };
    let chamfer = if pred_cloud.is_empty() && gt_surface.is_empty() {
        None
    } else {
        Some(chamfer(pred_cloud, gt_surface)?)
    };
    Ok(EvalReport {
        mean_psnr: mean(&|v| Some(v.psnr)),
        mean_ssim: mean(&|v| Some(v.ssim)),
        mean_perceptual: mean(&|v| v.perceptual),
        views,
        pose,
        chamfer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> ImageRGBA {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRGBA {
            width: w,
            height: h,
            rgb: (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
            alpha: vec![1.0; w * h],
        }
    }

    #[test]
    fn psnr_examples() {
        let a = ImageRGBA::filled(8, 8, [0.3, 0.5, 0.7], 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = ImageRGBA::filled(8, 8, [0.4, 0.6, 0.8], 1.0);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let x = random_image(1, 9, 7);
        let y = random_image(2, 9, 7);
        let mut sum = 0.0;
        for i in 0..63 {
            for c in 0..3 {
                sum += (x.rgb[i][c] - y.rgb[i][c]).powi(2);
            }
        }
        let oracle = 10.0 * (189.0 / sum).log10();
        assert!((psnr(&x, &y).unwrap() - oracle).abs() < 1e-12);
        assert!(psnr(&x, &random_image(1, 7, 9)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = ImageRGBA::filled(16, 16, [0.5; 3], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pattern: Vec<[f64; 3]> = (0..256).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let mut last = f64::INFINITY;
        for step in 1..10 {
            let amp = 0.05 * step as f64;
            let noisy = ImageRGBA {
                rgb: pattern.iter().map(|p| p.map(|v| 0.5 + amp * v)).collect(),
                ..base.clone()
            };
            let v = psnr(&noisy, &base).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_examples() {
        let x = random_image(3, 20, 14);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let y = random_image(4, 20, 14);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());

        let checker = |inv: bool| {
            let mut img = ImageRGBA::filled(16, 16, [0.0; 3], 1.0);
            for r in 0..16 {
                for c in 0..16 {
                    let on = (r + c) % 2 == 0;
                    img.rgb[r * 16 + c] = [if on ^ inv { 1.0 } else { 0.0 }; 3];
                }
            }
            img
        };
        assert!(ssim(&checker(false), &checker(true)).unwrap() < 0.0);

        let a = ImageRGBA::filled(12, 12, [0.3; 3], 1.0);
        let b = ImageRGBA::filled(12, 12, [0.7; 3], 1.0);
        let closed = (0.42 + 1e-4) / (0.58 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let x = random_image(5, 13, 12);
        let y = random_image(6, 13, 12);
        let (_, g) = ssim_with_grad(&x, &y).unwrap();
        let h = 1e-6;
        for &(p, c) in &[(0usize, 0usize), (17, 1), (80, 2), (155, 0), (77, 1)] {
            let mut xp = x.clone();
            xp.rgb[p][c] += h;
            let mut xm = x.clone();
            xm.rgb[p][c] -= h;
            let fd = (ssim(&xp, &y).unwrap() - ssim(&xm, &y).unwrap()) / (2.0 * h);
            assert!((fd - g[p][c]).abs() < 1e-8 + 1e-5 * fd.abs(), "{p},{c}: {fd} vs {}", g[p][c]);
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let a = random_cloud(&mut rng, 300);
            let b = random_cloud(&mut rng, 200);
            let brute = |from: &[Vector3<f64>], to: &[Vector3<f64>]| {
                from.iter().map(|p| to.iter().map(|q| sqdist(q, p)).fold(f64::INFINITY, f64::min)).sum::<f64>() / from.len() as f64
            };
            assert_eq!(chamfer(&a, &b).unwrap(), brute(&a, &b) + brute(&b, &a));
        }
    }

    #[test]
    fn chamfer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_cloud(&mut rng, 50);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let p = [Vector3::zeros()];
        let q = [Vector3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer(&p, &q).unwrap(), 2.0);
        assert!(chamfer(&p, &[]).is_err());
    }

    #[test]
    fn median_is_lower_for_even_counts() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn one_bad_pose_among_five() {
        let gt: Vec<Pose> = (0..5)
            .map(|i| Pose::from_axis_angle(Vector3::new(0.0, 0.0, 0.4 * i as f64), Vector3::new(0.0, 0.0, 4.0)))
            .collect();
        let mut pred = gt.clone();
        let bad = Pose::from_axis_angle(Vector3::new(40f64.to_radians(), 0.0, 0.0), Vector3::zeros());
        pred[4] = bad.compose(&gt[4]);
        let m = pose_metrics(&pred, &gt, 0, PoseEvalMode::Anchored).unwrap();
        assert_eq!(m.rotation_errors_deg.len(), 5);
        assert!((m.rotation_errors_deg[4] - 40.0).abs() < 1e-9);
        assert!(m.median_rotation_error_deg < 1e-9);
        assert_eq!(m.acc_at_30, 0.8);
        assert_eq!(m.acc_at_15, 0.8);
        let pairs = pose_metrics(&pred, &gt, 0, PoseEvalMode::Pairwise).unwrap();
        assert_eq!(pairs.rotation_errors_deg.len(), 10);
        assert!(pairs.median_rotation_error_deg < 1e-9);
        assert!((pairs.acc_at_30 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_run_report() {
        let img = random_image(12, 16, 16);
        let poses = vec![Pose::identity(), Pose::from_axis_angle(Vector3::new(0.0, 0.5, 0.0), Vector3::new(0.1, 0.0, 0.0))];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 40);
        let r = evaluate_run(&[img.clone()], &[img], &poses, &poses, &cloud, &cloud, &EvalOptions::default()).unwrap();
        assert_eq!(r.mean_psnr, Some(99.0));
        assert_eq!(r.mean_ssim, Some(1.0));
        assert_eq!(r.mean_perceptual, None);
        let pose = r.pose.unwrap();
        assert!(pose.median_rotation_error_deg < 1e-9);
        assert_eq!(pose.acc_at_15, 1.0);
        assert_eq!(r.chamfer, Some(0.0));
    }
}
