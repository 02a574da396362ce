//! Direct optimization of splat attributes against posed images.

use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, ImageRGBA, Pose};
use crate::metrics::{psnr, ssim, ssim_with_grad};
use crate::splat::{rasterize, rasterize_backward, GaussianSplatSet, RasterOptions, SplatGradients};

/// Lower bound on every scale component after a step.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Which attribute groups are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamMask {
    pub center: bool,
    pub color: bool,
    pub scale: bool,
    pub rotation: bool,
    pub opacity: bool,
}

impl Default for ParamMask {
    fn default() -> Self {
        ParamMask::all()
    }
}

impl ParamMask {
    pub fn all() -> Self {
        ParamMask {
            center: true,
            color: true,
            scale: true,
            rotation: true,
            opacity: true,
        }
    }

    pub fn none() -> Self {
        ParamMask {
            center: false,
            color: false,
            scale: false,
            rotation: false,
            opacity: false,
        }
    }

    pub fn color_only() -> Self {
        ParamMask {
            color: true,
            ..ParamMask::none()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// Multiply the step by `rate` every `every` iterations.
    ExponentialDecay { rate: f64, every: usize },
}

impl StepSchedule {
    pub fn factor(&self, iteration: usize) -> f64 {
        match *self {
            StepSchedule::Constant => 1.0,
            StepSchedule::ExponentialDecay { rate, every } => rate.powi((iteration / every.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    /// Step for colour and opacity.
    pub step_size: f64,
    /// Geometry (center, log-scale, rotation) steps are `step_size` times this.
    pub geometry_step_ratio: f64,
    pub step_schedule: StepSchedule,
    /// Weight of the SSIM term in the RGB loss.
    pub lambda_ssim: f64,
    pub use_alpha_loss: bool,
    pub param_masks: ParamMask,
    /// Views per iteration; `None` uses every view every iteration.
    pub views_per_step: Option<usize>,
    /// Seeds the view sampling when `views_per_step` is set.
    pub rng_seed: u64,
    pub raster: RasterOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 500,
            step_size: 1e-2,
            geometry_step_ratio: 0.1,
            step_schedule: StepSchedule::ExponentialDecay { rate: 0.95, every: 50 },
            lambda_ssim: 0.2,
            use_alpha_loss: true,
            param_masks: ParamMask::all(),
            views_per_step: None,
            rng_seed: 0,
            raster: RasterOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.geometry_step_ratio >= 0.0 && self.geometry_step_ratio.is_finite()) {
            return Err(Error::invalid("geometry_step_ratio must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::invalid(format!("lambda_ssim must be in [0, 1], got {}", self.lambda_ssim)));
        }
        if let StepSchedule::ExponentialDecay { rate, every } = self.step_schedule {
            if !(rate > 0.0 && rate <= 1.0) || every == 0 {
                return Err(Error::invalid("decay needs rate in (0, 1] and every >= 1"));
            }
        }
        if self.views_per_step == Some(0) {
            return Err(Error::invalid("views_per_step must be at least 1"));
        }
        Ok(())
    }
}

/// Loss components of one evaluation, averaged over views when aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub rgb: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    pub loss_total: Vec<f64>,
    pub loss_rgb: Vec<f64>,
    pub loss_alpha: Vec<f64>,
    /// Per supervision view, after the last step.
    pub view_psnr: Vec<f64>,
    pub view_ssim: Vec<f64>,
    /// Kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl FitReport {
    pub fn mean_psnr(&self) -> f64 {
        self.view_psnr.iter().sum::<f64>() / self.view_psnr.len().max(1) as f64
    }

    /// Running minimum of the total loss.
    pub fn min_so_far(&self) -> Vec<f64> {
        self.loss_total
            .iter()
            .scan(f64::INFINITY, |m, v| {
                *m = m.min(*v);
                Some(*m)
            })
            .collect()
    }
}

/// Extra image-space loss term with its gradient, e.g. a learned perceptual
/// distance. Nothing is plugged in by default.
pub trait PerceptualLoss: Sync {
    fn loss_and_grad(&self, pred: &ImageRGBA, gt: &ImageRGBA) -> Result<(f64, Vec<[f64; 3]>)>;
}

/// `(1 - λ) MSE + λ (1 - SSIM)` over RGB, with its gradient.
pub fn rgb_loss(pred: &ImageRGBA, gt: &ImageRGBA, lambda: f64) -> Result<(f64, Vec<[f64; 3]>)> {
    pred.same_shape(gt)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let n = (3 * pred.len()) as f64;
    let mut sum = 0.0;
    let mut grad: Vec<[f64; 3]> = pred
        .rgb
        .iter()
        .zip(&gt.rgb)
        .map(|(p, g)| {
            [0, 1, 2].map(|c| {
                let d = p[c] - g[c];
                sum += d * d;
                (1.0 - lambda) * 2.0 * d / n
            })
        })
        .collect();
    let mut value = (1.0 - lambda) * sum / n;
    if lambda > 0.0 {
        let (s, g_ssim) = ssim_with_grad(pred, gt)?;
        value += lambda * (1.0 - s);
        for (g, gs) in grad.iter_mut().zip(&g_ssim) {
            for c in 0..3 {
                g[c] -= lambda * gs[c];
            }
        }
    }
    Ok((value.max(0.0), grad))
}

/// Mean squared alpha error with its gradient.
pub fn alpha_loss(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} alpha values", gt.len()), pred.len()));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let value = pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(gt).map(|(p, g)| 2.0 * (p - g) / n).collect();
    Ok((value, grad))
}

/// Image-space gradient of a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrad {
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

/// RGB loss plus, when enabled, the alpha loss.
pub fn total_loss(pred: &ImageRGBA, gt: &ImageRGBA, cfg: &FitConfig) -> Result<(LossTerms, ImageGrad)> {
    total_loss_with(pred, gt, cfg, None)
}

pub fn total_loss_with(
    pred: &ImageRGBA,
    gt: &ImageRGBA,
    cfg: &FitConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(LossTerms, ImageGrad)> {
    let (mut rgb, mut g_rgb) = rgb_loss(pred, gt, cfg.lambda_ssim)?;
    if let Some(p) = perceptual {
        let (v, g) = p.loss_and_grad(pred, gt)?;
        if g.len() != g_rgb.len() {
            return Err(Error::shape(format!("{} perceptual gradients", g_rgb.len()), g.len()));
        }
        rgb += v;
        for (a, b) in g_rgb.iter_mut().zip(&g) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
    }
    let (alpha, g_alpha) = if cfg.use_alpha_loss {
        alpha_loss(&pred.alpha, &gt.alpha)?
    } else {
        (0.0, vec![0.0; pred.len()])
    };
    Ok((
        LossTerms {
            total: rgb + alpha,
            rgb,
            alpha,
        },
        ImageGrad { rgb: g_rgb, alpha: g_alpha },
    ))
}

/// One supervision image with the camera that produced it, expressed in the
/// splat set's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionView {
    pub image: ImageRGBA,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

/// Loss and attribute gradients of one view.
pub fn view_loss_and_grad(
    set: &GaussianSplatSet,
    view: &SupervisionView,
    cfg: &FitConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(LossTerms, SplatGradients)> {
    let k = &view.intrinsics;
    if view.image.width != k.width || view.image.height != k.height {
        return Err(Error::shape(
            format!("{}x{} image", k.width, k.height),
            format!("{}x{}", view.image.width, view.image.height),
        ));
    }
    let pred = rasterize(set, &view.pose, k, &cfg.raster)?;
    let (terms, g) = total_loss_with(&pred.image, &view.image, cfg, perceptual)?;
    let grads = rasterize_backward(set, &view.pose, k, &cfg.raster, &g.rgb, &g.alpha)?;
    Ok((terms, grads))
}

/// Mean loss and gradient over the listed views, accumulated in list order.
pub fn loss_and_grad(
    set: &GaussianSplatSet,
    views: &[SupervisionView],
    which: &[usize],
    cfg: &FitConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(LossTerms, SplatGradients)> {
    let per_view: Vec<Result<(LossTerms, SplatGradients)>> = which
        .par_iter()
        .map(|&v| view_loss_and_grad(set, &views[v], cfg, perceptual))
        .collect();
    let w = 1.0 / which.len() as f64;
    let mut terms = LossTerms::default();
    let mut grads = SplatGradients::zeros(set.len());
    for (r, &v) in per_view.into_iter().zip(which) {
        let (t, g) = r.map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("view {v}: {m}")),
            other => other,
        })?;
        terms.total += t.total * w;
        terms.rgb += t.rgb * w;
        terms.alpha += t.alpha * w;
        grads.add_scaled(&g, w);
    }
    Ok((terms, grads))
}

/// First and second moment estimates for one flattened parameter block.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Returns the update to add to the parameter at slot `i`.
    fn step(&mut self, i: usize, g: f64, lr: f64, t: i32) -> f64 {
        self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
        self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
        let m_hat = self.m[i] / (1.0 - Self::BETA1.powi(t));
        let v_hat = self.v[i] / (1.0 - Self::BETA2.powi(t));
        -lr * m_hat / (v_hat.sqrt() + Self::EPS)
    }
}

struct Optimizer {
    center: Moments,
    color: Moments,
    log_scale: Moments,
    rotation: Moments,
    opacity: Moments,
    t: i32,
}

impl Optimizer {
    fn new(n: usize) -> Self {
        Optimizer {
            center: Moments::new(3 * n),
            color: Moments::new(3 * n),
            log_scale: Moments::new(3 * n),
            rotation: Moments::new(4 * n),
            opacity: Moments::new(n),
            t: 0,
        }
    }

    /// One update followed by projection onto the valid attribute ranges.
    fn apply(&mut self, set: &mut GaussianSplatSet, g: &SplatGradients, mask: &ParamMask, lr: f64, lr_geom: f64) {
        self.t += 1;
        let t = self.t;
        for (i, s) in set.splats.iter_mut().enumerate() {
            for c in 0..3 {
                if mask.center {
                    s.center[c] += self.center.step(3 * i + c, g.center[i][c], lr_geom, t);
                }
                if mask.color {
                    let v = s.color[c] + self.color.step(3 * i + c, g.color[i][c], lr, t);
                    s.color[c] = v.clamp(0.0, 1.0);
                }
                if mask.scale {
                    // d/d(ln s) = s d/ds
                    let gl = g.scale[i][c] * s.scale[c];
                    let ln = s.scale[c].ln() + self.log_scale.step(3 * i + c, gl, lr_geom, t);
                    s.scale[c] = ln.exp().max(SCALE_FLOOR);
                }
            }
            if mask.rotation {
                let mut q = s.rotation;
                for (j, qj) in q.iter_mut().enumerate() {
                    *qj += self.rotation.step(4 * i + j, g.rotation[i][j], lr_geom, t);
                }
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 && n.is_finite() {
                    s.rotation = q.map(|v| v / n);
                }
            }
            if mask.opacity {
                let v = s.opacity + self.opacity.step(i, g.opacity[i], lr, t);
                s.opacity = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Fits the set to the supervision views with adaptive-moment steps. Scale
/// is optimized in log space; after every step quaternions are normalized,
/// colour and opacity clamped to `[0, 1]` and scales floored at
/// [`SCALE_FLOOR`].
pub fn fit_rcg(
    init: &GaussianSplatSet,
    supervision: &[SupervisionView],
    cfg: &FitConfig,
) -> Result<(GaussianSplatSet, FitReport)> {
    fit_rcg_with(init, supervision, cfg, None)
}

pub fn fit_rcg_with(
    init: &GaussianSplatSet,
    supervision: &[SupervisionView],
    cfg: &FitConfig,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(GaussianSplatSet, FitReport)> {
    cfg.validate()?;
    init.validate()?;
    if supervision.is_empty() {
        return Err(Error::invalid("fitting needs at least one supervision view"));
    }
    for (i, v) in supervision.iter().enumerate() {
        v.image.validate().map_err(|e| Error::invalid(format!("supervision view {i}: {e}")))?;
    }
    let start = Instant::now();
    let mut set = init.clone();
    let mut opt = Optimizer::new(set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let all: Vec<usize> = (0..supervision.len()).collect();
    let mut report = FitReport::default();

    for it in 0..cfg.iterations {
        let which = match cfg.views_per_step {
            Some(k) if k < supervision.len() => {
                let mut idx = sample(&mut rng, supervision.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => all.clone(),
        };
        let (terms, grads) = loss_and_grad(&set, supervision, &which, cfg, perceptual)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("iteration {it}: {m}")),
                other => other,
            })?;
        if !terms.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {it} (rgb {}, alpha {}); last finite total {:?}",
                terms.rgb,
                terms.alpha,
                report.loss_total.last()
            )));
        }
        report.loss_total.push(terms.total);
        report.loss_rgb.push(terms.rgb);
        report.loss_alpha.push(terms.alpha);
        let lr = cfg.step_size * cfg.step_schedule.factor(it);
        opt.apply(&mut set, &grads, &cfg.param_masks, lr, lr * cfg.geometry_step_ratio);
    }

    let scores: Vec<Result<(f64, f64)>> = supervision
        .par_iter()
        .map(|v| {
            let pred = rasterize(&set, &v.pose, &v.intrinsics, &cfg.raster)?;
            Ok((psnr(&pred.image, &v.image)?, ssim(&pred.image, &v.image)?))
        })
        .collect();
    for s in scores {
        let (p, q) = s?;
        report.view_psnr.push(p);
        report.view_ssim.push(q);
    }
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok((set, report))
}

/// Renders `set` from every camera, producing supervision that the set
/// itself fits exactly.
pub fn self_supervision(
    set: &GaussianSplatSet,
    cameras: &[(Pose, CameraIntrinsics)],
    opts: &RasterOptions,
) -> Result<Vec<SupervisionView>> {
    cameras
        .iter()
        .map(|(pose, k)| {
            Ok(SupervisionView {
                image: rasterize(set, pose, k, opts)?.image,
                pose: *pose,
                intrinsics: *k,
            })
        })
        .collect()
}

/// Sum of a gradient's squared entries; zero exactly at a stationary point.
pub fn gradient_norm_sq(g: &SplatGradients) -> f64 {
    let v3 = |v: &[Vector3<f64>]| v.iter().map(|x| x.norm_squared()).sum::<f64>();
    v3(&g.center)
        + v3(&g.color)
        + v3(&g.scale)
        + g.rotation.iter().flatten().map(|x| x * x).sum::<f64>()
        + g.opacity.iter().map(|x| x * x).sum::<f64>()
}
