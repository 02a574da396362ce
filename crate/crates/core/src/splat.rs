//! Relative coordinate Gaussians and a CPU splat rasterizer with an analytic
//! reverse pass.
//!
//! Each pixel composites the Gaussians covering it front to back:
//!
//! ```text
//! a_k   = min(max_alpha, o_k * exp(-0.5 * dᵀ Σ2D⁻¹ d))     (skipped below min_alpha)
//! T_k   = Π_{j<k} (1 - a_j)
//! rgb   = Σ a_k T_k c_k + T_N * background
//! alpha = 1 - T_N
//! ```
//!
//! with `Σ2D = J W Σ Wᵀ Jᵀ + low_pass * I` and `Σ = R diag(s²) Rᵀ`.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, ImageRGBA, Pose};
use crate::rcm::{NormalizationTransform, RelativeCoordinateMap};

/// One pixel-aligned Gaussian: 3 center + 3 colour + 3 scale + 4 rotation
/// + 1 opacity = 14 attributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSplat {
    /// Normalized main-frame position.
    pub center: Vector3<f64>,
    pub color: Vector3<f64>,
    /// Per-axis standard deviation, normalized units.
    pub scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
}

impl GaussianSplat {
    pub fn isotropic(center: Vector3<f64>, color: Vector3<f64>, scale: f64, opacity: f64) -> Self {
        GaussianSplat {
            center,
            color,
            scale: Vector3::repeat(scale),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let qn = quat_norm(&self.rotation);
        if (qn - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("quaternion norm {qn} is not 1")));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("scale components must be positive"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::invalid(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid("colour outside [0, 1]"));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("center must be finite"));
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && quat_norm(&self.rotation) > 0.0
    }

    fn bits(&self) -> [u64; 14] {
        let mut out = [0; 14];
        let values = self
            .center
            .iter()
            .chain(self.color.iter())
            .chain(self.scale.iter())
            .chain(self.rotation.iter())
            .chain(std::iter::once(&self.opacity));
        for (o, v) in out.iter_mut().zip(values) {
            *o = v.to_bits();
        }
        out
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`quat_to_matrix`] with respect to `w, x, y, z`.
fn quat_matrix_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    let t = 2.0;
    [
        Matrix3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Matrix3::new(0.0, t * y, t * z, t * y, -2.0 * t * x, -t * w, t * z, t * w, -2.0 * t * x),
        Matrix3::new(-2.0 * t * y, t * x, t * w, t * x, 0.0, t * z, -t * w, t * z, -2.0 * t * y),
        Matrix3::new(-2.0 * t * z, -t * w, t * x, t * w, -2.0 * t * z, t * y, t * x, t * y, 0.0),
    ]
}

/// Source pixel of a pixel-aligned splat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelProvenance {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSplatSet {
    pub splats: Vec<GaussianSplat>,
    /// `(views, height, width)` for pixel-aligned sets.
    pub source_shape: Option<(usize, usize, usize)>,
    /// One entry per splat for pixel-aligned sets.
    pub provenance: Option<Vec<PixelProvenance>>,
    pub norm: NormalizationTransform,
}

impl GaussianSplatSet {
    /// Free-standing (not pixel-aligned) set.
    pub fn unaligned(splats: Vec<GaussianSplat>, norm: NormalizationTransform) -> Self {
        GaussianSplatSet {
            splats,
            source_shape: None,
            provenance: None,
            norm,
        }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.splats {
            s.validate()?;
        }
        if let Some(p) = &self.provenance {
            if p.len() != self.splats.len() {
                return Err(Error::shape(self.splats.len(), p.len()));
            }
        }
        Ok(())
    }

    /// Splats sourced from `view`, keeping provenance.
    pub fn view_subset(&self, view: usize) -> Result<GaussianSplatSet> {
        let prov = self
            .provenance
            .as_ref()
            .ok_or_else(|| Error::invalid("splat set is not pixel-aligned"))?;
        let (splats, provenance): (Vec<_>, Vec<_>) = self
            .splats
            .iter()
            .zip(prov)
            .filter(|(_, p)| p.view == view)
            .map(|(s, p)| (*s, *p))
            .unzip();
        Ok(GaussianSplatSet {
            splats,
            source_shape: self.source_shape.map(|(_, h, w)| (1, h, w)),
            provenance: Some(provenance),
            norm: self.norm,
        })
    }
}

/// Initial values for the attributes not given by the RCM and image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplatDefaults {
    pub scale0: f64,
    pub opacity0: f64,
    pub color_delta: [f64; 3],
}

impl Default for SplatDefaults {
    fn default() -> Self {
        SplatDefaults {
            scale0: 0.01,
            opacity0: 0.8,
            color_delta: [0.0; 3],
        }
    }
}

/// One splat per foreground pixel of every view: center from the RCM, colour
/// from the image plus `color_delta`, isotropic `scale0`, identity rotation,
/// `opacity0`.
pub fn rcg_from_rcms(
    rcms: &[RelativeCoordinateMap],
    images: &[ImageRGBA],
    defaults: &SplatDefaults,
) -> Result<GaussianSplatSet> {
    if rcms.is_empty() {
        return Err(Error::invalid("no views"));
    }
    if rcms.len() != images.len() {
        return Err(Error::shape(format!("{} images", rcms.len()), images.len()));
    }
    if !(defaults.scale0 > 0.0) || !(0.0..=1.0).contains(&defaults.opacity0) {
        return Err(Error::invalid("defaults need scale0 > 0 and opacity0 in [0, 1]"));
    }
    let (h, w) = (rcms[0].height, rcms[0].width);
    let norm = rcms[0].norm;
    let mut splats = Vec::new();
    let mut provenance = Vec::new();
    for (view, (rcm, img)) in rcms.iter().zip(images).enumerate() {
        if rcm.width != w || rcm.height != h || img.width != w || img.height != h {
            return Err(Error::shape(
                format!("{w}x{h} views"),
                format!("view {view}: rcm {}x{}, image {}x{}", rcm.width, rcm.height, img.width, img.height),
            ));
        }
        if rcm.norm != norm {
            return Err(Error::invalid("views use different normalizations"));
        }
        for (row, col, c) in rcm.foreground() {
            let rgb = img.rgb[row * w + col];
            let color = Vector3::from_fn(|i, _| (rgb[i] + defaults.color_delta[i]).clamp(0.0, 1.0));
            splats.push(GaussianSplat::isotropic(c, color, defaults.scale0, defaults.opacity0));
            provenance.push(PixelProvenance { view, row, col });
        }
    }
    Ok(GaussianSplatSet {
        splats,
        source_shape: Some((rcms.len(), h, w)),
        provenance: Some(provenance),
        norm,
    })
}

/// Single-view convenience over [`rcg_from_rcms`].
pub fn rcg_from_rcm(
    rcm: &RelativeCoordinateMap,
    image: &ImageRGBA,
    defaults: &SplatDefaults,
) -> Result<GaussianSplatSet> {
    rcg_from_rcms(std::slice::from_ref(rcm), std::slice::from_ref(image), defaults)
}

/// Pose that maps normalized main-frame coordinates into the camera of
/// `pose_view`, up to the (projection-invariant) normalization scale.
pub fn camera_in_normalized_frame(
    pose_view: &Pose,
    pose_main: &Pose,
    norm: &NormalizationTransform,
) -> Pose {
    let rel = pose_view.compose(&pose_main.inverse());
    Pose {
        rotation: rel.rotation,
        translation: (rel.rotation * norm.offset() + rel.translation) / norm.scale,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterOptions {
    /// Contributions below this alpha are skipped.
    pub min_alpha: f64,
    /// Per-splat alpha is clipped to this value.
    pub max_alpha: f64,
    /// Added to the diagonal of every projected covariance, px².
    pub low_pass: f64,
    /// Splats with camera-frame depth at or below this are culled.
    pub z_near: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
    pub background: [f64; 3],
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions {
            min_alpha: 1.0 / 255.0,
            max_alpha: 0.999,
            low_pass: 0.3,
            z_near: 0.01,
            min_transmittance: 1e-4,
            background: [1.0; 3],
        }
    }
}

/// Pixel extent is cut where alpha would fall below this, even with
/// `min_alpha = 0`.
const EXTENT_ALPHA_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Screen-space footprint of a splat, or `None` when it is at or behind the
/// near plane.
pub fn project_gaussian(
    splat: &GaussianSplat,
    cam: &Pose,
    k: &CameraIntrinsics,
    opts: &RasterOptions,
) -> Option<ProjectedGaussian> {
    Geometry::new(splat, cam, k, opts).map(|g| ProjectedGaussian {
        mean2d: g.mean,
        cov2d: g.cov2d,
        depth: g.x.z,
    })
}

/// Intermediate quantities of the splat-to-screen projection, kept for the
/// reverse pass.
struct Geometry {
    x: Vector3<f64>,
    jac: SMatrix<f64, 2, 3>,
    rot: Matrix3<f64>,
    qhat: [f64; 4],
    qnorm: f64,
    sigma: Matrix3<f64>,
    mean: Vector2<f64>,
    cov2d: Matrix2<f64>,
    conic: Matrix2<f64>,
}

impl Geometry {
    fn new(s: &GaussianSplat, cam: &Pose, k: &CameraIntrinsics, opts: &RasterOptions) -> Option<Self> {
        let x = cam.transform_point(&s.center);
        if !(x.z > opts.z_near) {
            return None;
        }
        let iz = 1.0 / x.z;
        let jac = SMatrix::<f64, 2, 3>::new(
            k.fx * iz,
            0.0,
            -k.fx * x.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * x.y * iz * iz,
        );
        let qnorm = quat_norm(&s.rotation);
        let qhat = s.rotation.map(|v| v / qnorm);
        let rot = quat_to_matrix(&qhat);
        let scaled = rot * Matrix3::from_diagonal(&s.scale);
        let sigma = scaled * scaled.transpose();
        let t = jac * cam.rotation;
        let mut cov2d = t * sigma * t.transpose();
        cov2d[(0, 0)] += opts.low_pass;
        cov2d[(1, 1)] += opts.low_pass;
        // exact symmetry for the inverse below
        let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
        cov2d[(0, 1)] = off;
        cov2d[(1, 0)] = off;
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
        if !(det > 0.0) {
            return None;
        }
        let conic = Matrix2::new(cov2d[(1, 1)], -off, -off, cov2d[(0, 0)]) / det;
        let mean = Vector2::new(k.fx * x.x * iz + k.cx, k.fy * x.y * iz + k.cy);
        Some(Geometry {
            x,
            jac,
            rot,
            qhat,
            qnorm,
            sigma,
            mean,
            cov2d,
            conic,
        })
    }

    fn max_eigenvalue(&self) -> f64 {
        let a = self.cov2d[(0, 0)];
        let b = self.cov2d[(0, 1)];
        let c = self.cov2d[(1, 1)];
        let mid = 0.5 * (a + c);
        mid + (0.25 * (a - c) * (a - c) + b * b).sqrt()
    }
}

struct Prepared {
    index: usize,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    cols: (usize, usize),
    rows: (usize, usize),
}

fn check_finite(set: &GaussianSplatSet) -> Result<()> {
    if let Some(i) = set.splats.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("splat {i} has a non-finite parameter")));
    }
    Ok(())
}

/// Projects, culls, and depth-sorts the set. Ties in depth are broken by the
/// splat attributes and then by index, so storage order never matters for
/// distinct splats.
fn prepare(
    set: &GaussianSplatSet,
    cam: &Pose,
    k: &CameraIntrinsics,
    opts: &RasterOptions,
) -> Vec<(f64, Prepared)> {
    let extent_alpha = opts.min_alpha.max(EXTENT_ALPHA_FLOOR);
    let mut out: Vec<(f64, Prepared)> = set
        .splats
        .iter()
        .enumerate()
        .filter_map(|(index, s)| {
            if !(s.opacity > extent_alpha) {
                return None;
            }
            let g = Geometry::new(s, cam, k, opts)?;
            // beyond this Mahalanobis radius alpha < extent_alpha
            let q_max = 2.0 * (s.opacity / extent_alpha).ln();
            let r = (q_max * g.max_eigenvalue()).sqrt();
            let span = |center: f64, n: usize| -> Option<(usize, usize)> {
                let lo = (center - r - 0.5).ceil().max(0.0);
                let hi = (center + r - 0.5).floor().min(n as f64 - 1.0);
                (lo <= hi).then_some((lo as usize, hi as usize))
            };
            let cols = span(g.mean.x, k.width)?;
            let rows = span(g.mean.y, k.height)?;
            Some((
                g.x.z,
                Prepared {
                    index,
                    mean: g.mean,
                    conic: g.conic,
                    opacity: s.opacity,
                    color: s.color,
                    cols,
                    rows,
                },
            ))
        })
        .collect();
    out.sort_by(|(da, a), (db, b)| {
        da.total_cmp(db)
            .then_with(|| set.splats[a.index].bits().cmp(&set.splats[b.index].bits()))
            .then_with(|| a.index.cmp(&b.index))
    });
    out
}

/// Per-pixel lists of prepared-splat positions, each already in depth order.
fn bin(prepared: &[(f64, Prepared)], width: usize, height: usize) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); width * height];
    for (pos, (_, p)) in prepared.iter().enumerate() {
        for row in p.rows.0..=p.rows.1 {
            for col in p.cols.0..=p.cols.1 {
                bins[row * width + col].push(pos as u32);
            }
        }
    }
    bins
}

struct Contribution {
    pos: u32,
    alpha: f64,
    clipped: bool,
    delta: Vector2<f64>,
    transmittance: f64,
}

fn composite(
    prepared: &[(f64, Prepared)],
    list: &[u32],
    px: Vector2<f64>,
    opts: &RasterOptions,
    mut record: Option<&mut Vec<Contribution>>,
) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut c = Vector3::zeros();
    for &pos in list {
        let p = &prepared[pos as usize].1;
        let d = px - p.mean;
        let q = d.dot(&(p.conic * d));
        let raw = p.opacity * (-0.5 * q).exp();
        if raw < opts.min_alpha {
            continue;
        }
        let clipped = raw > opts.max_alpha;
        let alpha = if clipped { opts.max_alpha } else { raw };
        c += p.color * (alpha * t);
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution {
                pos,
                alpha,
                clipped,
                delta: d,
                transmittance: t,
            });
        }
        t *= 1.0 - alpha;
        if t < opts.min_transmittance {
            break;
        }
    }
    let bg = opts.background;
    (
        [c.x + t * bg[0], c.y + t * bg[1], c.z + t * bg[2]],
        1.0 - t,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: ImageRGBA,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

/// Renders the set from `cam` (a pose in the set's normalized frame).
pub fn rasterize(
    set: &GaussianSplatSet,
    cam: &Pose,
    k: &CameraIntrinsics,
    opts: &RasterOptions,
) -> Result<RenderedView> {
    check_finite(set)?;
    let (w, h) = (k.width, k.height);
    let prepared = prepare(set, cam, k, opts);
    let bins = bin(&prepared, w, h);
    let pixels: Vec<([f64; 3], f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let px = CameraIntrinsics::pixel_center(i / w, i % w);
            composite(&prepared, &bins[i], px, opts, None)
        })
        .collect();
    let (rgb, alpha) = pixels.into_iter().unzip();
    Ok(RenderedView {
        image: ImageRGBA {
            width: w,
            height: h,
            rgb,
            alpha,
        },
        pose: *cam,
        intrinsics: *k,
    })
}

/// Gradients with respect to every splat attribute. Rotation gradients are
/// tangent to the unit quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGradients {
    pub center: Vec<Vector3<f64>>,
    pub color: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        SplatGradients {
            center: vec![Vector3::zeros(); n],
            color: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// `self += other * weight`.
    pub fn add_scaled(&mut self, other: &SplatGradients, weight: f64) {
        for i in 0..self.len() {
            self.center[i] += other.center[i] * weight;
            self.color[i] += other.color[i] * weight;
            self.scale[i] += other.scale[i] * weight;
            for j in 0..4 {
                self.rotation[i][j] += other.rotation[i][j] * weight;
            }
            self.opacity[i] += other.opacity[i] * weight;
        }
    }
}

/// Reverse pass of [`rasterize`] for `L = Σ grad_rgb ⊙ rgb + Σ grad_alpha ⊙ alpha`.
/// Recomputes the forward state per pixel instead of storing it.
pub fn rasterize_backward(
    set: &GaussianSplatSet,
    cam: &Pose,
    k: &CameraIntrinsics,
    opts: &RasterOptions,
    grad_rgb: &[[f64; 3]],
    grad_alpha: &[f64],
) -> Result<SplatGradients> {
    check_finite(set)?;
    let (w, h) = (k.width, k.height);
    if grad_rgb.len() != w * h || grad_alpha.len() != w * h {
        return Err(Error::shape(
            format!("{} pixel gradients", w * h),
            format!("{} rgb, {} alpha", grad_rgb.len(), grad_alpha.len()),
        ));
    }
    let prepared = prepare(set, cam, k, opts);
    let bins = bin(&prepared, w, h);
    let bg = Vector3::from(opts.background);

    let m = prepared.len();
    let mut g_mean = vec![Vector2::<f64>::zeros(); m];
    let mut g_conic = vec![Matrix2::<f64>::zeros(); m];
    let mut g_opacity = vec![0.0; m];
    let mut g_color = vec![Vector3::<f64>::zeros(); m];

    let mut contribs = Vec::new();
    for i in 0..w * h {
        let gr = Vector3::from(grad_rgb[i]);
        let ga = grad_alpha[i];
        if gr == Vector3::zeros() && ga == 0.0 {
            continue;
        }
        contribs.clear();
        let px = CameraIntrinsics::pixel_center(i / w, i % w);
        let (_, alpha) = composite(&prepared, &bins[i], px, opts, Some(&mut contribs));
        let t_final = 1.0 - alpha;
        // colour accumulated behind the current splat, background included
        let mut behind = bg * t_final;
        for c in contribs.iter().rev() {
            let pos = c.pos as usize;
            let p = &prepared[pos].1;
            g_color[pos] += gr * (c.alpha * c.transmittance);
            let inv = 1.0 / (1.0 - c.alpha);
            let d_alpha = gr.dot(&(p.color * c.transmittance - behind * inv)) + ga * t_final * inv;
            behind += p.color * (c.alpha * c.transmittance);
            if c.clipped {
                continue;
            }
            let gauss = c.alpha / p.opacity;
            g_opacity[pos] += d_alpha * gauss;
            let d_q = -0.5 * c.alpha * d_alpha;
            g_mean[pos] -= (p.conic * c.delta) * (2.0 * d_q);
            g_conic[pos] += c.delta * c.delta.transpose() * d_q;
        }
    }

    let mut grads = SplatGradients::zeros(set.len());
    for (pos, (_, p)) in prepared.iter().enumerate() {
        let s = &set.splats[p.index];
        let g = Geometry::new(s, cam, k, opts).expect("prepared splats project");
        let (d_center, d_scale, d_rot) = geometry_backward(s, &g, cam, k, &g_mean[pos], &g_conic[pos]);
        grads.center[p.index] = d_center;
        grads.scale[p.index] = d_scale;
        grads.rotation[p.index] = d_rot;
        grads.color[p.index] = g_color[pos];
        grads.opacity[p.index] = g_opacity[pos];
    }
    Ok(grads)
}

/// Chains screen-space gradients (mean and conic) back to center, scale and
/// rotation.
fn geometry_backward(
    s: &GaussianSplat,
    g: &Geometry,
    cam: &Pose,
    k: &CameraIntrinsics,
    d_mean: &Vector2<f64>,
    d_conic: &Matrix2<f64>,
) -> (Vector3<f64>, Vector3<f64>, [f64; 4]) {
    let w = cam.rotation;
    let t = g.jac * w;
    let d_cov2d = -(g.conic * d_conic * g.conic);
    let d_sigma = t.transpose() * d_cov2d * t;
    let d_t = d_cov2d * t * g.sigma * 2.0;
    let d_jac = d_t * w.transpose();

    let (x, y, z) = (g.x.x, g.x.y, g.x.z);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    // the mean's Jacobian with respect to the camera point is `jac` itself
    let mut d_x = g.jac.transpose() * d_mean;
    d_x.x += d_jac[(0, 2)] * (-k.fx * iz2);
    d_x.y += d_jac[(1, 2)] * (-k.fy * iz2);
    d_x.z += d_jac[(0, 0)] * (-k.fx * iz2)
        + d_jac[(0, 2)] * (2.0 * k.fx * x * iz3)
        + d_jac[(1, 1)] * (-k.fy * iz2)
        + d_jac[(1, 2)] * (2.0 * k.fy * y * iz3);
    let d_center = w.transpose() * d_x;

    let scale = Matrix3::from_diagonal(&s.scale);
    let d_scaled = (d_sigma + d_sigma.transpose()) * g.rot * scale;
    let d_scale = Vector3::from_fn(|i, _| (0..3).map(|r| d_scaled[(r, i)] * g.rot[(r, i)]).sum());
    let d_rot_matrix = d_scaled * scale;
    let partials = quat_matrix_partials(&g.qhat);
    let d_qhat: [f64; 4] = partials.map(|pm| pm.component_mul(&d_rot_matrix).sum());
    // through q / |q|: project out the radial component
    let radial: f64 = d_qhat.iter().zip(&g.qhat).map(|(a, b)| a * b).sum();
    let d_q = [0, 1, 2, 3].map(|i| (d_qhat[i] - radial * g.qhat[i]) / g.qnorm);
    (d_center, d_scale, d_q)
}

/// Per-source-pixel mask of splats whose opacity reaches `threshold`, laid
/// out as `views x height x width`. Pixels without a splat are false.
pub fn opacity_confidence_mask(set: &GaussianSplatSet, threshold: f64) -> Result<Vec<bool>> {
    let (Some((views, h, w)), Some(prov)) = (set.source_shape, set.provenance.as_ref()) else {
        return Err(Error::invalid("opacity mask needs a pixel-aligned splat set"));
    };
    let mut mask = vec![false; views * h * w];
    for (s, p) in set.splats.iter().zip(prov) {
        if p.view >= views || p.row >= h || p.col >= w {
            return Err(Error::invalid(format!("provenance {p:?} outside {views}x{h}x{w}")));
        }
        mask[(p.view * h + p.row) * w + p.col] = s.opacity >= threshold;
    }
    Ok(mask)
}

impl PartialOrd for PixelProvenance {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PixelProvenance {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.view, self.row, self.col).cmp(&(other.view, other.row, other.col))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::intrinsics_from_fov;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> (Pose, CameraIntrinsics) {
        (Pose::identity(), CameraIntrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap())
    }

    fn set_of(splats: Vec<GaussianSplat>) -> GaussianSplatSet {
        GaussianSplatSet::unaligned(splats, NormalizationTransform::identity())
    }

    #[test]
    fn on_axis_covariance() {
        let (pose, k) = cam();
        let s = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 2.0), Vector3::repeat(0.5), 0.1, 1.0);
        let p = project_gaussian(&s, &pose, &k, &RasterOptions::default()).unwrap();
        assert_eq!(p.mean2d, Vector2::new(16.0, 16.0));
        let expected = (40.0 * 0.1 / 2.0f64).powi(2) + 0.3;
        assert!((p.cov2d - Matrix2::identity() * expected).abs().max() < 1e-12);
        assert_eq!(p.depth, 2.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let (pose, k) = cam();
        let s = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, -1.0), Vector3::repeat(0.5), 0.1, 1.0);
        assert!(project_gaussian(&s, &pose, &k, &RasterOptions::default()).is_none());
    }

    #[test]
    fn isotropic_splat_ignores_rotation() {
        let (pose, k) = cam();
        let mut s = GaussianSplat::isotropic(Vector3::new(0.1, -0.2, 2.0), Vector3::repeat(0.5), 0.1, 1.0);
        let a = project_gaussian(&s, &pose, &k, &RasterOptions::default()).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        s.rotation = [h, 0.0, 0.0, h];
        let b = project_gaussian(&s, &pose, &k, &RasterOptions::default()).unwrap();
        assert!((a.cov2d - b.cov2d).abs().max() < 1e-12);
    }

    #[test]
    fn empty_set_renders_background() {
        let (pose, k) = cam();
        let view = rasterize(&set_of(vec![]), &pose, &k, &RasterOptions::default()).unwrap();
        assert_eq!(view.image, ImageRGBA::background(32, 32));
    }

    #[test]
    fn opaque_center_pixel() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.5, 16.5, 33, 33).unwrap();
        let s = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.2, 0.6, 0.9), 0.5, 1.0);
        let view = rasterize(&set_of(vec![s]), &Pose::identity(), &k, &RasterOptions::default()).unwrap();
        let c = 16 * 33 + 16;
        // alpha at the mean is 0.999 * opacity; the remaining 0.001 is white
        assert!((view.image.alpha[c] - 0.999).abs() < 1e-12);
        for (got, want) in view.image.rgb[c].iter().zip([0.2, 0.6, 0.9]) {
            assert!((got - want).abs() < 1e-3);
        }
    }

    #[test]
    fn near_opaque_splat_occludes() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.5, 16.5, 33, 33).unwrap();
        let red = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 2.0), Vector3::new(1.0, 0.0, 0.0), 0.5, 1.0);
        let far = GaussianSplat::isotropic(Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, 0.0, 1.0), 0.5, 1.0);
        let view = rasterize(&set_of(vec![far, red]), &Pose::identity(), &k, &RasterOptions::default()).unwrap();
        let px = view.image.rgb[16 * 33 + 16];
        assert!(px[0] > 0.99 && px[2] < 0.01, "{px:?}");
    }

    #[test]
    fn rgb_backward_matches_finite_differences() {
        let k = intrinsics_from_fov(40.0, 24, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let splats: Vec<GaussianSplat> = (0..6)
            .map(|_| {
                let mut q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let n = quat_norm(&q);
                q.iter_mut().for_each(|v| *v /= n);
                GaussianSplat {
                    center: Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(1.5..2.5)),
                    color: Vector3::new(rng.random(), rng.random(), rng.random()),
                    scale: Vector3::new(rng.random_range(0.03..0.15), rng.random_range(0.03..0.15), rng.random_range(0.03..0.15)),
                    rotation: q,
                    opacity: rng.random_range(0.2..0.9),
                }
            })
            .collect();
        let set = set_of(splats);
        let opts = RasterOptions { min_alpha: 0.0, min_transmittance: 0.0, ..Default::default() };
        let n = k.pixel_count();
        let grgb: Vec<[f64; 3]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let ga: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |s: &GaussianSplatSet| {
            let v = rasterize(s, &Pose::identity(), &k, &opts).unwrap();
            let mut l = 0.0;
            for i in 0..n {
                for c in 0..3 {
                    l += grgb[i][c] * v.image.rgb[i][c];
                }
                l += ga[i] * v.image.alpha[i];
            }
            l
        };
        let grads = rasterize_backward(&set, &Pose::identity(), &k, &opts, &grgb, &ga).unwrap();
        let h = 1e-5;
        for si in 0..set.len() {
            for p in 0..14 {
                let perturb = |d: f64| {
                    let mut s = set.clone();
                    let sp = &mut s.splats[si];
                    match p {
                        0..=2 => sp.center[p] += d,
                        3..=5 => sp.color[p - 3] += d,
                        6..=8 => sp.scale[p - 6] += d,
                        9..=12 => sp.rotation[p - 9] += d,
                        _ => sp.opacity += d,
                    }
                    loss(&s)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let an = match p {
                    0..=2 => grads.center[si][p],
                    3..=5 => grads.color[si][p - 3],
                    6..=8 => grads.scale[si][p - 6],
                    9..=12 => grads.rotation[si][p - 9],
                    _ => grads.opacity[si],
                };
                let err = (an - fd).abs();
                assert!(err < 1e-6 || err / an.abs().max(fd.abs()) < 1e-4, "splat {si} param {p}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn confidence_mask_layout() {
        let k = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0, 2, 2).unwrap();
        let splats: Vec<_> = (0..4)
            .map(|i| GaussianSplat::isotropic(Vector3::zeros(), Vector3::zeros(), 0.1, if (i / 2 + i % 2) % 2 == 0 { 0.2 } else { 0.8 }))
            .collect();
        let set = GaussianSplatSet {
            splats,
            source_shape: Some((1, 2, 2)),
            provenance: Some((0..4).map(|i| PixelProvenance { view: 0, row: i / 2, col: i % 2 }).collect()),
            norm: NormalizationTransform::identity(),
        };
        assert_eq!(opacity_confidence_mask(&set, 0.5).unwrap(), vec![false, true, true, false]);
        let _ = k;
        assert!(opacity_confidence_mask(&set_of(vec![]), 0.5).is_err());
    }
}
