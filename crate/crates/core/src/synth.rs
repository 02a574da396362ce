//! Procedural ground truth: analytic scenes, the orbit camera rig, and exact
//! ray-cast depth/colour/mask renders.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{intrinsics_from_fov, CameraIntrinsics, DepthMap, ImageRGBA, Pose};

/// One analytic surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    /// Oriented box; `rotation` is an axis-angle vector taking box axes to
    /// world axes.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
        albedo: [f64; 3],
    },
    /// Oriented discs.
    SurfelCloud {
        points: Vec<[f64; 3]>,
        normals: Vec<[f64; 3]>,
        radii: Vec<f64>,
        albedos: Vec<[f64; 3]>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    /// Lambertian shading against a head light; flat albedo when false.
    #[serde(default)]
    pub lambert: bool,
}

impl SyntheticScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let scene = SyntheticScene {
            primitives,
            lambert: false,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let albedo_ok = |a: &[f64; 3]| a.iter().all(|v| (0.0..=1.0).contains(v));
        for prim in &self.primitives {
            match prim {
                Primitive::Sphere { radius, albedo, .. } => {
                    if !(*radius > 0.0) || !albedo_ok(albedo) {
                        return Err(Error::invalid("sphere needs radius > 0 and albedo in [0,1]"));
                    }
                }
                Primitive::Box {
                    half_extents,
                    albedo,
                    ..
                } => {
                    if !half_extents.iter().all(|h| *h > 0.0) || !albedo_ok(albedo) {
                        return Err(Error::invalid("box needs positive half extents and albedo in [0,1]"));
                    }
                }
                Primitive::SurfelCloud {
                    points,
                    normals,
                    radii,
                    albedos,
                } => {
                    let n = points.len();
                    if normals.len() != n || radii.len() != n || albedos.len() != n {
                        return Err(Error::shape(
                            format!("{n} normals, radii and albedos"),
                            format!("{}, {}, {}", normals.len(), radii.len(), albedos.len()),
                        ));
                    }
                    if !radii.iter().all(|r| *r > 0.0) || !albedos.iter().all(albedo_ok) {
                        return Err(Error::invalid("surfels need radius > 0 and albedo in [0,1]"));
                    }
                    if normals.iter().any(|nv| Vector3::from(*nv).norm() < 1e-12) {
                        return Err(Error::invalid("surfel normal must be non-zero"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Radius of the smallest origin-centred ball containing every primitive.
    pub fn bounding_radius(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| match p {
                Primitive::Sphere { center, radius, .. } => Vector3::from(*center).norm() + radius,
                Primitive::Box {
                    center,
                    half_extents,
                    ..
                } => Vector3::from(*center).norm() + Vector3::from(*half_extents).norm(),
                Primitive::SurfelCloud { points, radii, .. } => points
                    .iter()
                    .zip(radii)
                    .map(|(p, r)| Vector3::from(*p).norm() + r)
                    .fold(0.0, f64::max),
            })
            .fold(0.0, f64::max)
    }

    /// Single sphere of the given radius at the origin.
    pub fn sphere(radius: f64, albedo: [f64; 3]) -> Self {
        SyntheticScene {
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius,
                albedo,
            }],
            lambert: false,
        }
    }

    /// Random spheres and boxes inside the unit ball, reproducible from
    /// `seed`.
    pub fn procedural(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(2..=4);
        let mut primitives = Vec::with_capacity(count);
        for i in 0..count {
            let dir = random_unit(&mut rng);
            let offset: f64 = rng.random_range(0.0..0.35);
            let center = (dir * offset).into();
            let albedo = [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ];
            if i % 2 == 0 {
                primitives.push(Primitive::Sphere {
                    center,
                    radius: rng.random_range(0.25..0.55),
                    albedo,
                });
            } else {
                let axis = random_unit(&mut rng) * rng.random_range(0.0..std::f64::consts::PI);
                primitives.push(Primitive::Box {
                    center,
                    half_extents: [
                        rng.random_range(0.15..0.35),
                        rng.random_range(0.15..0.35),
                        rng.random_range(0.15..0.35),
                    ],
                    rotation: axis.into(),
                    albedo,
                });
            }
        }
        SyntheticScene {
            primitives,
            lambert: false,
        }
    }
}

pub(crate) fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigPreset {
    /// FOV 30°, 512x512, elevations −20°/5°/20° x 24 azimuths plus 18 front
    /// views: 90 cameras.
    Paper,
    /// FOV 30°, 64x64, elevations −20°/5°/20° x 12 azimuths: 36 cameras.
    Desk,
}

impl std::str::FromStr for RigPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(RigPreset::Paper),
            "desk" => Ok(RigPreset::Desk),
            other => Err(Error::invalid(format!("unknown rig preset `{other}`"))),
        }
    }
}

/// Optional overrides applied on top of a preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigOverrides {
    pub fov_deg: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    /// `(elevation_deg, azimuth_count)` rings.
    pub rings: Option<Vec<(f64, usize)>>,
    pub radius: Option<f64>,
}

/// Cameras on a sphere around the origin, all looking at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub rings: Vec<(f64, usize)>,
    pub radius: f64,
}

/// Rig radius used when none is given, for a scene inside the unit ball.
///
/// A unit-radius object subtends asin(1/r) from distance r; 4.5 keeps it
/// inside a 30° field of view with a margin.
pub const DEFAULT_RIG_RADIUS: f64 = 4.5;

impl CameraRig {
    pub fn view_count(&self) -> usize {
        self.rings.iter().map(|(_, n)| n).sum()
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        intrinsics_from_fov(self.fov_deg, self.width, self.height)
    }

    /// World-to-camera poses, ring-major, azimuths counter-clockwise from `+x`.
    pub fn poses(&self) -> Result<Vec<Pose>> {
        let mut poses = Vec::with_capacity(self.view_count());
        for &(elev, count) in &self.rings {
            if !(elev.abs() < 90.0) {
                return Err(Error::invalid(format!(
                    "elevation must lie strictly between -90° and 90°, got {elev}"
                )));
            }
            let e = elev.to_radians();
            for i in 0..count {
                let a = std::f64::consts::TAU * i as f64 / count as f64;
                let eye = self.radius * Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
                poses.push(Pose::look_at(eye, Vector3::zeros(), Vector3::z())?);
            }
        }
        Ok(poses)
    }
}

/// Builds a rig from a preset plus overrides, returning every camera.
pub fn make_rig(
    preset: RigPreset,
    overrides: &RigOverrides,
) -> Result<(CameraRig, Vec<(Pose, CameraIntrinsics)>)> {
    let (size, rings) = match preset {
        RigPreset::Paper => (512, vec![(-20.0, 24), (5.0, 24), (20.0, 24), (0.0, 18)]),
        RigPreset::Desk => (64, vec![(-20.0, 12), (5.0, 12), (20.0, 12)]),
    };
    let rig = CameraRig {
        fov_deg: overrides.fov_deg.unwrap_or(30.0),
        width: overrides.width.unwrap_or(size),
        height: overrides.height.unwrap_or(size),
        rings: overrides.rings.clone().unwrap_or(rings),
        radius: overrides.radius.unwrap_or(DEFAULT_RIG_RADIUS),
    };
    if !(rig.radius > 0.0) {
        return Err(Error::invalid("rig radius must be positive"));
    }
    let k = rig.intrinsics()?;
    let cams = rig.poses()?.into_iter().map(|p| (p, k)).collect();
    Ok((rig, cams))
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f64; 3],
}

fn box_frame(rotation: &[f64; 3]) -> Matrix3<f64> {
    Rotation3::new(Vector3::from(*rotation)).into_inner()
}

fn intersect(prim: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>, best: &mut Option<Hit>) {
    let mut consider = |t: f64, normal: Vector3<f64>, albedo: [f64; 3]| {
        if t > 0.0 && best.as_ref().is_none_or(|h| t < h.t) {
            *best = Some(Hit { t, normal, albedo });
        }
    };
    match prim {
        Primitive::Sphere {
            center,
            radius,
            albedo,
        } => {
            let c = Vector3::from(*center);
            let oc = o - c;
            let a = d.dot(d);
            let b = oc.dot(d);
            let cc = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * cc;
            if disc < 0.0 {
                return;
            }
            let sq = disc.sqrt();
            // numerically stable root pair
            let q = -(b + b.signum() * sq);
            let (t0, t1) = if q != 0.0 { (q / a, cc / q) } else { (0.0, 0.0) };
            let (near, far) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            let t = if near > 0.0 { near } else { far };
            if t > 0.0 {
                consider(t, (o + d * t - c) / *radius, *albedo);
            }
        }
        Primitive::Box {
            center,
            half_extents,
            rotation,
            albedo,
        } => {
            let r = box_frame(rotation);
            let lo = r.transpose() * (o - Vector3::from(*center));
            let ld = r.transpose() * d;
            let h = Vector3::from(*half_extents);
            let mut tmin = f64::NEG_INFINITY;
            let mut tmax = f64::INFINITY;
            let mut axis_in = 0;
            let mut axis_out = 0;
            for i in 0..3 {
                if ld[i] == 0.0 {
                    if lo[i].abs() > h[i] {
                        return;
                    }
                    continue;
                }
                let inv = 1.0 / ld[i];
                let mut t0 = (-h[i] - lo[i]) * inv;
                let mut t1 = (h[i] - lo[i]) * inv;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > tmin {
                    tmin = t0;
                    axis_in = i;
                }
                if t1 < tmax {
                    tmax = t1;
                    axis_out = i;
                }
            }
            if tmin > tmax {
                return;
            }
            let (t, axis) = if tmin > 0.0 { (tmin, axis_in) } else { (tmax, axis_out) };
            let mut n = Vector3::zeros();
            n[axis] = (lo[axis] + ld[axis] * t).signum();
            consider(t, r * n, *albedo);
        }
        Primitive::SurfelCloud {
            points,
            normals,
            radii,
            albedos,
        } => {
            for i in 0..points.len() {
                let p = Vector3::from(points[i]);
                let n = Vector3::from(normals[i]).normalize();
                let denom = n.dot(d);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let t = n.dot(&(p - o)) / denom;
                if t > 0.0 && (o + d * t - p).norm() <= radii[i] {
                    consider(t, n, albedos[i]);
                }
            }
        }
    }
}

/// Ray-casts every pixel center. Depth is the camera-frame z of the nearest
/// hit; colour is the albedo (optionally Lambert-shaded); background is white.
pub fn raycast(scene: &SyntheticScene, cam: &Pose, k: &CameraIntrinsics) -> (DepthMap, ImageRGBA) {
    let (w, h) = (k.width, k.height);
    let mut depth = DepthMap::empty(w, h);
    let mut image = ImageRGBA::background(w, h);
    let origin = cam.center();
    let rt = cam.rotation.transpose();
    for row in 0..h {
        for col in 0..w {
            let px = CameraIntrinsics::pixel_center(row, col);
            // camera-frame direction with unit z, so the ray parameter is z-depth
            let dir_cam = Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0);
            let dir = rt * dir_cam;
            let mut best = None;
            for prim in &scene.primitives {
                intersect(prim, &origin, &dir, &mut best);
            }
            if let Some(hit) = best {
                let i = row * w + col;
                depth.values[i] = hit.t;
                depth.mask[i] = true;
                let shade = if scene.lambert {
                    hit.normal.dot(&dir).abs() / dir.norm()
                } else {
                    1.0
                };
                image.rgb[i] = hit.albedo.map(|a| (a * shade).clamp(0.0, 1.0));
                image.alpha[i] = 1.0;
            }
        }
    }
    (depth, image)
}

/// Image with `factor x factor` ray samples per pixel averaged (box filter),
/// alpha being the covered fraction. `factor = 1` equals [`raycast`].
pub fn raycast_antialiased(
    scene: &SyntheticScene,
    cam: &Pose,
    k: &CameraIntrinsics,
    factor: usize,
) -> Result<ImageRGBA> {
    if factor == 0 {
        return Err(Error::invalid("supersampling factor must be at least 1"));
    }
    let f = factor as f64;
    let hi = CameraIntrinsics::new(k.fx * f, k.fy * f, k.cx * f, k.cy * f, k.width * factor, k.height * factor)?;
    let (_, fine) = raycast(scene, cam, &hi);
    let mut out = ImageRGBA::background(k.width, k.height);
    let norm = 1.0 / (f * f);
    for row in 0..k.height {
        for col in 0..k.width {
            let mut rgb = [0.0; 3];
            let mut alpha = 0.0;
            for i in 0..factor {
                for j in 0..factor {
                    let idx = (row * factor + i) * hi.width + col * factor + j;
                    for c in 0..3 {
                        rgb[c] += fine.rgb[idx][c];
                    }
                    alpha += fine.alpha[idx];
                }
            }
            let o = row * k.width + col;
            out.rgb[o] = rgb.map(|v| v * norm);
            out.alpha[o] = alpha * norm;
        }
    }
    Ok(out)
}

fn disc_distance(p: &Vector3<f64>, center: &Vector3<f64>, normal: &Vector3<f64>, radius: f64) -> f64 {
    let n = normal.normalize();
    let rel = p - center;
    let height = rel.dot(&n);
    let radial = (rel - n * height).norm();
    if radial <= radius {
        height.abs()
    } else {
        ((radial - radius).powi(2) + height * height).sqrt()
    }
}

/// Unsigned distance from each point to the nearest primitive surface.
/// Infinite for an empty scene.
pub fn scene_surface_distance(scene: &SyntheticScene, points: &[Vector3<f64>]) -> Vec<f64> {
    points
        .iter()
        .map(|p| {
            scene
                .primitives
                .iter()
                .map(|prim| match prim {
                    Primitive::Sphere { center, radius, .. } => {
                        ((p - Vector3::from(*center)).norm() - radius).abs()
                    }
                    Primitive::Box {
                        center,
                        half_extents,
                        rotation,
                        ..
                    } => {
                        let local = box_frame(rotation).transpose() * (p - Vector3::from(*center));
                        let q = local.abs() - Vector3::from(*half_extents);
                        let outside = q.map(|v| v.max(0.0)).norm();
                        if outside > 0.0 {
                            outside
                        } else {
                            -q.max()
                        }
                    }
                    Primitive::SurfelCloud {
                        points: centers,
                        normals,
                        radii,
                        ..
                    } => centers
                        .iter()
                        .zip(normals)
                        .zip(radii)
                        .map(|((c, n), r)| {
                            disc_distance(p, &Vector3::from(*c), &Vector3::from(*n), *r)
                        })
                        .fold(f64::INFINITY, f64::min),
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Samples points on every primitive surface at roughly `spacing` apart.
/// Useful as a ground-truth cloud for Chamfer comparisons.
pub fn sample_surface(scene: &SyntheticScene, spacing: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for prim in &scene.primitives {
        match prim {
            Primitive::Sphere { center, radius, .. } => {
                let area = 4.0 * std::f64::consts::PI * radius * radius;
                let n = ((area / (spacing * spacing)).ceil() as usize).max(8);
                let c = Vector3::from(*center);
                out.extend(fibonacci_sphere(n).into_iter().map(|u| c + u * *radius));
            }
            Primitive::Box {
                center,
                half_extents,
                rotation,
                ..
            } => {
                let r = box_frame(rotation);
                let c = Vector3::from(*center);
                let h = Vector3::from(*half_extents);
                for axis in 0..3 {
                    let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                    let n1 = ((2.0 * h[a1] / spacing).ceil() as usize).max(1);
                    let n2 = ((2.0 * h[a2] / spacing).ceil() as usize).max(1);
                    for sign in [-1.0, 1.0] {
                        for i in 0..=n1 {
                            for j in 0..=n2 {
                                let mut local = Vector3::zeros();
                                local[axis] = sign * h[axis];
                                local[a1] = -h[a1] + 2.0 * h[a1] * i as f64 / n1 as f64;
                                local[a2] = -h[a2] + 2.0 * h[a2] * j as f64 / n2 as f64;
                                out.push(c + r * local);
                            }
                        }
                    }
                }
            }
            Primitive::SurfelCloud { points, .. } => {
                out.extend(points.iter().map(|p| Vector3::from(*p)));
            }
        }
    }
    out
}

/// `n` nearly uniform unit vectors on the golden-angle spiral.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            Vector3::new(r * theta.cos(), r * theta.sin(), z)
        })
        .collect()
}

/// Pixel coordinate helper for tests and callers that iterate foregrounds.
pub fn foreground_pixels(depth: &DepthMap) -> impl Iterator<Item = (usize, usize, Vector2<f64>, f64)> + '_ {
    let w = depth.width;
    depth
        .mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(move |(i, _)| {
            let (row, col) = (i / w, i % w);
            (row, col, CameraIntrinsics::pixel_center(row, col), depth.values[i])
        })
}
