//! Small reproducible scenes shared by tests, examples and the CLI.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fit::SupervisionView;
use crate::geom::{CameraIntrinsics, Pose};
use crate::rcm::NormalizationTransform;
use crate::splat::{camera_in_normalized_frame, GaussianSplat, GaussianSplatSet};
use crate::synth::{fibonacci_sphere, make_rig, raycast_antialiased, RigOverrides, RigPreset, SyntheticScene};

/// Albedo of the fixture sphere.
pub const SPHERE_ALBEDO: [f64; 3] = [0.85, 0.35, 0.2];

/// A ray-cast sphere seen by a ring of cameras, with splats placed on its
/// surface as the starting point for fitting.
#[derive(Debug, Clone)]
pub struct SphereFixture {
    pub scene: SyntheticScene,
    /// World-frame cameras, view 0 is the main view.
    pub cameras: Vec<(Pose, CameraIntrinsics)>,
    /// Supervision in the normalized main-view frame.
    pub views: Vec<SupervisionView>,
    pub init: GaussianSplatSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereFixtureSpec {
    pub splats: usize,
    pub views: usize,
    pub size: usize,
    pub sphere_radius: f64,
    /// Initial colour of every splat.
    pub init_color: [f64; 3],
    pub init_opacity: f64,
    /// Tangent standard deviation as a multiple of the mean splat spacing.
    pub tangent_scale: f64,
    /// Normal standard deviation as a fraction of the tangent one.
    pub flatness: f64,
    /// Ray samples per pixel side for the supervision images.
    pub supersample: usize,
}

impl Default for SphereFixtureSpec {
    fn default() -> Self {
        SphereFixtureSpec {
            splats: 256,
            views: 8,
            size: 64,
            sphere_radius: 1.0,
            init_color: [0.5, 0.5, 0.5],
            init_opacity: 0.8,
            tangent_scale: 0.6,
            flatness: 0.2,
            supersample: 4,
        }
    }
}

/// Quaternion (`w x y z`) that turns the local z axis onto `n`.
pub fn quat_z_to(n: &Vector3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::rotation_between(&Vector3::z(), n)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    [q.w, q.i, q.j, q.k]
}

pub fn sphere_fixture(spec: &SphereFixtureSpec) -> Result<SphereFixture> {
    let scene = SyntheticScene::sphere(spec.sphere_radius, SPHERE_ALBEDO);
    let upper = spec.views / 2;
    let overrides = RigOverrides {
        width: Some(spec.size),
        height: Some(spec.size),
        rings: Some(vec![(20.0, spec.views - upper), (-15.0, upper)]),
        ..Default::default()
    };
    let (rig, cameras) = make_rig(RigPreset::Desk, &overrides)?;
    let main = cameras[0].0;
    let norm = NormalizationTransform::for_rig(&main, rig.radius)?;
    let views = cameras
        .iter()
        .map(|(pose, k)| {
            Ok(SupervisionView {
                image: raycast_antialiased(&scene, pose, k, spec.supersample)?,
                pose: camera_in_normalized_frame(pose, &main, &norm),
                intrinsics: *k,
            })
        })
        .collect::<Result<_>>()?;

    let area = 4.0 * std::f64::consts::PI * spec.sphere_radius.powi(2);
    let spacing = (area / spec.splats as f64).sqrt() / norm.scale;
    let sigma = spec.tangent_scale * spacing;
    let splats = fibonacci_sphere(spec.splats)
        .into_iter()
        .map(|u| {
            let normal = main.rotation * u;
            GaussianSplat {
                center: norm.apply(&main.transform_point(&(u * spec.sphere_radius))),
                color: Vector3::from(spec.init_color),
                scale: Vector3::new(sigma, sigma, sigma * spec.flatness),
                rotation: quat_z_to(&normal),
                opacity: spec.init_opacity,
            }
        })
        .collect();
    Ok(SphereFixture {
        scene,
        cameras,
        views,
        init: GaussianSplatSet::unaligned(splats, norm),
    })
}

/// The sphere fixture plus duplicates of a subset of splats pushed off the
/// surface along the normal and given a random colour. `conflicted[i]` marks
/// the duplicates; the originals they copy count as clean.
#[derive(Debug, Clone)]
pub struct ConflictFixture {
    pub base: SphereFixture,
    pub conflicted: Vec<bool>,
}

pub fn conflict_fixture(
    spec: &SphereFixtureSpec,
    duplicates: usize,
    offset: f64,
    seed: u64,
) -> Result<ConflictFixture> {
    let mut base = sphere_fixture(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = base.init.len();
    let picks = rand::seq::index::sample(&mut rng, n, duplicates.min(n)).into_vec();
    let center_n = base.init.norm.apply(&base.cameras[0].0.translation);
    let mut conflicted = vec![false; n];
    for i in picks {
        let mut s = base.init.splats[i];
        let dir = (s.center - center_n).normalize();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        s.center += dir * (sign * offset / base.init.norm.scale);
        s.color = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
        base.init.splats.push(s);
        conflicted.push(true);
    }
    Ok(ConflictFixture { base, conflicted })
}
