//! Recovers every camera of the rig relative to the main view from its RCM,
//! with and without corrupted correspondences.
//!
//! cargo run --release --example pose_recovery -- [seed]

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rcgkit::metrics::{pose_metrics_from_errors};
use rcgkit::pose::{
    rcm_correspondences, rotation_error_deg, solve_pnp_ransac, solve_pnp_ransac_correspondences, translation_error,
    RansacConfig,
};
use rcgkit::rcm::{build_rcm, choose_main_view, NormalizationTransform};
use rcgkit::synth::{make_rig, raycast, RigOverrides, RigPreset, SyntheticScene};

fn main() -> rcgkit::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let scene = SyntheticScene::procedural(seed);
    let (rig, cams) = make_rig(RigPreset::Desk, &RigOverrides::default())?;
    let main = choose_main_view(cams.len(), seed)?;
    let pose_main = cams[main].0;
    let norm = NormalizationTransform::for_rig(&pose_main, rig.radius)?;
    let cfg = RansacConfig::default();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let (mut clean_rot, mut clean_trans) = (Vec::new(), Vec::new());
    let (mut noisy_rot, mut noisy_trans) = (Vec::new(), Vec::new());
    for (pose, k) in &cams {
        let depth = raycast(&scene, pose, k).0;
        let rcm = build_rcm(&depth, pose, &pose_main, k, &norm)?;
        let gt = pose.compose(&pose_main.inverse());

        let est = solve_pnp_ransac(&rcm, k, &cfg)?;
        clean_rot.push(rotation_error_deg(&est.pose, &gt));
        clean_trans.push(translation_error(&est.pose, &gt));

        // half a pixel of jitter everywhere and one correspondence in five replaced
        let mut corrs = rcm_correspondences(&rcm);
        for c in &mut corrs {
            c.pixel += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            if rng.random_bool(0.2) {
                c.pixel = Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
            }
        }
        let est = solve_pnp_ransac_correspondences(&corrs, k, &cfg)?;
        noisy_rot.push(rotation_error_deg(&est.pose, &gt));
        noisy_trans.push(translation_error(&est.pose, &gt));
    }

    for (name, rot, trans) in [("noiseless", clean_rot, clean_trans), ("noisy + outliers", noisy_rot, noisy_trans)] {
        let m = pose_metrics_from_errors(rot, trans)?;
        println!(
            "{name:>16}: median rotation {:.2e} deg, median translation {:.2e}, acc@15 {:.2}, acc@30 {:.2}",
            m.median_rotation_error_deg, m.median_translation_error, m.acc_at_15, m.acc_at_30
        );
    }
    Ok(())
}
