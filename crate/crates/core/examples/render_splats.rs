//! Turns RCMs into pixel-aligned splats, then renders them from a held-out
//! viewpoint.
//!
//! cargo run --release --example render_splats -- [out.ppm]

use std::path::PathBuf;

use rcgkit::io::{write_gaussian_ply, write_ppm, GaussianLayout};
use rcgkit::metrics::{psnr, ssim};
use rcgkit::rcm::{build_rcm, NormalizationTransform};
use rcgkit::splat::{camera_in_normalized_frame, rasterize, rcg_from_rcms, RasterOptions, SplatDefaults};
use rcgkit::synth::{make_rig, raycast, RigOverrides, RigPreset, SyntheticScene};

fn main() -> rcgkit::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("rcgkit_render.ppm"));
    let scene = SyntheticScene::procedural(3);
    let (rig, cams) = make_rig(RigPreset::Desk, &RigOverrides::default())?;
    let pose_main = cams[0].0;
    let norm = NormalizationTransform::for_rig(&pose_main, rig.radius)?;

    // every other view of the middle ring builds splats, the rest are held out
    let inputs: Vec<usize> = (12..24).step_by(2).collect();
    let (mut rcms, mut images) = (Vec::new(), Vec::new());
    for &i in &inputs {
        let (pose, k) = &cams[i];
        let (depth, image) = raycast(&scene, pose, k);
        rcms.push(build_rcm(&depth, pose, &pose_main, k, &norm)?);
        images.push(image);
    }
    // about half a pixel wide; larger splats fatten the silhouette against the
    // white background before any fitting has pulled them in
    let defaults = SplatDefaults {
        scale0: 0.004,
        ..Default::default()
    };
    let set = rcg_from_rcms(&rcms, &images, &defaults)?;
    println!("{} splats from views {inputs:?}", set.len());

    let opts = RasterOptions::default();
    for held in [13, 17, 21] {
        let (pose, k) = &cams[held];
        let gt = raycast(&scene, pose, k).1;
        let cam = camera_in_normalized_frame(pose, &pose_main, &norm);
        let render = rasterize(&set, &cam, k, &opts)?.image;
        println!("held-out view {held}: PSNR {:.2} dB, SSIM {:.4}", psnr(&render, &gt)?, ssim(&render, &gt)?);
        if held == 17 {
            write_ppm(&out, k.width, k.height, &render.rgb)?;
        }
    }
    let ply = out.with_extension("ply");
    write_gaussian_ply(&ply, &set, GaussianLayout::Native)?;
    println!("wrote {} and {}", out.display(), ply.display());
    Ok(())
}
