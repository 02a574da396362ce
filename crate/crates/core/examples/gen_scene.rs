//! Ray-casts a procedural scene from the desk rig and writes colour, depth and
//! mask images.
//!
//! cargo run --example gen_scene -- [seed] [out_dir]

use std::path::PathBuf;

use rcgkit::io::{write_mask_pgm, write_ppm, write_scalar_pfm};
use rcgkit::synth::{make_rig, raycast, RigOverrides, RigPreset, SyntheticScene};

fn main() -> rcgkit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rcgkit_gen_scene"));

    let scene = SyntheticScene::procedural(seed);
    println!("scene {seed}: {} primitives, bounding radius {:.3}", scene.primitives.len(), scene.bounding_radius());

    let (rig, cams) = make_rig(RigPreset::Desk, &RigOverrides::default())?;
    println!("desk rig: {} views at {}x{}, radius {}", cams.len(), rig.width, rig.height, rig.radius);

    for (i, (pose, k)) in cams.iter().enumerate() {
        let (depth, image) = raycast(&scene, pose, k);
        write_ppm(&out.join(format!("image_{i:03}.ppm")), k.width, k.height, &image.rgb)?;
        write_scalar_pfm(&out.join(format!("depth_{i:03}.pfm")), k.width, k.height, &depth.values)?;
        write_mask_pgm(&out.join(format!("mask_{i:03}.pgm")), k.width, k.height, &depth.mask)?;
        if i % 12 == 0 {
            println!("  view {i:2}: {} foreground pixels", depth.foreground_count());
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
