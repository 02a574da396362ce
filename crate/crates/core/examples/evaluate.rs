//! Scores renders, poses and a point cloud against ground truth in one call.
//!
//! cargo run --release --example evaluate

use rcgkit::metrics::{evaluate_run, EvalOptions, PoseEvalMode};
use rcgkit::pose::{solve_pnp_ransac, RansacConfig};
use rcgkit::rcm::{build_rcm, rcm_to_pointcloud, NormalizationTransform};
use rcgkit::splat::{camera_in_normalized_frame, rasterize, rcg_from_rcms, RasterOptions, SplatDefaults};
use rcgkit::synth::{make_rig, raycast, sample_surface, RigOverrides, RigPreset, SyntheticScene};

fn main() -> rcgkit::Result<()> {
    let scene = SyntheticScene::procedural(4);
    let overrides = RigOverrides {
        rings: Some(vec![(-15.0, 4), (20.0, 4)]),
        ..Default::default()
    };
    let (rig, cams) = make_rig(RigPreset::Desk, &overrides)?;
    let main = 0;
    let pose_main = cams[main].0;
    let norm = NormalizationTransform::for_rig(&pose_main, rig.radius)?;

    let (mut rcms, mut images, mut poses) = (Vec::new(), Vec::new(), Vec::new());
    for (pose, k) in &cams {
        let (depth, image) = raycast(&scene, pose, k);
        let rcm = build_rcm(&depth, pose, &pose_main, k, &norm)?;
        let est = solve_pnp_ransac(&rcm, k, &RansacConfig::default())?;
        poses.push(est.pose.compose(&pose_main));
        rcms.push(rcm);
        images.push(image);
    }

    let set = rcg_from_rcms(&rcms, &images, &SplatDefaults { scale0: 0.004, ..Default::default() })?;
    let renders = cams
        .iter()
        .map(|(pose, k)| {
            let cam = camera_in_normalized_frame(pose, &pose_main, &norm);
            Ok(rasterize(&set, &cam, k, &RasterOptions::default())?.image)
        })
        .collect::<rcgkit::Result<Vec<_>>>()?;

    let cloud: Vec<_> = rcm_to_pointcloud(&rcms, &images)?.positions().iter().map(|p| norm.invert(p)).collect();
    let surface: Vec<_> = sample_surface(&scene, 0.02).iter().map(|p| pose_main.transform_point(p)).collect();
    let gt_poses: Vec<_> = cams.iter().map(|(p, _)| *p).collect();

    let opts = EvalOptions {
        main_view: main,
        pose_mode: PoseEvalMode::Pairwise,
        perceptual: None,
    };
    let report = evaluate_run(&renders, &images, &poses, &gt_poses, &cloud, &surface, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
