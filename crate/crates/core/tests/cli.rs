use std::path::Path;
use std::process::{Command, Output};

use rcgkit::cli::{PipelineManifest, PoseReport};
use rcgkit::geom::CameraRecord;
use rcgkit::pose::rotation_error_deg;

const SMALL: &str = "[rig]\nwidth = 32\nheight = 32\nrings = [[-15.0, 2], [20.0, 2]]\n\n[fit]\niterations = 3\n";

fn rcgkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcgkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_scene(root: &Path) -> std::path::PathBuf {
    let cfg = root.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");
    let out = rcgkit(&["--seed", "3", "--config", s(&cfg), "gen-scene", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(rcgkit(&[]).status.code(), Some(1));
    assert_eq!(rcgkit(&["render"]).status.code(), Some(1));
    assert_eq!(rcgkit(&["--preset", "huge", "gen-scene", "--out", "x"]).status.code(), Some(1));
    assert_eq!(rcgkit(&["--threads", "0", "gen-scene", "--out", "x"]).status.code(), Some(1));
    assert_eq!(rcgkit(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_input_exits_2_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scene(dir.path());
    let depth = data.join("depth_001.pfm");
    std::fs::write(&depth, b"PF\n32 32\n-1.0\nshort").unwrap();
    let out = rcgkit(&["build-rcm", "--data", s(&data), "--out", s(&dir.path().join("rcm"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("depth_001.pfm"), "{stderr}");
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = rcgkit(&["build-rcm", "--data", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[fit]\niteration = 4\n").unwrap();
    let out = rcgkit(&["--config", s(&cfg), "gen-scene", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_pose_recovers_the_rig() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scene(dir.path());
    let rcm = dir.path().join("rcm");
    let pose = dir.path().join("pose");
    assert!(rcgkit(&["build-rcm", "--data", s(&data), "--out", s(&rcm), "--main", "2"]).status.success());
    let out = rcgkit(&["solve-pose", "--data", s(&data), "--rcm", s(&rcm), "--out", s(&pose)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: PoseReport = serde_json::from_slice(&std::fs::read(pose.join("pose_report.json")).unwrap()).unwrap();
    assert_eq!(report.main_view, 2);
    assert!(report.metrics.median_rotation_error_deg < 1e-3);
    assert_eq!(report.metrics.acc_at_15, 1.0);

    let read = |p: &Path| -> Vec<CameraRecord> { serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap() };
    let est = read(&pose.join("poses.json"));
    let gt = read(&data.join("cameras.json"));
    assert_eq!(est.len(), gt.len());
    // the main view is solved like any other and lands on its known pose
    let (e, g) = (est[2].pose().unwrap(), gt[2].pose().unwrap());
    assert!(rotation_error_deg(&e, &g) < 1e-6);
    assert!((e.translation - g.translation).norm() < 1e-6);
    for (e, g) in est.iter().zip(&gt) {
        assert!(rotation_error_deg(&e.pose().unwrap(), &g.pose().unwrap()) < 1e-3);
    }
}

#[test]
fn manifest_lists_relative_outputs_with_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scene(dir.path());
    let m: PipelineManifest = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, 3);
    assert!(m.outputs.iter().any(|f| f.path == "cameras.json"));
    for f in &m.outputs {
        assert!(!Path::new(&f.path).is_absolute());
        assert_eq!(f.sha256.len(), 64);
        assert!(data.join(&f.path).exists());
    }
    assert!(data.join("timings.json").exists());
}

#[test]
fn community_layout_renders_like_the_native_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_scene(dir.path());
    let (native, community) = (dir.path().join("native"), dir.path().join("community"));
    assert!(rcgkit(&["build-rcm", "--data", s(&data), "--out", s(&native)]).status.success());
    assert!(rcgkit(&["build-rcm", "--data", s(&data), "--out", s(&community), "--community-ply"]).status.success());
    let header = std::fs::read(community.join("rcg_init.ply")).unwrap();
    assert!(String::from_utf8_lossy(&header[..400]).contains("property float f_dc_0"));

    let render = |rcm: &Path| {
        let out = rcm.join("render");
        let (ply, cams, frame) = (rcm.join("rcg_init.ply"), data.join("cameras.json"), rcm.join("frame.json"));
        let args = ["render", "--ply", s(&ply), "--cameras", s(&cams), "--frame", s(&frame), "--out", s(&out)];
        assert!(rcgkit(&args).status.success());
        let (_, _, rgb) = rcgkit::io::read_ppm(&out.join("render_001.ppm")).unwrap();
        rgb
    };
    let (a, b) = (render(&native), render(&community));
    // float32 storage of log/logit values moves colours by at most a count
    let worst = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0 + 1e-12, "{worst}");
}
