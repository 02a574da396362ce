//! Command-line pipeline: scene generation, RCM construction, pose solving,
//! splat fitting, rendering and evaluation. Each subcommand writes into its
//! own output directory together with a `manifest.json` of checksums.

use std::ffi::OsString;
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::fit::{fit_rcg, FitConfig, SupervisionView};
use crate::fixtures::SPHERE_ALBEDO;
use crate::geom::{CameraIntrinsics, CameraRecord, DepthMap, ImageRGBA, Pose};
use crate::io;
use crate::metrics::{evaluate_run, EvalOptions, PoseEvalMode};
use crate::pose::{solve_pnp_ransac, RansacConfig};
use crate::rcm::{build_rcm, choose_main_view, rcm_to_pointcloud, FusedPointCloud, NormalizationTransform};
use crate::splat::{camera_in_normalized_frame, rasterize, rcg_from_rcms, RasterOptions, SplatDefaults};
use crate::synth::{make_rig, raycast, raycast_antialiased, sample_surface, RigOverrides, RigPreset, SyntheticScene};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rcgkit", version, about = "Relative coordinate maps and Gaussian splats on synthetic scenes")]
pub struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "desk", value_parser = parse_preset)]
    pub preset: RigPreset,
    /// TOML or JSON pipeline configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_preset(s: &str) -> Result<RigPreset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ray-cast a synthetic scene from every rig camera.
    GenScene(GenSceneArgs),
    /// Build relative coordinate maps, the fused cloud and initial splats.
    BuildRcm(BuildRcmArgs),
    /// Recover every camera from its RCM with PnP and RANSAC.
    SolvePose(SolvePoseArgs),
    /// Fit a Gaussian PLY to posed images.
    FitRcg(FitRcgArgs),
    /// Render a Gaussian PLY from a camera file.
    Render(RenderArgs),
    /// Score renders, poses and point clouds against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `sphere`, `procedural` (seeded) or a scene JSON file.
    #[arg(long, default_value = "procedural")]
    pub scene: String,
    /// Ray samples per pixel side for the colour images.
    #[arg(long)]
    pub supersample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildRcmArgs {
    /// Directory written by `gen-scene`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Main view; drawn from the seed when absent.
    #[arg(long)]
    pub main: Option<usize>,
    /// Keep every n-th foreground pixel of each view as an initial splat.
    #[arg(long)]
    pub splat_stride: Option<usize>,
    /// Write splats in the community 3DGS layout (log scales, logit
    /// opacity, DC spherical-harmonic colour) instead of the native one.
    #[arg(long)]
    pub community_ply: bool,
}

#[derive(Debug, Args)]
pub struct SolvePoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `build-rcm`.
    #[arg(long)]
    pub rcm: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Inlier threshold in pixels.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Score against the main view only instead of all view pairs.
    #[arg(long)]
    pub anchored: bool,
}

#[derive(Debug, Args)]
pub struct FitRcgArgs {
    /// Initial Gaussian PLY.
    #[arg(long)]
    pub init: PathBuf,
    /// Directory with `image_NNN.ppm` (and `alpha_NNN.pfm` or `mask_NNN.pgm`).
    #[arg(long)]
    pub data: PathBuf,
    /// World-frame camera JSON; defaults to `<data>/cameras.json`.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// `frame.json` written by `build-rcm`.
    #[arg(long)]
    pub frame: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Write splats in the community 3DGS layout (log scales, logit
    /// opacity, DC spherical-harmonic colour) instead of the native one.
    #[arg(long)]
    pub community_ply: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ply: PathBuf,
    /// World-frame camera JSON.
    #[arg(long)]
    pub cameras: PathBuf,
    /// Maps world cameras into the splats' frame; without it the cameras are
    /// used as given.
    #[arg(long)]
    pub frame: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory with `render_NNN.ppm`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth directory written by `gen-scene`.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted world-frame camera JSON.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Predicted point cloud in the frame of `--frame`.
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    #[arg(long)]
    pub frame: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `report.csv` with one row per view.
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub anchored: bool,
}

/// Settings shared by every subcommand; every field is optional in the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rig: RigOverrides,
    /// Ray samples per pixel side for generated colour images.
    pub supersample: Option<usize>,
    /// Surface sample spacing for the ground-truth cloud, scene units.
    pub surface_spacing: Option<f64>,
    pub ransac: RansacConfig,
    pub splat: SplatDefaults,
    pub splat_stride: Option<usize>,
    pub fit: FitConfig,
    pub raster: RasterOptions,
}

/// Main view and normalization shared by the RCMs and splats of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub main_view: usize,
    /// World-to-camera matrix of the main view, row-major 4x4.
    pub main_world_to_cam: [f64; 16],
    pub norm: NormalizationTransform,
}

impl Frame {
    pub fn main_pose(&self) -> crate::Result<Pose> {
        Pose::from_row_major(&self.main_world_to_cam)
    }

    /// A world-frame camera expressed against the normalized main frame.
    pub fn camera(&self, world_to_cam: &Pose) -> crate::Result<Pose> {
        Ok(camera_in_normalized_frame(world_to_cam, &self.main_pose()?, &self.norm))
    }

    /// A world point in the normalized main frame.
    pub fn point(&self, world: &Vector3<f64>) -> crate::Result<Vector3<f64>> {
        Ok(self.norm.apply(&self.main_pose()?.transform_point(world)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Record of one subcommand run. Wall-clock times go to `timings.json` so
/// that this file is byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub preset: RigPreset,
    pub config_hash: String,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub command: String,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseViewReport {
    pub view: usize,
    pub inliers: usize,
    pub mean_reproj_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub main_view: usize,
    pub views: Vec<PoseViewReport>,
    pub metrics: crate::metrics::PoseMetrics,
}

/// Why a run stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Run(e) => exit_code(e),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Run(e) => {
                write!(f, "{e}")?;
                let mut src = std::error::Error::source(e);
                while let Some(s) = src {
                    write!(f, ": {s}")?;
                    src = s.source();
                }
                Ok(())
            }
        }
    }
}

/// Numerical failures exit with 3, everything else with 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) | Error::Degenerate(_) | Error::NoConsensus { .. } | Error::BehindCamera { .. } => {
            EXIT_NUMERICAL
        }
        _ => EXIT_DATA,
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut ctx = Context::new(cli)?;
    let start = Instant::now();
    match &cli.command {
        Command::GenScene(a) => gen_scene(&mut ctx, a)?,
        Command::BuildRcm(a) => build_rcm_cmd(&mut ctx, a)?,
        Command::SolvePose(a) => solve_pose(&mut ctx, a)?,
        Command::FitRcg(a) => fit_rcg_cmd(&mut ctx, a)?,
        Command::Render(a) => render(&mut ctx, a)?,
        Command::Evaluate(a) => evaluate(&mut ctx, a)?,
    }
    ctx.finish(start.elapsed().as_secs_f64())?;
    Ok(())
}

struct Context {
    command: &'static str,
    seed: u64,
    preset: RigPreset,
    config: PipelineConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, Failure> {
        let mut config: PipelineConfig = match &cli.config {
            Some(p) => io::read_config(p)?,
            None => PipelineConfig::default(),
        };
        config.ransac.seed = cli.seed;
        config.fit.rng_seed = cli.seed;
        let (command, out) = match &cli.command {
            Command::GenScene(a) => {
                if a.supersample.is_some() {
                    config.supersample = a.supersample;
                }
                ("gen-scene", &a.out)
            }
            Command::BuildRcm(a) => {
                if a.splat_stride.is_some() {
                    config.splat_stride = a.splat_stride;
                }
                ("build-rcm", &a.out)
            }
            Command::SolvePose(a) => {
                if let Some(t) = a.threshold {
                    config.ransac.inlier_threshold = t;
                }
                ("solve-pose", &a.out)
            }
            Command::FitRcg(a) => {
                if let Some(n) = a.iterations {
                    config.fit.iterations = n;
                }
                ("fit-rcg", &a.out)
            }
            Command::Render(a) => ("render", &a.out),
            Command::Evaluate(a) => ("evaluate", &a.out),
        };
        let mut ctx = Context {
            command,
            seed: cli.seed,
            preset: cli.preset,
            config,
            out: out.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        if let Some(p) = &cli.config {
            ctx.inputs.push(p.clone());
        }
        Ok(ctx)
    }

    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn config_hash(&self) -> Result<String, Failure> {
        #[derive(Serialize)]
        struct Hashed<'a> {
            seed: u64,
            preset: RigPreset,
            config: &'a PipelineConfig,
        }
        let bytes = serde_json::to_vec(&Hashed {
            seed: self.seed,
            preset: self.preset,
            config: &self.config,
        })
        .map_err(|e| Failure::Run(Error::Numerical(format!("config is not serializable: {e}"))))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    fn entries(&self, paths: &[PathBuf]) -> Result<Vec<FileEntry>, Failure> {
        let mut entries = paths
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                Ok(FileEntry {
                    path: relative_to(p, &self.out),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        entries.dedup();
        Ok(entries)
    }

    fn finish(self, wall_clock_s: f64) -> Result<(), Failure> {
        let manifest = PipelineManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.to_string(),
            seed: self.seed,
            preset: self.preset,
            config_hash: self.config_hash()?,
            inputs: self.entries(&self.inputs)?,
            outputs: self.entries(&self.outputs)?,
        };
        io::write_json(&self.out.join("manifest.json"), &manifest)?;
        io::write_json(
            &self.out.join("timings.json"),
            &Timings {
                command: self.command.to_string(),
                wall_clock_s,
            },
        )?;
        Ok(())
    }
}

/// `path` relative to `base` (both made absolute first), `/`-separated.
fn relative_to(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    let pc: Vec<Component> = p.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = pc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".to_string(); bc.len() - common];
    parts.extend(pc[common..].iter().map(|c| c.as_os_str().to_string_lossy().into_owned()));
    parts.join("/")
}

fn view_file(prefix: &str, i: usize, ext: &str) -> String {
    format!("{prefix}_{i:03}.{ext}")
}

fn read_cameras(ctx: &mut Context, path: &Path) -> Result<Vec<(Pose, CameraIntrinsics)>, Failure> {
    let records: Vec<CameraRecord> = io::read_json(&ctx.input(path))?;
    if records.is_empty() {
        return Err(Error::format(path, "camera JSON array", "no cameras").into());
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let k = r.intrinsics();
            let p = r.pose();
            match (p, k) {
                (Ok(p), Ok(k)) => Ok((p, k)),
                (Err(e), _) | (_, Err(e)) => {
                    Err(Error::format(path, "camera JSON array", format!("camera {i}: {e}")).into())
                }
            }
        })
        .collect()
}

fn write_cameras(ctx: &mut Context, name: &str, cams: &[(Pose, CameraIntrinsics)]) -> CmdResult {
    let records: Vec<CameraRecord> = cams.iter().map(|(p, k)| CameraRecord::new(p, k)).collect();
    io::write_json(&ctx.output(name), &records)?;
    Ok(())
}

/// Colour image of view `i` with alpha from `alpha_NNN.pfm`, else the mask,
/// else opaque wherever the colour is not white.
fn read_view_image(ctx: &mut Context, dir: &Path, prefix: &str, i: usize, k: &CameraIntrinsics) -> Result<ImageRGBA, Failure> {
    let path = ctx.input(&dir.join(view_file(prefix, i, "ppm")));
    let (w, h, rgb) = io::read_ppm(&path)?;
    if (w, h) != (k.width, k.height) {
        return Err(Error::format(&path, "image matching its camera", format!("{w}x{h} vs {}x{}", k.width, k.height)).into());
    }
    let mut image = ImageRGBA {
        width: w,
        height: h,
        rgb,
        alpha: vec![0.0; w * h],
    };
    let alpha_path = dir.join(view_file("alpha", i, "pfm"));
    let mask_path = dir.join(view_file("mask", i, "pgm"));
    if prefix == "image" && alpha_path.exists() {
        image.alpha = io::read_scalar_pfm(&ctx.input(&alpha_path), w, h)?;
    } else if prefix == "image" && mask_path.exists() {
        let (_, _, m) = io::read_mask_pgm(&ctx.input(&mask_path))?;
        image.alpha = m.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
    } else {
        image.alpha = crate::pose::non_white_mask(&image).iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
    }
    Ok(image)
}

fn gen_scene(ctx: &mut Context, a: &GenSceneArgs) -> CmdResult {
    let scene = match a.scene.as_str() {
        "sphere" => SyntheticScene::sphere(1.0, SPHERE_ALBEDO),
        "procedural" => SyntheticScene::procedural(ctx.seed),
        path => {
            let p = ctx.input(Path::new(path));
            let s: SyntheticScene = io::read_json(&p)?;
            s.validate().map_err(|e| Error::format(&p, "scene JSON", e.to_string()))?;
            s
        }
    };
    let supersample = ctx.config.supersample.unwrap_or(1);
    if supersample == 0 {
        return Err(Failure::Usage("supersample must be at least 1".into()));
    }
    let (rig, cams) = make_rig(ctx.preset, &ctx.config.rig)?;
    let (w, h) = (rig.width, rig.height);
    for (i, (pose, k)) in cams.iter().enumerate() {
        let (depth, mut image) = raycast(&scene, pose, k);
        if supersample > 1 {
            image = raycast_antialiased(&scene, pose, k, supersample)?;
        }
        io::write_ppm(&ctx.output(&view_file("image", i, "ppm")), w, h, &image.rgb)?;
        io::write_scalar_pfm(&ctx.output(&view_file("alpha", i, "pfm")), w, h, &image.alpha)?;
        io::write_mask_pgm(&ctx.output(&view_file("mask", i, "pgm")), w, h, &depth.mask)?;
        io::write_scalar_pfm(&ctx.output(&view_file("depth", i, "pfm")), w, h, &depth.values)?;
    }
    write_cameras(ctx, "cameras.json", &cams)?;
    io::write_json(&ctx.output("scene.json"), &scene)?;
    io::write_json(&ctx.output("rig.json"), &rig)?;
    let spacing = ctx.config.surface_spacing.unwrap_or(0.02);
    if !(spacing > 0.0) {
        return Err(Failure::Usage("surface_spacing must be positive".into()));
    }
    let surface = FusedPointCloud {
        points: sample_surface(&scene, spacing)
            .iter()
            .map(|p| [p.x, p.y, p.z, 0.5, 0.5, 0.5])
            .collect(),
    };
    io::write_point_cloud_ply(&ctx.output("surface.ply"), &surface)?;
    Ok(())
}

fn read_depth(ctx: &mut Context, dir: &Path, i: usize, k: &CameraIntrinsics) -> Result<DepthMap, Failure> {
    let values = io::read_scalar_pfm(&ctx.input(&dir.join(view_file("depth", i, "pfm"))), k.width, k.height)?;
    let mask_path = ctx.input(&dir.join(view_file("mask", i, "pgm")));
    let (w, h, mask) = io::read_mask_pgm(&mask_path)?;
    if (w, h) != (k.width, k.height) {
        return Err(Error::format(&mask_path, "mask matching its camera", format!("{w}x{h}")).into());
    }
    let values = values.iter().zip(&mask).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
    let d = DepthMap {
        width: w,
        height: h,
        values,
        mask,
    };
    d.validate().map_err(|e| Error::format(&mask_path, "depth map", e.to_string()))?;
    Ok(d)
}

fn build_rcm_cmd(ctx: &mut Context, a: &BuildRcmArgs) -> CmdResult {
    let cams = read_cameras(ctx, &a.data.join("cameras.json"))?;
    let main = match a.main {
        Some(m) if m >= cams.len() => {
            return Err(Failure::Usage(format!("--main {m} is out of range for {} views", cams.len())))
        }
        Some(m) => m,
        None => choose_main_view(cams.len(), ctx.seed)?,
    };
    let pose_main = cams[main].0;
    let radius = cams.iter().map(|(p, _)| p.center().norm()).fold(0.0, f64::max);
    let norm = NormalizationTransform::for_rig(&pose_main, radius)?;
    let mut rcms = Vec::with_capacity(cams.len());
    let mut images = Vec::with_capacity(cams.len());
    for (i, (pose, k)) in cams.iter().enumerate() {
        let depth = read_depth(ctx, &a.data, i, k)?;
        let rcm = build_rcm(&depth, pose, &pose_main, k, &norm).map_err(|e| match e {
            Error::OutOfRange { .. } => Error::Numerical(format!("view {i}: {e}")),
            other => other,
        })?;
        io::write_rcm(
            &ctx.output(&view_file("rcm", i, "pfm")),
            &ctx.output(&view_file("rcm_mask", i, "pgm")),
            &rcm,
        )?;
        images.push(read_view_image(ctx, &a.data, "image", i, k)?);
        rcms.push(rcm);
    }
    let frame = Frame {
        main_view: main,
        main_world_to_cam: pose_main.to_row_major(),
        norm,
    };
    io::write_json(&ctx.output("frame.json"), &frame)?;
    io::write_point_cloud_ply(&ctx.output("fused.ply"), &rcm_to_pointcloud(&rcms, &images)?)?;

    let stride = ctx.config.splat_stride.unwrap_or(1);
    if stride == 0 {
        return Err(Failure::Usage("splat stride must be at least 1".into()));
    }
    let mut set = rcg_from_rcms(&rcms, &images, &ctx.config.splat)?;
    set.splats = set.splats.into_iter().step_by(stride).collect();
    set.provenance = set.provenance.map(|p| p.into_iter().step_by(stride).collect());
    io::write_gaussian_ply(&ctx.output("rcg_init.ply"), &set, ply_layout(a.community_ply))?;
    Ok(())
}

fn ply_layout(community: bool) -> io::GaussianLayout {
    if community {
        io::GaussianLayout::Community
    } else {
        io::GaussianLayout::Native
    }
}

fn solve_pose(ctx: &mut Context, a: &SolvePoseArgs) -> CmdResult {
    let cams = read_cameras(ctx, &a.data.join("cameras.json"))?;
    let frame: Frame = io::read_json(&ctx.input(&a.rcm.join("frame.json")))?;
    if frame.main_view >= cams.len() {
        return Err(Error::format(a.rcm.join("frame.json"), "frame JSON", "main view out of range").into());
    }
    let pose_main = frame.main_pose()?;
    let mut estimates = Vec::with_capacity(cams.len());
    let mut views = Vec::with_capacity(cams.len());
    for (i, (_, k)) in cams.iter().enumerate() {
        let rcm = io::read_rcm(
            &ctx.input(&a.rcm.join(view_file("rcm", i, "pfm"))),
            &ctx.input(&a.rcm.join(view_file("rcm_mask", i, "pgm"))),
            frame.norm,
        )?;
        let est = solve_pnp_ransac(&rcm, k, &ctx.config.ransac).map_err(|e| match e {
            Error::NoConsensus { .. } | Error::Degenerate(_) | Error::BehindCamera { .. } => {
                Error::Numerical(format!("view {i}: {e}"))
            }
            other => other,
        })?;
        views.push(PoseViewReport {
            view: i,
            inliers: est.inliers.len(),
            mean_reproj_error: est.mean_reproj_error,
        });
        // relative to the main camera; anchor it at the main camera's world pose
        estimates.push((est.pose.compose(&pose_main), *k));
    }
    write_cameras(ctx, "poses.json", &estimates)?;
    let pred: Vec<Pose> = estimates.iter().map(|(p, _)| *p).collect();
    let gt: Vec<Pose> = cams.iter().map(|(p, _)| *p).collect();
    let mode = if a.anchored { PoseEvalMode::Anchored } else { PoseEvalMode::Pairwise };
    let metrics = crate::metrics::pose_metrics(&pred, &gt, frame.main_view, mode)?;
    io::write_json(
        &ctx.output("pose_report.json"),
        &PoseReport {
            main_view: frame.main_view,
            views,
            metrics,
        },
    )?;
    Ok(())
}

fn fit_rcg_cmd(ctx: &mut Context, a: &FitRcgArgs) -> CmdResult {
    let frame: Frame = io::read_json(&ctx.input(&a.frame))?;
    let init = io::read_gaussian_ply(&ctx.input(&a.init), frame.norm)?;
    let cam_path = a.cameras.clone().unwrap_or_else(|| a.data.join("cameras.json"));
    let cams = read_cameras(ctx, &cam_path)?;
    let mut views = Vec::with_capacity(cams.len());
    for (i, (pose, k)) in cams.iter().enumerate() {
        views.push(SupervisionView {
            image: read_view_image(ctx, &a.data, "image", i, k)?,
            pose: frame.camera(pose)?,
            intrinsics: *k,
        });
    }
    let (fitted, report) = fit_rcg(&init, &views, &ctx.config.fit)?;
    io::write_gaussian_ply(&ctx.output("fitted.ply"), &fitted, ply_layout(a.community_ply))?;
    io::write_json(&ctx.output("fit_report.json"), &report)?;
    Ok(())
}

fn render(ctx: &mut Context, a: &RenderArgs) -> CmdResult {
    let frame: Option<Frame> = match &a.frame {
        Some(p) => Some(io::read_json(&ctx.input(p))?),
        None => None,
    };
    let norm = frame.map(|f| f.norm).unwrap_or_else(NormalizationTransform::identity);
    let set = io::read_gaussian_ply(&ctx.input(&a.ply), norm)?;
    let cams = read_cameras(ctx, &a.cameras)?;
    for (i, (pose, k)) in cams.iter().enumerate() {
        let cam = match &frame {
            Some(f) => f.camera(pose)?,
            None => *pose,
        };
        let view = rasterize(&set, &cam, k, &ctx.config.raster)?;
        io::write_ppm(&ctx.output(&view_file("render", i, "ppm")), k.width, k.height, &view.image.rgb)?;
        io::write_scalar_pfm(
            &ctx.output(&view_file("render_alpha", i, "pfm")),
            k.width,
            k.height,
            &view.image.alpha,
        )?;
    }
    Ok(())
}

fn evaluate(ctx: &mut Context, a: &EvaluateArgs) -> CmdResult {
    let cams = read_cameras(ctx, &a.gt.join("cameras.json"))?;
    let frame: Option<Frame> = match &a.frame {
        Some(p) => Some(io::read_json(&ctx.input(p))?),
        None => None,
    };
    let (mut pred_views, mut gt_views) = (Vec::new(), Vec::new());
    if let Some(pred) = &a.pred {
        for (i, (_, k)) in cams.iter().enumerate() {
            pred_views.push(read_view_image(ctx, pred, "render", i, k)?);
            gt_views.push(read_view_image(ctx, &a.gt, "image", i, k)?);
        }
    }
    let (mut pred_poses, mut gt_poses) = (Vec::new(), Vec::new());
    if let Some(p) = &a.poses {
        let pred = read_cameras(ctx, p)?;
        if pred.len() != cams.len() {
            return Err(Error::format(p, "one camera per ground-truth view", format!("{} cameras", pred.len())).into());
        }
        pred_poses = pred.iter().map(|(p, _)| *p).collect();
        gt_poses = cams.iter().map(|(p, _)| *p).collect();
    }
    let (mut cloud, mut surface) = (Vec::new(), Vec::new());
    if let Some(c) = &a.cloud {
        let f = frame.ok_or_else(|| Failure::Usage("--cloud needs --frame".into()))?;
        cloud = io::read_point_cloud_ply(&ctx.input(c))?.positions();
        let world = io::read_point_cloud_ply(&ctx.input(&a.gt.join("surface.ply")))?.positions();
        surface = world.iter().map(|p| f.point(p)).collect::<crate::Result<_>>()?;
    }
    let opts = EvalOptions {
        main_view: frame.map(|f| f.main_view).unwrap_or(0),
        pose_mode: if a.anchored { PoseEvalMode::Anchored } else { PoseEvalMode::Pairwise },
        perceptual: None,
    };
    let report = evaluate_run(&pred_views, &gt_views, &pred_poses, &gt_poses, &cloud, &surface, &opts)?;
    io::write_json(&ctx.output("report.json"), &report)?;
    if a.csv {
        let mut csv = String::from("view,psnr,ssim\n");
        for (i, v) in report.views.iter().enumerate() {
            csv.push_str(&format!("{i},{},{}\n", v.psnr, v.ssim));
        }
        io::write_atomic(&ctx.output("report.csv"), csv.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        std::fs::write(a.join("x.json"), b"{}").unwrap();
        assert_eq!(relative_to(&a.join("x.json"), &b), "../a/x.json");
        assert_eq!(relative_to(&a.join("x.json"), &a), "x.json");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::NoConsensus { inliers: 1, total: 9 }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::format("f.pfm", "PFM", "bad")), EXIT_DATA);
        assert_eq!(run(["rcgkit", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run(["rcgkit", "gen-scene"]), EXIT_USAGE);
        assert_eq!(run(["rcgkit", "--help"]), EXIT_OK);
    }

    #[test]
    fn config_files_parse_partially() {
        let text = "[rig]\nwidth = 32\nheight = 32\nrings = [[5.0, 4]]\n\n[fit]\niterations = 7\n";
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.rig.width, Some(32));
        assert_eq!(cfg.rig.rings, Some(vec![(5.0, 4)]));
        assert_eq!(cfg.fit.iterations, 7);
        assert_eq!(cfg.fit.lambda_ssim, 0.2);
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
    }
}
