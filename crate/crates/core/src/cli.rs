//! Command implementations behind the `evsforge` binary.
//!
//! Per-camera files are named `cam_{index:05}`, the index being the line
//! number (from 0) in the camera file.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{make_evs, read_cameras, CameraError, CameraRecord, EvsFamily, EvsLevel, EvsSpec};
use crate::condition::{read_boxes, render_conditions, BoundingBox3D, ConditionError};
use crate::diffusion::{AffineParticle, BlurTargetDenoiser, Denoiser, DiffusionError, RemoteDenoiser, ToyDenoiser};
use crate::fmap::{FloatImage, FmapError};
use crate::grid::{load_grid, GridError, OccupancyGrid, SemanticPalette};
use crate::gsplat::{load_checkpoint, save_checkpoint, CheckpointManifest, GsplatError};
use crate::metrics::{evaluate_dirs, EvalError, EvalReport};
use crate::trainer::{
    init_cloud, render_view, run_stage, train_stage2, Denoisers, EvsView, RunOptions, SeedPoint, StageInputs,
    TrainConfig, TrainError, TrainView,
};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data { .. } | CliError::Eval(_) => EXIT_DATA,
            CliError::Train(TrainError::Config(_) | TrainError::Points { .. }) => EXIT_DATA,
            CliError::Train(_) | CliError::Diffusion(_) | CliError::Io { .. } => EXIT_RUNTIME,
        }
    }
}

fn data<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Data { path: path.to_path_buf(), msg: e.to_string() }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Base name for the camera at `index`.
pub fn view_stem(index: usize) -> String {
    format!("cam_{index:05}")
}

pub struct Scene {
    pub grid: OccupancyGrid,
    pub palette: SemanticPalette,
    pub boxes: Vec<BoundingBox3D>,
}

impl Scene {
    /// Far clip: the grid diagonal.
    pub fn far(&self) -> f64 {
        self.grid.diagonal()
    }
}

pub fn load_palette(path: Option<&Path>) -> Result<SemanticPalette, CliError> {
    match path {
        Some(p) => SemanticPalette::load(p).map_err(|e: GridError| data(p)(e)),
        None => Ok(SemanticPalette::default_urban()),
    }
}

pub fn load_boxes(path: Option<&Path>) -> Result<Vec<BoundingBox3D>, CliError> {
    match path {
        Some(p) => read_boxes(p).map_err(|e: ConditionError| data(p)(e)),
        None => Ok(Vec::new()),
    }
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraRecord>, CliError> {
    read_cameras(path).map_err(|e: CameraError| data(path)(e))
}

pub fn load_scene(grid: &Path, palette: Option<&Path>, boxes: Option<&Path>) -> Result<Scene, CliError> {
    let palette = load_palette(palette)?;
    Ok(Scene {
        grid: load_grid(grid, &palette).map_err(|e: GridError| data(grid)(e))?,
        palette,
        boxes: load_boxes(boxes)?,
    })
}

/// Writes `cam_XXXXX.fmap` (13-channel control signal) plus `_S.png` and
/// `_D.png` previews per camera.
pub fn cmd_render_conditions(scene: &Scene, cameras: &[CameraRecord], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(out).map_err(io_at(out))?;
    let maps: Vec<_> = cameras
        .par_iter()
        .map(|c| render_conditions(&scene.grid, &scene.palette, &scene.boxes, c.frame, &c.intr, &c.pose))
        .collect();
    let mut written = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        let stem = view_stem(i);
        let path = out.join(format!("{stem}.fmap"));
        m.control().save(&path).map_err(io_at(&path))?;
        let s_png = out.join(format!("{stem}_S.png"));
        m.semantic.to_rgb8().save(&s_png).map_err(data(&s_png))?;
        let d_png = out.join(format!("{stem}_D.png"));
        m.depth.to_rgb8().save(&d_png).map_err(data(&d_png))?;
        written.push(path);
    }
    Ok(written)
}

pub fn parse_evs_spec(family: &str, level: &str, yaw_deg: Option<f64>) -> Result<EvsSpec, CliError> {
    let fam = EvsFamily::parse(family).ok_or_else(|| CliError::Usage(format!("unknown EVS family {family:?}")))?;
    let lvl = EvsLevel::parse(level).ok_or_else(|| CliError::Usage(format!("unknown EVS level {level:?}")))?;
    let mut spec = EvsSpec::new(fam, lvl);
    if let Some(y) = yaw_deg {
        spec = spec.with_yaw(y);
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

/// Moves every camera per `spec`, keeping intrinsics and frame.
pub fn cmd_make_evs(cameras: &[CameraRecord], spec: &EvsSpec) -> Result<Vec<CameraRecord>, CliError> {
    let poses: Vec<_> = cameras.iter().map(|c| c.pose).collect();
    let moved = make_evs(&poses, spec).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cameras
        .iter()
        .zip(moved)
        .map(|(c, pose)| CameraRecord { pose, ..*c })
        .collect())
}

/// All nine family/level combinations, family-major.
pub fn default_evs_cameras(cameras: &[CameraRecord]) -> Result<Vec<CameraRecord>, CliError> {
    let mut out = Vec::new();
    for fam in EvsFamily::ALL {
        for lvl in EvsLevel::ALL {
            out.extend(cmd_make_evs(cameras, &EvsSpec::new(fam, lvl))?);
        }
    }
    Ok(out)
}

/// Seeds a cloud and saves it as a stage-0 checkpoint.
pub fn cmd_init(scene: &Scene, points: Option<&[SeedPoint]>, out: &Path) -> Result<CheckpointManifest, CliError> {
    let cloud = init_cloud(&scene.grid, &scene.palette, &scene.boxes, points);
    save_checkpoint(out, &cloud, 0, 0).map_err(|e| gsplat_err(out, e))?;
    Ok(CheckpointManifest::for_cloud(&cloud, 0, 0))
}

fn gsplat_err(path: &Path, e: GsplatError) -> CliError {
    match e {
        GsplatError::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => data(path)(other),
    }
}

fn load_fmap(path: &Path) -> Result<FloatImage, CliError> {
    FloatImage::load(path).map_err(|e: FmapError| data(path)(e))
}

/// Pairs each camera with `views/cam_XXXXX.fmap` and, when given,
/// `normals/cam_XXXXX.fmap`.
pub fn load_training_views(
    cameras: &[CameraRecord],
    views: &Path,
    normals: Option<&Path>,
) -> Result<Vec<TrainView>, CliError> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let name = format!("{}.fmap", view_stem(i));
            let image = load_fmap(&views.join(&name))?;
            let expect = (c.intr.height, c.intr.width, 3);
            if image.shape() != expect {
                let msg = format!("image shape {:?}, camera expects {expect:?}", image.shape());
                return Err(CliError::Data { path: views.join(&name), msg });
            }
            let normal = normals.map(|d| load_fmap(&d.join(&name))).transpose()?;
            Ok(TrainView { intr: c.intr, pose: c.pose, frame: c.frame, image, normal })
        })
        .collect()
}

/// Renders the control signal for each extrapolated camera.
pub fn evs_views(scene: &Scene, cameras: &[CameraRecord]) -> Vec<EvsView> {
    cameras
        .par_iter()
        .map(|c| EvsView {
            intr: c.intr,
            pose: c.pose,
            frame: c.frame,
            cond: render_conditions(&scene.grid, &scene.palette, &scene.boxes, c.frame, &c.intr, &c.pose).control(),
        })
        .collect()
}

/// Builds the image denoiser from `toy`, `tcp:<addr>` or `stdio:<cmd>`.
pub fn open_denoiser(spec: &str, train: &TrainConfig) -> Result<Box<dyn Denoiser>, CliError> {
    if spec == "toy" {
        return Ok(Box::new(ToyDenoiser::new(train.schedule.build()?)));
    }
    if !spec.starts_with("tcp:") && !spec.starts_with("stdio:") {
        return Err(CliError::Usage(format!("denoiser must be toy, tcp:<addr> or stdio:<cmd>, got {spec:?}")));
    }
    Ok(Box::new(RemoteDenoiser::from_spec(spec)?))
}

pub struct DistillArgs<'a> {
    pub config: TrainConfig,
    pub scene: &'a Scene,
    pub cameras: &'a [CameraRecord],
    pub views: &'a [TrainView],
    /// Extrapolated cameras; all nine default sets when `None`.
    pub evs: Option<Vec<CameraRecord>>,
    pub points: Option<&'a [SeedPoint]>,
    pub denoiser: &'a str,
    pub seed: u64,
    pub out: &'a Path,
    pub stage2_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutputs {
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    pub telemetry: PathBuf,
    pub gaussians: usize,
}

/// Runs stage 1 (unless `stage2_only`) and stage 2, writing
/// `out/stage1`, `out/stage2` and `out/telemetry.jsonl`.
pub fn cmd_distill(args: DistillArgs) -> Result<DistillOutputs, CliError> {
    let train = &args.config;
    train.validate()?;
    let out = args.out;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let outputs = DistillOutputs {
        stage1: out.join("stage1"),
        stage2: out.join("stage2"),
        telemetry: out.join("telemetry.jsonl"),
        gaussians: 0,
    };
    let inputs_far = args.scene.far();
    if !args.stage2_only {
        if outputs.telemetry.exists() {
            fs::remove_file(&outputs.telemetry).map_err(io_at(&outputs.telemetry))?;
        }
        let cloud = init_cloud(&args.scene.grid, &args.scene.palette, &args.scene.boxes, args.points);
        let opts = RunOptions { seed: args.seed, checkpoint: Some(&outputs.stage1), telemetry: Some(&outputs.telemetry) };
        let inputs = StageInputs { views: args.views, evs: &[], far: inputs_far };
        run_stage(1, &train.stage1, train, cloud, inputs, None, &opts)?;
    }

    let evs_cams = match args.evs {
        Some(c) => c,
        None => default_evs_cameras(args.cameras)?,
    };
    let evs = evs_views(args.scene, &evs_cams);
    let mut eps_p = open_denoiser(args.denoiser, train)?;
    let mut particle = AffineParticle::new(3, train.distill.particle_lr);
    let mut geometry = BlurTargetDenoiser::new(train.schedule.build()?);
    let mut den = Denoisers { eps_p: eps_p.as_mut(), particle: &mut particle, geometry: Some(&mut geometry) };
    let opts = RunOptions { seed: args.seed, checkpoint: Some(&outputs.stage2), telemetry: Some(&outputs.telemetry) };
    let inputs = StageInputs { views: args.views, evs: &evs, far: inputs_far };
    let cloud = train_stage2(&outputs.stage1, &args.scene.boxes, inputs, &mut den, train, &opts)?;
    Ok(DistillOutputs { gaussians: cloud.len(), ..outputs })
}

/// Scores renders against ground truth and writes the JSON report to `out`.
pub fn cmd_eval(renders: &Path, gt: &Path, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let report = evaluate_dirs(renders, gt)?;
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(p, text + "\n").map_err(io_at(p))?;
    }
    Ok(report)
}

/// Renders a checkpoint at every camera: `cam_XXXXX.fmap` (color) plus
/// `depth/cam_XXXXX.fmap` and `png/cam_XXXXX.png`.
pub fn cmd_export_images(
    checkpoint: &Path,
    boxes: &[BoundingBox3D],
    cameras: &[CameraRecord],
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let (cloud, _) = load_checkpoint(checkpoint, boxes).map_err(|e| gsplat_err(checkpoint, e))?;
    for d in [out.to_path_buf(), out.join("depth"), out.join("png")] {
        fs::create_dir_all(&d).map_err(io_at(&d))?;
    }
    let renders: Vec<_> = cameras
        .par_iter()
        .map(|c| render_view(&cloud, c.frame, &c.intr, &c.pose))
        .collect::<Result<_, _>>()?;
    let mut written = Vec::with_capacity(renders.len());
    for (i, r) in renders.iter().enumerate() {
        let stem = view_stem(i);
        let path = out.join(format!("{stem}.fmap"));
        r.color.save(&path).map_err(io_at(&path))?;
        let depth = out.join("depth").join(format!("{stem}.fmap"));
        r.depth.save(&depth).map_err(io_at(&depth))?;
        let png = out.join("png").join(format!("{stem}.png"));
        r.color.to_rgb8().save(&png).map_err(data(&png))?;
        written.push(path);
    }
    Ok(written)
}

/// Caps rayon's global pool from `EVSFORGE_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("EVSFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("EVSFORGE_THREADS must be a positive integer, got {v:?}")))?;
    // A pool already built by an earlier call keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
