//! Two-stage optimization of a Gaussian cloud.
//!
//! Stage 1 fits the training views with the reconstruction loss only.
//! Stage 2 starts from a stage-1 checkpoint and, on each step, either fits a
//! training view or injects distillation gradients rendered at an
//! extrapolated camera.
//!
//! Every random draw comes from a stream keyed by `(seed, step, purpose)`,
//! so runs replay bit-exactly and changing one consumer never shifts
//! another's draws.

mod adam;
mod config;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::condition::BoundingBox3D;
use crate::diffusion::{Denoiser, GeometryDenoiser, ParticleDenoiser};
use crate::fmap::FloatImage;
use crate::grid::{OccupancyGrid, SemanticPalette};
use crate::gsplat::densify::reset_opacity;
use crate::gsplat::{
    compose_scene, densify_and_prune, load_checkpoint, logit, rasterize_backward, rasterize_with_state, save_checkpoint,
    Gaussian, GaussianCloud, GaussianGrad, GradStats, GsplatError, Instance, RenderGrads, RenderOutputs,
    PARAMS_PER_GAUSSIAN,
};
use crate::losses::{g_sds_grad, hsg_vsd_grad, recon_loss, total_step_loss, LossError, TelemetryRecord, TelemetryWriter};

pub use adam::Adam;
pub use config::{DistillConfig, ScheduleConfig, StageConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value detected at step {step}")]
    NaNDetected { step: u64 },
    #[error("stage 2 needs a stage-1 checkpoint at {0}")]
    MissingStage1Checkpoint(PathBuf),
    #[error("no training views")]
    NoViews,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad point file line {line}: {msg}")]
    Points { line: usize, msg: String },
    #[error(transparent)]
    Gsplat(#[from] GsplatError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Initial opacity of seeded Gaussians.
pub const INIT_OPACITY: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub intr: CameraIntrinsics,
    pub pose: CameraPose,
    pub frame: u32,
    pub image: FloatImage,
    pub normal: Option<FloatImage>,
}

/// An extrapolated camera with its packed 13-channel control signal.
#[derive(Clone, Debug, PartialEq)]
pub struct EvsView {
    pub intr: CameraIntrinsics,
    pub pose: CameraPose,
    pub frame: u32,
    pub cond: FloatImage,
}

pub struct Denoisers<'a> {
    pub eps_p: &'a mut dyn Denoiser,
    pub particle: &'a mut dyn ParticleDenoiser,
    pub geometry: Option<&'a mut dyn GeometryDenoiser>,
}

#[derive(Clone, Copy, Debug)]
pub struct StageInputs<'a> {
    pub views: &'a [TrainView],
    pub evs: &'a [EvsView],
    /// Far clip used to normalize depth for geometry distillation.
    pub far: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    pub seed: u64,
    pub checkpoint: Option<&'a Path>,
    pub telemetry: Option<&'a Path>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    View = 1,
    EvsCoin = 2,
    Distill = 3,
    Densify = 4,
}

/// Independent generator for one `(seed, step, purpose)` triple.
pub fn rng_stream(seed: u64, step: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
}

/// Reads `x y z r g b` lines (colors in `[0, 1]`); `#` starts a comment.
pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<SeedPoint>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let err = |msg: &str| TrainError::Points { line: i + 1, msg: msg.to_owned() };
        let vals = vals.map_err(|e| err(&e.to_string()))?;
        if vals.len() != 6 || vals.iter().any(|v| !v.is_finite()) {
            return Err(err("expected six finite numbers"));
        }
        out.push(SeedPoint {
            position: Vector3::new(vals[0], vals[1], vals[2]),
            color: Vector3::new(vals[3], vals[4], vals[5]),
        });
    }
    Ok(out)
}

/// One isotropic Gaussian per occupied voxel center (or per seed point when
/// given). Gaussians inside a box at frame 0 move to that box's instance
/// set, expressed in box coordinates; the lowest box id wins on overlap.
pub fn init_cloud(
    grid: &OccupancyGrid,
    palette: &SemanticPalette,
    boxes: &[BoundingBox3D],
    points: Option<&[SeedPoint]>,
) -> GaussianCloud {
    let scale = grid.voxel_size / 2.0;
    let seeds: Vec<SeedPoint> = match points {
        Some(p) => p.to_vec(),
        None => grid
            .occupied()
            .map(|([i, j, k], label)| SeedPoint {
                position: grid.voxel_center(i, j, k),
                color: Vector3::from(palette.color(label)),
            })
            .collect(),
    };
    let mut sorted: Vec<&BoundingBox3D> = boxes.iter().collect();
    sorted.sort_by_key(|b| b.id);
    let mut cloud = GaussianCloud::from_static(Vec::new());
    for b in &sorted {
        cloud.instances.insert(
            b.id,
            Instance {
                gaussians: Vec::new(),
                bbox: (*b).clone(),
            },
        );
    }
    for s in seeds {
        let g = Gaussian::isotropic(s.position, scale, INIT_OPACITY, s.color);
        let owner = sorted
            .iter()
            .find_map(|b| b.pose_at(0).filter(|pose| b.contains(pose, &s.position)).map(|pose| (b.id, pose)));
        match owner {
            Some((id, pose)) => {
                let local = Gaussian {
                    mean: pose.to_box(&s.position),
                    ..g
                };
                cloud.instances.get_mut(&id).expect("instance exists").gaussians.push(local);
            }
            None => cloud.static_set.push(g),
        }
    }
    debug_assert!((logit(INIT_OPACITY) - cloud.iter().next().map_or(logit(INIT_OPACITY), |g| g.opacity_logit)).abs() < 1e-12);
    cloud
}

/// Renders the cloud at `frame` from one camera.
pub fn render_view(
    cloud: &GaussianCloud,
    frame: u32,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<RenderOutputs, TrainError> {
    let scene = compose_scene(cloud, frame)?;
    Ok(crate::gsplat::rasterize(&scene.gaussians, intr, pose))
}

fn cloud_params(cloud: &GaussianCloud) -> Vec<GaussianGrad> {
    cloud.iter().map(Gaussian::to_params).collect()
}

fn set_cloud_params(cloud: &mut GaussianCloud, params: &[GaussianGrad]) {
    for (g, p) in cloud.iter_mut().zip(params) {
        *g = Gaussian::from_params(p);
    }
}

fn learning_rates(cfg: &StageConfig, step: u64) -> [f64; PARAMS_PER_GAUSSIAN] {
    let mut lr = [0.0; PARAMS_PER_GAUSSIAN];
    lr[0..3].fill(cfg.mean_lr_at(step));
    lr[3..6].fill(cfg.lr_scales);
    lr[6..10].fill(cfg.lr_rot);
    lr[10] = cfg.lr_opacity;
    lr[11..14].fill(cfg.lr_color);
    lr
}

/// Positional gradient norm in normalized device coordinates.
fn ndc_grad_norm(g: &Vector2<f64>, intr: &CameraIntrinsics) -> f64 {
    Vector2::new(g.x * intr.width as f64 / 2.0, g.y * intr.height as f64 / 2.0).norm()
}

fn norm_sq(img: &Option<FloatImage>) -> f64 {
    img.as_ref().map_or(0.0, |i| i.data.iter().map(|v| v * v).sum())
}

/// Runs one stage from `cloud`. Stage 1 ignores extrapolated views; stage 2
/// samples them with `cfg.evs_sample_prob` when `denoisers` are given.
pub fn run_stage(
    stage: u8,
    cfg: &StageConfig,
    train: &TrainConfig,
    mut cloud: GaussianCloud,
    inputs: StageInputs,
    mut denoisers: Option<&mut Denoisers>,
    opts: &RunOptions,
) -> Result<GaussianCloud, TrainError> {
    cfg.validate()?;
    if inputs.views.is_empty() {
        return Err(TrainError::NoViews);
    }
    let weights = train.weights;
    let schedule = train.schedule.build()?;
    let mut telemetry = opts.telemetry.map(TelemetryWriter::append).transpose()?;
    let mut adam = Adam::new(cloud.len());
    let mut stats = GradStats::new(cloud.len());
    let distill_on = stage == 2 && denoisers.is_some() && !inputs.evs.is_empty() && cfg.evs_sample_prob > 0.0;

    for step in 1..=cfg.steps {
        let use_evs = distill_on && rng_stream(opts.seed, step, Purpose::EvsCoin).random::<f64>() < cfg.evs_sample_prob;
        let mut pick = rng_stream(opts.seed, step, Purpose::View);
        let mut rec = TelemetryRecord {
            step,
            stage,
            l1: 0.0,
            dssim: 0.0,
            lnormal: 0.0,
            vsd_grad_norm: 0.0,
            gsds_grad_norm: 0.0,
        };

        let (scene, raster, view_intr, record_stats) = if use_evs {
            let v = &inputs.evs[pick.random_range(0..inputs.evs.len())];
            let den = denoisers.as_deref_mut().expect("distillation enabled");
            let scene = compose_scene(&cloud, v.frame)?;
            let (out, state) = rasterize_with_state(&scene.gaussians, &v.intr, &v.pose);
            let mut drng = rng_stream(opts.seed, step, Purpose::Distill);
            let vsd = hsg_vsd_grad(
                &out.color,
                &v.cond,
                &v.pose.tag(),
                &train.distill.prompt,
                &schedule,
                &mut *den.eps_p,
                &mut *den.particle,
                &mut drng,
            )?;
            let mut distill = RenderGrads {
                color: Some(vsd.grad),
                ..Default::default()
            };
            if let (true, Some(geo)) = (train.distill.geometry, den.geometry.as_deref_mut()) {
                let g = g_sds_grad(&out, inputs.far, &v.cond, &schedule, geo, &mut drng)?;
                distill.depth = Some(g.depth);
                distill.normal = Some(g.normal);
            }
            rec.vsd_grad_norm = norm_sq(&distill.color).sqrt();
            rec.gsds_grad_norm = (norm_sq(&distill.depth) + norm_sq(&distill.normal)).sqrt();
            let (_, total) = total_step_loss(&weights, None, Some(&distill));
            (scene, rasterize_backward(&state, &total), v.intr, false)
        } else {
            let v = &inputs.views[pick.random_range(0..inputs.views.len())];
            let scene = compose_scene(&cloud, v.frame)?;
            let (out, state) = rasterize_with_state(&scene.gaussians, &v.intr, &v.pose);
            let (terms, grads) = recon_loss(&out, &v.image, v.normal.as_ref(), weights.lambda_r)?;
            rec.l1 = terms.l1;
            rec.dssim = terms.dssim;
            rec.lnormal = terms.lnormal;
            let (_, total) = total_step_loss(&weights, Some((&terms, &grads)), None);
            (scene, rasterize_backward(&state, &total), v.intr, true)
        };

        if record_stats {
            // Statistics track the unweighted reconstruction gradient.
            let unweight = if weights.lambda1 > 0.0 { 1.0 / weights.lambda1 } else { 1.0 };
            for (i, (g, &vis)) in raster.mean2d.iter().zip(&raster.visible).enumerate() {
                if vis {
                    stats.record(i, ndc_grad_norm(g, &view_intr) * unweight);
                }
            }
        }

        let grads = scene.pull_back(&raster.params);
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TrainError::NaNDetected { step });
        }
        let mut params = cloud_params(&cloud);
        adam.step(&mut params, &grads, &learning_rates(cfg, step));
        set_cloud_params(&mut cloud, &params);
        cloud.normalize_rotations();
        if cloud.check_finite().is_err() {
            return Err(TrainError::NaNDetected { step });
        }

        if step < cfg.densify_until_iter {
            if step > cfg.densify_from_iter && step % cfg.densification_interval == 0 {
                let mut rng = rng_stream(opts.seed, step, Purpose::Densify);
                let report = densify_and_prune(&mut cloud, &stats, &cfg.densify(), &mut rng);
                adam.remap(&report.origin);
                stats = GradStats::new(cloud.len());
            }
            if step % cfg.opacity_reset_interval == 0 {
                reset_opacity(&mut cloud, cfg.reset_opacity);
            }
        }

        if let Some(t) = telemetry.as_mut() {
            t.write(&rec)?;
        }
    }
    if let Some(t) = telemetry.as_mut() {
        t.flush()?;
    }
    if let Some(dir) = opts.checkpoint {
        save_checkpoint(dir, &cloud, stage, cfg.steps)?;
    }
    Ok(cloud)
}

pub fn train_stage1(
    cloud: GaussianCloud,
    views: &[TrainView],
    train: &TrainConfig,
    opts: &RunOptions,
) -> Result<GaussianCloud, TrainError> {
    let inputs = StageInputs { views, evs: &[], far: 1.0 };
    run_stage(1, &train.stage1, train, cloud, inputs, None, opts)
}

/// Loads the stage-1 checkpoint at `stage1` and runs stage 2 from it.
pub fn train_stage2(
    stage1: &Path,
    boxes: &[BoundingBox3D],
    inputs: StageInputs,
    denoisers: &mut Denoisers,
    train: &TrainConfig,
    opts: &RunOptions,
) -> Result<GaussianCloud, TrainError> {
    let missing = || TrainError::MissingStage1Checkpoint(stage1.to_path_buf());
    if !stage1.join("manifest.json").is_file() {
        return Err(missing());
    }
    let (cloud, manifest) = load_checkpoint(stage1, boxes)?;
    if manifest.stage != 1 {
        return Err(missing());
    }
    run_stage(2, &train.stage2, train, cloud, inputs, Some(denoisers), opts)
}
