use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use evsforge::camera::write_cameras;
use evsforge::cli::{self, CliError, DistillArgs, EXIT_RUNTIME};
use evsforge::diffusion::wire;
use evsforge::trainer::{read_points, TrainConfig};

#[derive(Parser)]
#[command(name = "evsforge", version, about = "Extrapolated-view urban scene optimization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render 13-channel control signals and S/D previews per camera.
    RenderConditions {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive an extrapolated camera set from a trajectory.
    MakeEvs {
        #[arg(long)]
        cameras: PathBuf,
        /// D, LR or LR-D.
        #[arg(long)]
        family: String,
        /// easy, middle or hard.
        #[arg(long)]
        level: String,
        /// Yaw override in degrees for the LR families.
        #[arg(long, allow_hyphen_values = true)]
        yaw: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seed a Gaussian cloud from the grid (or a point file).
    Init {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training stages and write checkpoints plus telemetry.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long)]
        cameras: PathBuf,
        /// Directory of cam_XXXXX.fmap ground-truth images.
        #[arg(long)]
        views: PathBuf,
        /// Directory of cam_XXXXX.fmap ground-truth normals.
        #[arg(long)]
        normals: Option<PathBuf>,
        /// Extrapolated cameras; defaults to every family and level.
        #[arg(long)]
        evs: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
        /// toy, tcp:<addr> or stdio:<cmd>.
        #[arg(long, default_value = "toy")]
        denoiser: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing out/stage1 checkpoint.
        #[arg(long)]
        stage2_only: bool,
    },
    /// PSNR and SSIM of renders against ground truth (FID/KID not provided).
    Eval {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a checkpoint at every camera.
    ExportImages {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loopback denoiser on stdin/stdout.
    #[command(hide = true)]
    ServeEcho,
}

fn run(cli: Cli) -> Result<()> {
    cli::configure_threads()?;
    match cli.cmd {
        Cmd::RenderConditions { grid, palette, boxes, cameras, out } => {
            let scene = cli::load_scene(&grid, palette.as_deref(), boxes.as_deref())?;
            let cams = cli::load_cameras(&cameras)?;
            let files = cli::cmd_render_conditions(&scene, &cams, &out)?;
            println!("wrote {} control maps to {}", files.len(), out.display());
        }
        Cmd::MakeEvs { cameras, family, level, yaw, out } => {
            let spec = cli::parse_evs_spec(&family, &level, yaw)?;
            let moved = cli::cmd_make_evs(&cli::load_cameras(&cameras)?, &spec)?;
            write_cameras(&out, &moved).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} cameras to {}", moved.len(), out.display());
        }
        Cmd::Init { grid, palette, boxes, points, out } => {
            let scene = cli::load_scene(&grid, palette.as_deref(), boxes.as_deref())?;
            let pts = points.as_deref().map(read_points).transpose().map_err(CliError::from)?;
            let manifest = cli::cmd_init(&scene, pts.as_deref(), &out)?;
            println!("wrote {} Gaussians to {}", manifest.total(), out.display());
        }
        Cmd::Distill {
            config,
            grid,
            palette,
            boxes,
            cameras,
            views,
            normals,
            evs,
            points,
            denoiser,
            seed,
            out,
            stage2_only,
        } => {
            let config = match config {
                Some(p) => TrainConfig::load(&p).map_err(CliError::from)?,
                None => TrainConfig::default(),
            };
            let scene = cli::load_scene(&grid, palette.as_deref(), boxes.as_deref())?;
            let cams = cli::load_cameras(&cameras)?;
            let train_views = cli::load_training_views(&cams, &views, normals.as_deref())?;
            let evs = evs.as_deref().map(cli::load_cameras).transpose()?;
            let pts = points.as_deref().map(read_points).transpose().map_err(CliError::from)?;
            let res = cli::cmd_distill(DistillArgs {
                config,
                scene: &scene,
                cameras: &cams,
                views: &train_views,
                evs,
                points: pts.as_deref(),
                denoiser: &denoiser,
                seed,
                out: &out,
                stage2_only,
            })?;
            println!("stage 2 checkpoint {} ({} Gaussians)", res.stage2.display(), res.gaussians);
        }
        Cmd::Eval { renders, gt, out } => {
            let report = cli::cmd_eval(&renders, &gt, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::ExportImages { checkpoint, boxes, cameras, out } => {
            let boxes = cli::load_boxes(boxes.as_deref())?;
            let files = cli::cmd_export_images(&checkpoint, &boxes, &cli::load_cameras(&cameras)?, &out)?;
            println!("wrote {} renders to {}", files.len(), out.display());
        }
        Cmd::ServeEcho => wire::serve(io::stdin().lock(), io::stdout().lock(), wire::echo)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(EXIT_RUNTIME, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
