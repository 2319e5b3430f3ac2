//! Reconstruction and distillation objectives.
//!
//! Reconstruction is a scalar loss with gradients on the rendered maps.
//! Distillation terms are pixel gradients only: score distillation defines
//! an update direction, not a loss value.

mod distill;
pub mod ssim;

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::fmap::FloatImage;
use crate::gsplat::raster::NORMAL_ALPHA_MIN;
use crate::gsplat::{RenderGrads, RenderOutputs};

pub use distill::{g_sds_grad, hsg_sds_grad, hsg_vsd_grad, DistillSample, GeometryGrads};
pub use ssim::{ssim, ssim_with_grad};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

fn same_shape(expected: &FloatImage, got: &FloatImage) -> Result<(), LossError> {
    if expected.shape() == got.shape() {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch {
            expected: expected.shape(),
            got: got.shape(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the reconstruction term.
    pub lambda1: f64,
    /// Weight of the distillation term.
    pub lambda2: f64,
    /// D-SSIM share inside the reconstruction term.
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1e4,
            lambda2: 1.0,
            lambda_r: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && (0.0..=1.0).contains(&self.lambda_r);
        if ok {
            Ok(())
        } else {
            Err(LossError::InvalidWeights(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReconTerms {
    pub l1: f64,
    pub dssim: f64,
    pub lnormal: f64,
    pub total: f64,
}

/// `(1 - lambda_r) L1 + lambda_r D-SSIM + L_normal` and its gradients on the
/// rendered color and normal maps.
///
/// `L_normal` is the mean squared distance between rendered and reference
/// normals over pixels whose alpha exceeds 0.5.
pub fn recon_loss(
    render: &RenderOutputs,
    gt_image: &FloatImage,
    gt_normal: Option<&FloatImage>,
    lambda_r: f64,
) -> Result<(ReconTerms, RenderGrads), LossError> {
    same_shape(&render.color, gt_image)?;
    let n = render.color.data.len() as f64;
    let l1 = render.color.data.iter().zip(&gt_image.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let (s, ds) = ssim_with_grad(&render.color, gt_image);
    let dssim = (1.0 - s) / 2.0;
    let mut color_grad = render.color.zip_map(gt_image, |a, b| {
        let d = a - b;
        (1.0 - lambda_r) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / n
    });
    color_grad.add_scaled(&ds, -0.5 * lambda_r);

    let mut lnormal = 0.0;
    let mut normal_grad = None;
    if let Some(gt_n) = gt_normal {
        same_shape(&render.normal, gt_n)?;
        let (h, w, _) = render.normal.shape();
        let mask: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| render.alpha.get(y, x, 0) > NORMAL_ALPHA_MIN)
            .collect();
        let mut g = FloatImage::zeros(h, w, 3);
        if !mask.is_empty() {
            let m = mask.len() as f64;
            for &(y, x) in &mask {
                for c in 0..3 {
                    let d = render.normal.get(y, x, c) - gt_n.get(y, x, c);
                    lnormal += d * d / m;
                    g.set(y, x, c, 2.0 * d / m);
                }
            }
        }
        normal_grad = Some(g);
    }
    let terms = ReconTerms {
        l1,
        dssim,
        lnormal,
        total: (1.0 - lambda_r) * l1 + lambda_r * dssim + lnormal,
    };
    let grads = RenderGrads {
        color: Some(color_grad),
        normal: normal_grad,
        ..Default::default()
    };
    Ok((terms, grads))
}

fn norm_of(img: &Option<FloatImage>) -> f64 {
    img.as_ref().map_or(0.0, |i| i.data.iter().map(|v| v * v).sum())
}

/// Euclidean norm over every present map.
pub fn grads_norm(g: &RenderGrads) -> f64 {
    (norm_of(&g.color) + norm_of(&g.depth) + norm_of(&g.normal) + norm_of(&g.alpha)).sqrt()
}

fn combine(a: &Option<FloatImage>, ka: f64, b: &Option<FloatImage>, kb: f64) -> Option<FloatImage> {
    match (a, b) {
        (None, None) => None,
        (Some(x), None) => Some(x.scale(ka)),
        (None, Some(y)) => Some(y.scale(kb)),
        (Some(x), Some(y)) => Some(x.zip_map(y, |p, q| ka * p + kb * q)),
    }
}

/// `lambda1 * recon + lambda2 * distill` on the rendered maps. The scalar is
/// the weighted recon loss plus the weighted distill gradient norm, for logging.
pub fn total_step_loss(
    weights: &LossWeights,
    recon: Option<(&ReconTerms, &RenderGrads)>,
    distill: Option<&RenderGrads>,
) -> (f64, RenderGrads) {
    let empty = RenderGrads::default();
    let (r_total, r) = recon.map_or((0.0, &empty), |(t, g)| (t.total, g));
    let d = distill.unwrap_or(&empty);
    let (k1, k2) = (weights.lambda1, weights.lambda2);
    let grads = RenderGrads {
        color: combine(&r.color, k1, &d.color, k2),
        depth: combine(&r.depth, k1, &d.depth, k2),
        normal: combine(&r.normal, k1, &d.normal, k2),
        alpha: combine(&r.alpha, k1, &d.alpha, k2),
    };
    (k1 * r_total + k2 * grads_norm(d), grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    pub stage: u8,
    pub l1: f64,
    pub dssim: f64,
    pub lnormal: f64,
    pub vsd_grad_norm: f64,
    pub gsds_grad_norm: f64,
}

/// Appends one JSON object per line.
pub struct TelemetryWriter {
    out: BufWriter<File>,
}

impl TelemetryWriter {
    pub fn append(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, rec: &TelemetryRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

pub fn read_telemetry(path: impl AsRef<Path>) -> io::Result<Vec<TelemetryRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io::Error::from))
        .collect()
}
