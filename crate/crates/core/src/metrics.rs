//! Image-quality metrics for evaluation runs.
//!
//! FID and KID are not provided: both need a pretrained feature network.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmap::{FloatImage, FmapError};
use crate::losses::ssim;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{renders} renders but {gt} ground-truth images")]
    CountMismatch { renders: usize, gt: usize },
    #[error("{path}: shape {got:?} differs from ground truth {expected:?}")]
    ShapeMismatch {
        path: PathBuf,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("{path}: {source}")]
    Fmap { path: PathBuf, source: FmapError },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
///
/// ```
/// use evsforge::fmap::FloatImage;
/// use evsforge::metrics::psnr;
/// let a = FloatImage::filled(4, 4, 3, 0.2);
/// let b = FloatImage::filled(4, 4, 3, 0.3);
/// assert!((psnr(&a, &b) - 20.0).abs() < 1e-6);
/// assert_eq!(psnr(&a, &a), 99.0);
/// ```
pub fn psnr(x: &FloatImage, y: &FloatImage) -> f64 {
    assert_eq!(x.shape(), y.shape(), "psnr inputs differ in shape");
    let mse = x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.data.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub pixels: usize,
}

impl EvalReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (String, &'a FloatImage, &'a FloatImage)>) -> Self {
        let views: Vec<ViewMetrics> = pairs
            .into_iter()
            .map(|(name, r, g)| ViewMetrics {
                name,
                psnr: psnr(r, g),
                ssim: ssim(r, g),
                pixels: r.pixel_count(),
            })
            .collect();
        let n = views.len().max(1) as f64;
        EvalReport {
            mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            pixels: views.iter().map(|v| v.pixels).sum(),
            views,
        }
    }
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("fmap" | "png"))
}

/// Image files (`.fmap` or `.png`) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |source| EvalError::Io { path: dir.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_file() && is_image(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads an `.fmap`, or a PNG scaled to `[0, 1]` RGB.
pub fn load_image(path: &Path) -> Result<FloatImage, EvalError> {
    if path.extension().and_then(|e| e.to_str()) == Some("png") {
        let img = image::open(path)
            .map_err(|source| EvalError::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        return Ok(FloatImage::from_vec(h as usize, w as usize, 3, data));
    }
    FloatImage::load(path).map_err(|source| EvalError::Fmap { path: path.to_path_buf(), source })
}

/// Pairs files of both directories in name order and scores each pair.
pub fn evaluate_dirs(renders: &Path, gt: &Path) -> Result<EvalReport, EvalError> {
    let r = list_images(renders)?;
    let g = list_images(gt)?;
    if r.len() != g.len() {
        return Err(EvalError::CountMismatch { renders: r.len(), gt: g.len() });
    }
    let mut images = Vec::with_capacity(r.len());
    for (rp, gp) in r.iter().zip(&g) {
        let (ri, gi) = (load_image(rp)?, load_image(gp)?);
        if ri.shape() != gi.shape() {
            return Err(EvalError::ShapeMismatch { path: rp.clone(), expected: gi.shape(), got: ri.shape() });
        }
        let name = rp.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        images.push((name, ri, gi));
    }
    Ok(EvalReport::from_pairs(images.iter().map(|(n, r, g)| (n.clone(), r, g))))
}
