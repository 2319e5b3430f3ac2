//! Noise schedule, denoiser contracts and denoiser implementations.
//!
//! Time is continuous in `[0, 1]` and maps to a discrete schedule index
//! with `k(t) = round(t * (T - 1))`. Forward noising is
//!
//! ```text
//! x_t = sqrt(abar_k) * x0 + sqrt(1 - abar_k) * eps
//! ```

mod particle;
mod toy;
pub mod wire;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::fmap::FloatImage;

pub use particle::{AffineParticle, NoiseOracle, ParticleDenoiser, TIME_EMBED_DIM};
pub use toy::{BlurTargetDenoiser, ConditionedGeometry, GeometryDenoiser, ToyDenoiser};
pub use wire::{RemoteDenoiser, DEFAULT_TIMEOUT};

pub const DEFAULT_PROMPT: &str = "This is photography of an urban street view, including cars, trees.";

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("time {t} outside [{min}, {max}]")]
    TOutOfRange { t: f64, min: f64, max: f64 },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("denoiser did not answer within {0:?}")]
    Timeout(std::time::Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("denoiser reported: {0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

impl DiffusionSchedule {
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(t_steps >= 2, "schedule needs at least two steps");
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect();
        let alpha_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Self {
            t_steps,
            betas,
            alpha_bar,
            t_min: 0.02,
            t_max: 0.98,
        }
    }

    /// Discrete index for continuous time `t`.
    pub fn step_index(&self, t: f64) -> Result<usize, DiffusionError> {
        if !(self.t_min..=self.t_max).contains(&t) {
            return Err(DiffusionError::TOutOfRange {
                t,
                min: self.t_min,
                max: self.t_max,
            });
        }
        Ok((t * (self.t_steps - 1) as f64).round() as usize)
    }

    pub fn alpha_bar_at(&self, t: f64) -> Result<f64, DiffusionError> {
        Ok(self.alpha_bar[self.step_index(t)?])
    }

    /// Distillation weight `omega(t) = 1 - abar`.
    pub fn weight(&self, t: f64) -> Result<f64, DiffusionError> {
        Ok(1.0 - self.alpha_bar_at(t)?)
    }

    pub fn sample_t(&self, rng: &mut impl Rng) -> f64 {
        rng.random_range(self.t_min..self.t_max)
    }

    pub fn perturb(&self, x0: &FloatImage, t: f64, eps: &FloatImage) -> Result<FloatImage, DiffusionError> {
        if x0.shape() != eps.shape() {
            return Err(DiffusionError::ShapeMismatch {
                expected: x0.shape(),
                got: eps.shape(),
            });
        }
        let ab = self.alpha_bar_at(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e))
    }
}

/// Standard-normal noise image.
pub fn sample_noise(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> FloatImage {
    let data = (0..height * width * channels).map(|_| rng.sample(StandardNormal)).collect();
    FloatImage::from_vec(height, width, channels, data)
}

/// Inputs shared by every denoiser call.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseRequest<'a> {
    pub x_t: &'a FloatImage,
    pub t: f64,
    pub prompt: &'a str,
    /// Packed 13-channel control signal at the rendered camera.
    pub cond: &'a FloatImage,
    pub camera_tag: Option<&'a str>,
}

/// A noise predictor `eps_hat = eps(x_t, t, y, C)`.
pub trait Denoiser {
    fn predict(&mut self, req: &DenoiseRequest) -> Result<FloatImage, DiffusionError>;
}

pub(crate) fn check_shape(expected: (usize, usize, usize), got: (usize, usize, usize)) -> Result<(), DiffusionError> {
    if expected == got {
        Ok(())
    } else {
        Err(DiffusionError::ShapeMismatch { expected, got })
    }
}
