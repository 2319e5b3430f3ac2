//! Training configuration and its TOML form.
//!
//! ```toml
//! [stage1]
//! steps = 30000
//! densification_interval = 100
//!
//! [stage2]
//! evs_sample_prob = 0.5
//!
//! [weights]
//! lambda1 = 1e4
//!
//! [schedule]
//! t_steps = 1000
//!
//! [distill]
//! particle_lr = 0.01
//! ```
//!
//! Omitted keys keep their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diffusion::{DiffusionSchedule, DEFAULT_PROMPT};
use crate::gsplat::DensifyConfig;
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub densification_interval: u64,
    pub opacity_reset_interval: u64,
    pub densify_from_iter: u64,
    pub densify_until_iter: u64,
    pub densify_grad_threshold: f64,
    pub steps: u64,
    pub lr_mean: f64,
    /// The mean learning rate decays exponentially to `lr_mean * lr_mean_final_ratio`.
    pub lr_mean_final_ratio: f64,
    pub lr_scales: f64,
    pub lr_rot: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    /// Probability that a stage-2 step renders an extrapolated camera.
    pub evs_sample_prob: f64,
    /// Scale (meters) above which a densified Gaussian is split rather than cloned.
    pub split_scale: f64,
    pub min_opacity: f64,
    pub reset_opacity: f64,
}

impl StageConfig {
    fn base() -> Self {
        Self {
            densification_interval: 100,
            opacity_reset_interval: 3000,
            densify_from_iter: 500,
            densify_until_iter: 15_000,
            densify_grad_threshold: 0.0002,
            steps: 30_000,
            lr_mean: 1.6e-4,
            lr_mean_final_ratio: 0.01,
            lr_scales: 5e-3,
            lr_rot: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            evs_sample_prob: 0.0,
            split_scale: 0.1,
            min_opacity: 0.005,
            reset_opacity: 0.01,
        }
    }

    pub fn stage1() -> Self {
        Self::base()
    }

    pub fn stage2() -> Self {
        Self {
            densification_interval: 2000,
            opacity_reset_interval: 3000,
            densify_from_iter: 1000,
            densify_until_iter: 10_000,
            steps: 10_000,
            evs_sample_prob: 0.5,
            ..Self::base()
        }
    }

    /// Shrinks the run to `steps`, scaling the densification window with it.
    pub fn with_steps(mut self, steps: u64) -> Self {
        if steps < self.steps {
            let scale = |v: u64| ((v as f64) * steps as f64 / self.steps as f64).round() as u64;
            self.densify_from_iter = scale(self.densify_from_iter);
            self.densify_until_iter = scale(self.densify_until_iter).max(self.densify_from_iter + 1);
        }
        self.steps = steps.max(self.densify_until_iter);
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.densify_from_iter >= self.densify_until_iter || self.densify_until_iter > self.steps {
            return bad("need densify_from_iter < densify_until_iter <= steps");
        }
        if self.densification_interval == 0 || self.opacity_reset_interval == 0 {
            return bad("intervals must be positive");
        }
        let lrs = [self.lr_mean, self.lr_scales, self.lr_rot, self.lr_opacity, self.lr_color];
        if lrs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_mean_final_ratio > 0.0 && self.lr_mean_final_ratio <= 1.0) {
            return bad("lr_mean_final_ratio must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.evs_sample_prob) {
            return bad("evs_sample_prob must be in [0, 1]");
        }
        if !(self.densify_grad_threshold >= 0.0 && self.split_scale > 0.0) {
            return bad("densify_grad_threshold must be >= 0 and split_scale > 0");
        }
        Ok(())
    }

    pub fn densify(&self) -> DensifyConfig {
        DensifyConfig {
            grad_threshold: self.densify_grad_threshold,
            split_scale: self.split_scale,
            min_opacity: self.min_opacity,
            reset_opacity: self.reset_opacity,
        }
    }

    /// Mean learning rate at 1-based `step`.
    pub fn mean_lr_at(&self, step: u64) -> f64 {
        let f = (step.saturating_sub(1)) as f64 / (self.steps.max(2) - 1) as f64;
        self.lr_mean * self.lr_mean_final_ratio.powf(f.min(1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_min: 0.02,
            t_max: 0.98,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule, TrainError> {
        let ok = self.t_steps >= 2
            && 0.0 < self.beta_start
            && self.beta_start <= self.beta_end
            && self.beta_end < 1.0
            && 0.0 <= self.t_min
            && self.t_min < self.t_max
            && self.t_max <= 1.0;
        if !ok {
            return Err(TrainError::Config(format!("invalid schedule {self:?}")));
        }
        let mut s = DiffusionSchedule::linear(self.t_steps, self.beta_start, self.beta_end);
        s.t_min = self.t_min;
        s.t_max = self.t_max;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Learning rate of the affine particle denoiser.
    pub particle_lr: f64,
    /// Apply geometry score distillation on extrapolated views.
    pub geometry: bool,
    pub prompt: String,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            particle_lr: 0.01,
            geometry: true,
            prompt: DEFAULT_PROMPT.to_owned(),
        }
    }
}

fn default_stage1() -> StageConfig {
    StageConfig::stage1()
}

fn default_stage2() -> StageConfig {
    StageConfig::stage2()
}

/// Partial stage table: omitted keys fall back to the stage's defaults.
fn merge_stage(base: StageConfig, table: Option<toml::Table>) -> Result<StageConfig, TrainError> {
    let Some(table) = table else { return Ok(base) };
    let mut full = toml::Table::try_from(&base).map_err(|e| TrainError::Config(e.to_string()))?;
    for (k, v) in table {
        if !full.contains_key(&k) {
            return Err(TrainError::Config(format!("unknown stage key {k:?}")));
        }
        full.insert(k, v);
    }
    full.try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "default_stage2")]
    pub stage2: StageConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    stage1: Option<toml::Table>,
    stage2: Option<toml::Table>,
    #[serde(default)]
    weights: LossWeights,
    #[serde(default)]
    schedule: ScheduleConfig,
    #[serde(default)]
    distill: DistillConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        let cfg = Self {
            stage1: merge_stage(StageConfig::stage1(), raw.stage1)?,
            stage2: merge_stage(StageConfig::stage2(), raw.stage2)?,
            weights: raw.weights,
            schedule: raw.schedule,
            distill: raw.distill,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.schedule.build()?;
        if !(self.distill.particle_lr > 0.0) {
            return Err(TrainError::Config("particle_lr must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults_follow_the_published_tables() {
        let s1 = StageConfig::stage1();
        assert_eq!(
            (s1.densification_interval, s1.opacity_reset_interval, s1.densify_from_iter, s1.densify_until_iter),
            (100, 3000, 500, 15_000)
        );
        assert_eq!(s1.densify_grad_threshold, 0.0002);
        let s2 = StageConfig::stage2();
        assert_eq!(
            (s2.densification_interval, s2.opacity_reset_interval, s2.densify_from_iter, s2.densify_until_iter),
            (2000, 3000, 1000, 10_000)
        );
        assert_eq!(s2.densify_grad_threshold, 0.0002);
        assert_eq!(s2.steps, 10_000);
        assert_eq!(s2.evs_sample_prob, 0.5);
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_toml_is_the_default() {
        assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn toml_roundtrip_and_partial_tables() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("[stage2]\nevs_sample_prob = 0.25\n[weights]\nlambda2 = 2.0\n").unwrap();
        assert_eq!(partial.stage2.evs_sample_prob, 0.25);
        assert_eq!(partial.stage2.densification_interval, 2000);
        assert_eq!(partial.weights.lambda2, 2.0);
        assert_eq!(partial.weights.lambda1, 1e4);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(TrainConfig::from_toml("[stage1]\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("[stage1]\nsteps = 100\n").is_err());
        assert!(TrainConfig::from_toml("[stage2]\nevs_sample_prob = 1.5\n").is_err());
        assert!(TrainConfig::from_toml("[schedule]\nt_min = 0.9\nt_max = 0.5\n").is_err());
        assert!(TrainConfig::from_toml("[other]\n").is_err());
    }

    #[test]
    fn with_steps_keeps_the_window_valid() {
        for n in [1, 10, 300, 2000, 50_000] {
            let c = StageConfig::stage2().with_steps(n);
            c.validate().unwrap();
        }
        let c = StageConfig::stage1().with_steps(3000);
        assert_eq!((c.densify_from_iter, c.densify_until_iter, c.steps), (50, 1500, 3000));
    }

    #[test]
    fn mean_lr_decays_by_the_final_ratio() {
        let c = StageConfig::stage1();
        assert_eq!(c.mean_lr_at(1), 1.6e-4);
        assert!((c.mean_lr_at(c.steps) - 1.6e-6).abs() < 1e-18);
    }
}
