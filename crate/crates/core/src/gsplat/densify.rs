//! Clone / split / prune maintenance driven by screen-space gradient statistics.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{logit, Gaussian, GaussianCloud};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyConfig {
    /// Mean screen-space positional gradient above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Activated scale (meters) separating clone (small) from split (large).
    pub split_scale: f64,
    pub min_opacity: f64,
    pub reset_opacity: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 0.0002,
            split_scale: 0.1,
            min_opacity: 0.005,
            reset_opacity: 0.01,
        }
    }
}

/// Running sums of per-Gaussian positional gradient norms, flat cloud order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl GradStats {
    pub fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            count: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    /// Records one observation for Gaussian `i`.
    pub fn record(&mut self, i: usize, grad_norm: f64) {
        self.sum[i] += grad_norm;
        self.count[i] += 1;
    }

    pub fn mean(&self, i: usize) -> f64 {
        match self.count[i] {
            0 => 0.0,
            n => self.sum[i] / n as f64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// For each Gaussian of the updated cloud, the flat index it was carried
    /// over from, or `None` for newly created ones.
    pub origin: Vec<Option<usize>>,
}

fn densify_set(
    set: &[Gaussian],
    offset: usize,
    stats: &GradStats,
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
    report: &mut DensifyReport,
) -> Vec<Gaussian> {
    let mut kept = Vec::with_capacity(set.len());
    let mut kept_origin = Vec::with_capacity(set.len());
    let mut born = Vec::new();
    for (i, g) in set.iter().enumerate() {
        let flat = offset + i;
        if g.opacity() < cfg.min_opacity {
            report.pruned += 1;
            continue;
        }
        if stats.mean(flat) < cfg.grad_threshold {
            kept.push(*g);
            kept_origin.push(Some(flat));
            continue;
        }
        let scales = g.scales();
        if scales.max() <= cfg.split_scale {
            kept.push(*g);
            kept_origin.push(Some(flat));
            born.push(*g);
            report.cloned += 1;
        } else {
            let rot = g.rotation_matrix();
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                born.push(Gaussian {
                    mean: g.mean + rot * scales.component_mul(&z),
                    log_scales: g.log_scales.add_scalar(-std::f64::consts::LN_2),
                    ..*g
                });
            }
            report.split += 1;
        }
    }
    report.origin.extend(kept_origin);
    report.origin.extend(std::iter::repeat_n(None, born.len()));
    kept.extend(born);
    kept
}

/// Prunes faint Gaussians, clones small high-gradient ones and splits large
/// high-gradient ones into two children with halved scales. Each set keeps
/// its survivors in order followed by new Gaussians.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &GradStats,
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
) -> DensifyReport {
    assert_eq!(stats.len(), cloud.len(), "gradient statistics out of sync with cloud");
    let mut report = DensifyReport::default();
    let mut offset = 0;
    let n_static = cloud.static_set.len();
    cloud.static_set = densify_set(&cloud.static_set, 0, stats, cfg, rng, &mut report);
    offset += n_static;
    for inst in cloud.instances.values_mut() {
        let n = inst.gaussians.len();
        inst.gaussians = densify_set(&inst.gaussians, offset, stats, cfg, rng, &mut report);
        offset += n;
    }
    report
}

/// Caps every opacity at `value`.
pub fn reset_opacity(cloud: &mut GaussianCloud, value: f64) {
    let cap = logit(value);
    for g in cloud.iter_mut() {
        g.opacity_logit = g.opacity_logit.min(cap);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(opacity: f64, scale: f64) -> Gaussian {
        Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), scale, opacity, Vector3::new(0.2, 0.4, 0.6))
    }

    #[test]
    fn below_threshold_changes_nothing() {
        let mut cloud = GaussianCloud::from_static(vec![g(0.5, 0.05), g(0.5, 0.5), g(0.9, 0.01)]);
        let mut stats = GradStats::new(3);
        for i in 0..3 {
            stats.record(i, 0.00019);
            stats.record(i, 0.0002 - 1e-9);
        }
        let before = cloud.clone();
        let r = densify_and_prune(&mut cloud, &stats, &DensifyConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((r.cloned, r.split, r.pruned), (0, 0, 0));
        assert_eq!(cloud, before);
        assert_eq!(r.origin, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn faint_gaussian_is_pruned() {
        let mut cloud = GaussianCloud::from_static(vec![g(0.001, 0.05), g(0.5, 0.05)]);
        let r = densify_and_prune(&mut cloud, &GradStats::new(2), &DensifyConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r.pruned, 1);
        assert_eq!(cloud.len(), 1);
        assert_eq!(r.origin, vec![Some(1)]);
    }

    #[test]
    fn large_gaussian_splits_into_two_halves() {
        let parent = g(0.5, 0.4);
        let mut cloud = GaussianCloud::from_static(vec![parent]);
        let mut stats = GradStats::new(1);
        stats.record(0, 0.01);
        let r = densify_and_prune(&mut cloud, &stats, &DensifyConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(r.split, 1);
        assert_eq!(cloud.len(), 2);
        for child in &cloud.static_set {
            assert!((child.scales() - parent.scales() / 2.0).amax() < 1e-12);
            assert_eq!(child.color, parent.color);
        }
        assert_eq!(r.origin, vec![None, None]);
    }

    #[test]
    fn small_gaussian_is_cloned() {
        let mut cloud = GaussianCloud::from_static(vec![g(0.5, 0.02), g(0.5, 0.02)]);
        let mut stats = GradStats::new(2);
        stats.record(1, 0.001);
        let r = densify_and_prune(&mut cloud, &stats, &DensifyConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(r.cloned, 1);
        assert_eq!(cloud.static_set[2], cloud.static_set[1]);
        assert_eq!(r.origin, vec![Some(0), Some(1), None]);
    }

    #[test]
    fn opacity_reset_caps() {
        let mut cloud = GaussianCloud::from_static(vec![g(0.9, 0.1), g(0.001, 0.1)]);
        reset_opacity(&mut cloud, 0.01);
        assert!((cloud.static_set[0].opacity() - 0.01).abs() < 1e-12);
        assert!((cloud.static_set[1].opacity() - 0.001).abs() < 1e-12);
    }
}
