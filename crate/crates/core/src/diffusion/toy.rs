use super::{check_shape, DenoiseRequest, Denoiser, DiffusionError, DiffusionSchedule};
use crate::condition::{ROTATION_CHANNELS, SEMANTIC_CHANNELS};
use crate::fmap::FloatImage;

/// Optimal denoiser for data concentrated at `mu`, the semantic channels of
/// the control signal.
#[derive(Clone, Debug, Default)]
pub struct ToyDenoiser {
    pub schedule: DiffusionSchedule,
}

impl ToyDenoiser {
    pub fn new(schedule: DiffusionSchedule) -> Self {
        Self { schedule }
    }

    pub fn target(cond: &FloatImage) -> FloatImage {
        cond.channel_slice(ROTATION_CHANNELS, SEMANTIC_CHANNELS)
    }
}

/// `(x_t - sqrt(abar) * mu) / sqrt(1 - abar)`.
fn point_mass_eps(schedule: &DiffusionSchedule, x_t: &FloatImage, t: f64, mu: &FloatImage) -> Result<FloatImage, DiffusionError> {
    check_shape(x_t.shape(), mu.shape())?;
    let ab = schedule.alpha_bar_at(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.zip_map(mu, |x, m| (x - a * m) / b))
}

impl Denoiser for ToyDenoiser {
    fn predict(&mut self, req: &DenoiseRequest) -> Result<FloatImage, DiffusionError> {
        let (h, w, _) = req.x_t.shape();
        check_shape((h, w, crate::condition::CONTROL_CHANNELS), req.cond.shape())?;
        point_mass_eps(&self.schedule, req.x_t, req.t, &Self::target(req.cond))
    }
}

/// Noise predictor for rendered geometry maps. Unlike [`Denoiser`], it sees
/// the clean map the noisy input was formed from, which lets closed-form
/// smoothing priors target a function of the render itself.
pub trait GeometryDenoiser {
    fn predict_geometry(
        &mut self,
        x_t: &FloatImage,
        t: f64,
        clean: &FloatImage,
        cond: &FloatImage,
    ) -> Result<FloatImage, DiffusionError>;
}

/// Point-mass denoiser whose target is the 5x5 Gaussian blur of the clean map.
#[derive(Clone, Debug, Default)]
pub struct BlurTargetDenoiser {
    pub schedule: DiffusionSchedule,
}

const BLUR_RADIUS: usize = 2;
const BLUR_SIGMA: f64 = 1.0;

impl BlurTargetDenoiser {
    pub fn new(schedule: DiffusionSchedule) -> Self {
        Self { schedule }
    }

    /// Normalized 5x5 Gaussian blur (sigma 1) with clamped borders, so
    /// constant maps are fixed points.
    pub fn blur(img: &FloatImage) -> FloatImage {
        let k: Vec<f64> = (0..=2 * BLUR_RADIUS)
            .map(|i| {
                let d = i as f64 - BLUR_RADIUS as f64;
                (-0.5 * d * d / (BLUR_SIGMA * BLUR_SIGMA)).exp()
            })
            .collect();
        let sum: f64 = k.iter().sum();
        let k: Vec<f64> = k.iter().map(|v| v / sum).collect();
        let (h, w, c) = img.shape();
        let r = BLUR_RADIUS as i64;
        let pass = |src: &FloatImage, horizontal: bool| {
            let mut out = FloatImage::zeros(h, w, c);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for (i, kv) in k.iter().enumerate() {
                            let o = i as i64 - r;
                            let (yy, xx) = if horizontal {
                                (y, (x as i64 + o).clamp(0, w as i64 - 1) as usize)
                            } else {
                                ((y as i64 + o).clamp(0, h as i64 - 1) as usize, x)
                            };
                            acc += kv * src.get(yy, xx, ch);
                        }
                        out.set(y, x, ch, acc);
                    }
                }
            }
            out
        };
        pass(&pass(img, true), false)
    }
}

impl GeometryDenoiser for BlurTargetDenoiser {
    fn predict_geometry(
        &mut self,
        x_t: &FloatImage,
        t: f64,
        clean: &FloatImage,
        _cond: &FloatImage,
    ) -> Result<FloatImage, DiffusionError> {
        point_mass_eps(&self.schedule, x_t, t, &Self::blur(clean))
    }
}

/// Serves geometry maps with an image denoiser conditioned on the control
/// signal; the clean map is not forwarded.
pub struct ConditionedGeometry<D>(pub D);

impl<D: Denoiser> GeometryDenoiser for ConditionedGeometry<D> {
    fn predict_geometry(
        &mut self,
        x_t: &FloatImage,
        t: f64,
        _clean: &FloatImage,
        cond: &FloatImage,
    ) -> Result<FloatImage, DiffusionError> {
        self.0.predict(&DenoiseRequest {
            x_t,
            t,
            prompt: super::DEFAULT_PROMPT,
            cond,
            camera_tag: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample_noise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cond_with_target(mu: &FloatImage, rng: &mut impl Rng) -> FloatImage {
        let (h, w, _) = mu.shape();
        let r = sample_noise(h, w, 9, rng);
        let d = FloatImage::filled(h, w, 1, 0.4);
        FloatImage::concat_channels(&[&r, mu, &d]).unwrap()
    }

    #[test]
    fn residual_identity_holds() {
        let s = DiffusionSchedule::default();
        let mut toy = ToyDenoiser::new(s.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let mu = sample_noise(6, 5, 3, &mut rng);
            let delta = sample_noise(6, 5, 3, &mut rng);
            let cond = cond_with_target(&mu, &mut rng);
            let t = s.sample_t(&mut rng);
            let ab = s.alpha_bar_at(t).unwrap();
            let x0 = mu.zip_map(&delta, |m, d| m + d);
            let eps = sample_noise(6, 5, 3, &mut rng);
            let xt = s.perturb(&x0, t, &eps).unwrap();
            let req = DenoiseRequest { x_t: &xt, t, prompt: "", cond: &cond, camera_tag: None };
            let eps_hat = toy.predict(&req).unwrap();
            let k = (ab / (1.0 - ab)).sqrt();
            for ((e_hat, e), d) in eps_hat.data.iter().zip(&eps.data).zip(&delta.data) {
                assert!((e_hat - e - k * d).abs() < 1e-9 * (1.0 + k * d.abs()));
            }
        }
    }

    #[test]
    fn converged_render_has_zero_residual() {
        let s = DiffusionSchedule::default();
        let mut toy = ToyDenoiser::new(s.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu = FloatImage::filled(4, 4, 3, 0.5);
        let cond = cond_with_target(&mu, &mut rng);
        for _ in 0..3 {
            let eps = sample_noise(4, 4, 3, &mut rng);
            let t = s.sample_t(&mut rng);
            let xt = s.perturb(&mu, t, &eps).unwrap();
            let eps_hat = toy.predict(&DenoiseRequest { x_t: &xt, t, prompt: "", cond: &cond, camera_tag: None }).unwrap();
            assert!(eps_hat.zip_map(&eps, |a, b| a - b).data.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn wrong_cond_shape_is_rejected() {
        let mut toy = ToyDenoiser::default();
        let x = FloatImage::zeros(4, 4, 3);
        let cond = FloatImage::zeros(4, 4, 12);
        let err = toy.predict(&DenoiseRequest { x_t: &x, t: 0.5, prompt: "", cond: &cond, camera_tag: None });
        assert!(matches!(err, Err(DiffusionError::ShapeMismatch { .. })));
    }

    #[test]
    fn blur_fixes_constants_and_smooths_spikes() {
        let flat = FloatImage::filled(7, 9, 1, 0.3);
        let b = BlurTargetDenoiser::blur(&flat);
        assert!(b.data.iter().all(|v| (v - 0.3).abs() < 1e-15));
        let mut spike = flat.clone();
        spike.set(3, 4, 0, 0.8);
        let b = BlurTargetDenoiser::blur(&spike);
        let center_weight = {
            let k: Vec<f64> = (-2..=2).map(|d: i32| (-0.5 * (d * d) as f64).exp()).collect();
            let s: f64 = k.iter().sum();
            (k[2] / s).powi(2)
        };
        assert!((b.get(3, 4, 0) - (0.3 + 0.5 * center_weight)).abs() < 1e-12);
        assert!(b.get(3, 6, 0) > 0.3 + 1e-6 && (b.get(3, 7, 0) - 0.3).abs() < 1e-15);
    }
}
