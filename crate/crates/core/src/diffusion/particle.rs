use std::f64::consts::PI;

use super::{check_shape, DenoiseRequest, DiffusionError};
use crate::condition::CONTROL_CHANNELS;
use crate::fmap::FloatImage;

pub const TIME_EMBED_DIM: usize = 8;

/// `[sin(pi 2^i t), cos(pi 2^i t)]` for `i` in `0..4`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut e = [0.0; TIME_EMBED_DIM];
    for i in 0..TIME_EMBED_DIM / 2 {
        let a = PI * (1 << i) as f64 * t;
        e[2 * i] = a.sin();
        e[2 * i + 1] = a.cos();
    }
    e
}

/// The trainable noise predictor of variational score distillation.
pub trait ParticleDenoiser {
    /// Predicts noise for `req`, then takes one training step toward
    /// `eps_target`. Returns the prediction made before the update.
    fn step(&mut self, req: &DenoiseRequest, eps_target: &FloatImage) -> Result<FloatImage, DiffusionError>;
}

/// Per-pixel affine noise predictor over `[x_t | C | time embedding | 1]`,
/// trained by plain gradient descent on the per-pixel mean squared error.
/// The camera tag is not an input.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParticle {
    channels: usize,
    /// Row-major `channels x (features + 1)`, bias last.
    pub weights: Vec<f64>,
    pub lr: f64,
}

impl AffineParticle {
    pub fn new(channels: usize, lr: f64) -> Self {
        Self {
            channels,
            weights: vec![0.0; channels * (Self::features_for(channels) + 1)],
            lr,
        }
    }

    fn features_for(channels: usize) -> usize {
        channels + CONTROL_CHANNELS + TIME_EMBED_DIM
    }

    pub fn feature_count(&self) -> usize {
        Self::features_for(self.channels)
    }

    fn check(&self, req: &DenoiseRequest) -> Result<(), DiffusionError> {
        let (h, w, c) = req.x_t.shape();
        check_shape((h, w, self.channels), (h, w, c))?;
        check_shape((h, w, CONTROL_CHANNELS), req.cond.shape())
    }

    fn pixel_features(&self, req: &DenoiseRequest, emb: &[f64; TIME_EMBED_DIM], y: usize, x: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(req.x_t.pixel(y, x));
        out.extend_from_slice(req.cond.pixel(y, x));
        out.extend_from_slice(emb);
        out.push(1.0);
    }

    pub fn predict(&self, req: &DenoiseRequest) -> Result<FloatImage, DiffusionError> {
        self.check(req)?;
        let (h, w, _) = req.x_t.shape();
        let emb = time_embedding(req.t);
        let stride = self.feature_count() + 1;
        let mut out = FloatImage::zeros(h, w, self.channels);
        let mut f = Vec::with_capacity(stride);
        for y in 0..h {
            for x in 0..w {
                self.pixel_features(req, &emb, y, x, &mut f);
                for c in 0..self.channels {
                    let row = &self.weights[c * stride..(c + 1) * stride];
                    out.set(y, x, c, row.iter().zip(&f).map(|(a, b)| a * b).sum());
                }
            }
        }
        Ok(out)
    }

    /// Mean over pixels of the squared prediction error.
    pub fn loss(&self, req: &DenoiseRequest, target: &FloatImage) -> Result<f64, DiffusionError> {
        let pred = self.predict(req)?;
        check_shape(pred.shape(), target.shape())?;
        let sq: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sq / pred.pixel_count() as f64)
    }

    /// Gradient of [`Self::loss`] w.r.t. the weights, given a prediction.
    fn gradient_from(&self, req: &DenoiseRequest, pred: &FloatImage, target: &FloatImage) -> Vec<f64> {
        let (h, w, _) = pred.shape();
        let emb = time_embedding(req.t);
        let stride = self.feature_count() + 1;
        let scale = 2.0 / pred.pixel_count() as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let mut f = Vec::with_capacity(stride);
        for y in 0..h {
            for x in 0..w {
                self.pixel_features(req, &emb, y, x, &mut f);
                for c in 0..self.channels {
                    let r = scale * (pred.get(y, x, c) - target.get(y, x, c));
                    for (g, v) in grad[c * stride..(c + 1) * stride].iter_mut().zip(&f) {
                        *g += r * v;
                    }
                }
            }
        }
        grad
    }

    pub fn gradient(&self, req: &DenoiseRequest, target: &FloatImage) -> Result<Vec<f64>, DiffusionError> {
        let pred = self.predict(req)?;
        check_shape(pred.shape(), target.shape())?;
        Ok(self.gradient_from(req, &pred, target))
    }
}

impl ParticleDenoiser for AffineParticle {
    fn step(&mut self, req: &DenoiseRequest, eps_target: &FloatImage) -> Result<FloatImage, DiffusionError> {
        let pred = self.predict(req)?;
        check_shape(pred.shape(), eps_target.shape())?;
        let grad = self.gradient_from(req, &pred, eps_target);
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= self.lr * g;
        }
        Ok(pred)
    }
}

/// Returns the injected noise itself; variational distillation against it
/// degenerates to plain score distillation.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoiseOracle;

impl ParticleDenoiser for NoiseOracle {
    fn step(&mut self, _req: &DenoiseRequest, eps_target: &FloatImage) -> Result<FloatImage, DiffusionError> {
        Ok(eps_target.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample_noise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(seed: u64, size: usize) -> (FloatImage, FloatImage, FloatImage) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            sample_noise(size, size, 3, &mut rng),
            sample_noise(size, size, CONTROL_CHANNELS, &mut rng).map(|v| v * 0.3),
            sample_noise(size, size, 3, &mut rng),
        )
    }

    #[test]
    fn bias_fit_of_constant_target_converges() {
        let zero_x = FloatImage::zeros(4, 4, 3);
        let zero_c = FloatImage::zeros(4, 4, CONTROL_CHANNELS);
        let target = FloatImage::from_vec(4, 4, 3, [0.7, -0.2, 0.4].repeat(16));
        let req = DenoiseRequest { x_t: &zero_x, t: 0.3, prompt: "", cond: &zero_c, camera_tag: None };
        let mut model = AffineParticle::new(3, 0.01);
        for _ in 0..200 {
            model.step(&req, &target).unwrap();
        }
        let pred = model.predict(&req).unwrap();
        let err = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn exact_target_is_a_fixed_point() {
        let (x, c, t) = inputs(1, 5);
        let req = DenoiseRequest { x_t: &x, t: 0.6, prompt: "", cond: &c, camera_tag: None };
        let mut model = AffineParticle::new(3, 0.01);
        for _ in 0..3 {
            model.step(&req, &t).unwrap();
        }
        let before = model.clone();
        let pred = model.predict(&req).unwrap();
        assert_eq!(model.step(&req, &pred).unwrap(), pred);
        assert_eq!(model, before);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let (x, c, target) = inputs(2, 4);
        let req = DenoiseRequest { x_t: &x, t: 0.45, prompt: "", cond: &c, camera_tag: None };
        let mut model = AffineParticle::new(3, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        model.weights = sample_noise(1, 1, model.weights.len(), &mut rng).data.iter().map(|v| v * 0.1).collect();
        let grad = model.gradient(&req, &target).unwrap();
        let h = 1e-6;
        for i in 0..model.weights.len() {
            let mut plus = model.clone();
            plus.weights[i] += h;
            let mut minus = model.clone();
            minus.weights[i] -= h;
            let fd = (plus.loss(&req, &target).unwrap() - minus.loss(&req, &target).unwrap()) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "weight {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn training_loss_never_increases() {
        let (x, c, target) = inputs(4, 6);
        let req = DenoiseRequest { x_t: &x, t: 0.8, prompt: "", cond: &c, camera_tag: None };
        let mut model = AffineParticle::new(3, 0.01);
        let mut last = model.loss(&req, &target).unwrap();
        for _ in 0..100 {
            model.step(&req, &target).unwrap();
            let l = model.loss(&req, &target).unwrap();
            assert!(l <= last + 1e-12);
            last = l;
        }
    }

    #[test]
    fn embedding_is_bounded() {
        for t in [0.02, 0.5, 0.98] {
            assert!(time_embedding(t).iter().all(|v| v.abs() <= 1.0));
        }
    }
}
