use crate::gsplat::{GaussianGrad, PARAMS_PER_GAUSSIAN};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-15;

/// Adaptive-moment optimizer over flat per-Gaussian parameters with one
/// learning rate per parameter slot.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: Vec<GaussianGrad>,
    v: Vec<GaussianGrad>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![[0.0; PARAMS_PER_GAUSSIAN]; len],
            v: vec![[0.0; PARAMS_PER_GAUSSIAN]; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one update in place; `lr[j]` is the rate for slot `j`.
    pub fn step(&mut self, params: &mut [GaussianGrad], grads: &[GaussianGrad], lr: &[f64; PARAMS_PER_GAUSSIAN]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            for j in 0..PARAMS_PER_GAUSSIAN {
                let g = grads[i][j];
                let m = BETA1 * self.m[i][j] + (1.0 - BETA1) * g;
                let v = BETA2 * self.v[i][j] + (1.0 - BETA2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                params[i][j] -= lr[j] * (m / c1) / ((v / c2).sqrt() + EPS);
            }
        }
    }

    /// Carries moments over a densification; new entries start at zero.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let pick = |src: &[GaussianGrad]| -> Vec<GaussianGrad> {
            origin.iter().map(|o| o.map_or([0.0; PARAMS_PER_GAUSSIAN], |i| src[i])).collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}
