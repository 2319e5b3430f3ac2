//! Structural similarity with an analytic gradient.
//!
//! Local statistics use an 11x11 Gaussian window (sigma 1.5) applied as a
//! separable "same" convolution with zero padding; `K1 = 0.01`, `K2 = 0.03`
//! and the dynamic range is 1. The score is the mean of the SSIM map over
//! pixels and channels.

use crate::fmap::FloatImage;

const WINDOW_RADIUS: usize = 5;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn window() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut k = [0.0; 2 * WINDOW_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Zero-padded separable filtering of a single-channel plane. The window is
/// symmetric, so this is also its own adjoint.
fn filter(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = window();
    let r = WINDOW_RADIUS as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as i64 + i as i64 - r;
                if (0..w as i64).contains(&xx) {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as i64 + i as i64 - r;
                if (0..h as i64).contains(&yy) {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn planes(img: &FloatImage) -> Vec<Vec<f64>> {
    let n = img.pixel_count();
    let planar = img.to_planar();
    (0..img.channels).map(|c| planar[c * n..(c + 1) * n].to_vec()).collect()
}

struct Stats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

fn stats(x: &[f64], y: &[f64], h: usize, w: usize) -> Stats {
    let mu_x = filter(x, h, w);
    let mu_y = filter(y, h, w);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let exx = filter(&sq(x, x), h, w);
    let eyy = filter(&sq(y, y), h, w);
    let exy = filter(&sq(x, y), h, w);
    let n = h * w;
    Stats {
        var_x: (0..n).map(|i| exx[i] - mu_x[i] * mu_x[i]).collect(),
        var_y: (0..n).map(|i| eyy[i] - mu_y[i] * mu_y[i]).collect(),
        cov: (0..n).map(|i| exy[i] - mu_x[i] * mu_y[i]).collect(),
        mu_x,
        mu_y,
    }
}

pub fn ssim(x: &FloatImage, y: &FloatImage) -> f64 {
    ssim_impl(x, y, false).0
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &FloatImage, y: &FloatImage) -> (f64, FloatImage) {
    let (s, g) = ssim_impl(x, y, true);
    (s, g.expect("gradient requested"))
}

fn ssim_impl(x: &FloatImage, y: &FloatImage, want_grad: bool) -> (f64, Option<FloatImage>) {
    assert_eq!(x.shape(), y.shape(), "ssim inputs differ in shape");
    let (h, w, c) = x.shape();
    let n = h * w;
    let count = (n * c) as f64;
    let (xs, ys) = (planes(x), planes(y));
    let mut total = 0.0;
    let mut grad_planar = vec![0.0; n * c];
    for ch in 0..c {
        let st = stats(&xs[ch], &ys[ch], h, w);
        let mut d_mu = vec![0.0; n];
        let mut d_var = vec![0.0; n];
        let mut d_cov = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (st.mu_x[i], st.mu_y[i]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * st.cov[i] + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = st.var_x[i] + st.var_y[i] + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_mu[i] = (2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1) / count;
                d_var[i] = -s / b2 / count;
                d_cov[i] = 2.0 * a1 / (b1 * b2) / count;
            }
        }
        // x = y is the maximum; keep its gradient exactly zero rather than rounding noise.
        if want_grad && xs[ch] != ys[ch] {
            // d var_p / d x_q = 2 G(p-q) (x_q - mu_x,p); d cov_p / d x_q = G(p-q) (y_q - mu_y,p).
            let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
            let g_mu = filter(&d_mu, h, w);
            let g_var = filter(&d_var, h, w);
            let g_var_mu = filter(&prod(&d_var, &st.mu_x), h, w);
            let g_cov = filter(&d_cov, h, w);
            let g_cov_mu = filter(&prod(&d_cov, &st.mu_y), h, w);
            for q in 0..n {
                grad_planar[ch * n + q] = g_mu[q] + 2.0 * (xs[ch][q] * g_var[q] - g_var_mu[q])
                    + ys[ch][q] * g_cov[q]
                    - g_cov_mu[q];
            }
        }
    }
    let grad = want_grad.then(|| FloatImage::from_planar(c, h, w, &grad_planar));
    (total / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> FloatImage {
        FloatImage::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(16, 12, 3, &mut rng);
        assert!((ssim(&x, &x) - 1.0).abs() < 1e-12);
        let (_, g) = ssim_with_grad(&x, &x);
        assert!(g.data.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn window_is_normalized_gaussian() {
        let k = window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((k[5] / k[6] - (1.0 / (2.0 * 2.25f64)).exp()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_window_sum_oracle() {
        // Unseparated 2D window over the zero-padded image at one interior and one border pixel.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w) = (14, 15);
        let x = random(h, w, 1, &mut rng);
        let y = random(h, w, 1, &mut rng);
        let k = window();
        let at = |py: i64, px: i64| {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -5..=5i64 {
                for dx in -5..=5i64 {
                    let (qy, qx) = (py + dy, px + dx);
                    if qy < 0 || qx < 0 || qy >= h as i64 || qx >= w as i64 {
                        continue;
                    }
                    let g = k[(dy + 5) as usize] * k[(dx + 5) as usize];
                    let (a, b) = (x.get(qy as usize, qx as usize, 0), y.get(qy as usize, qx as usize, 0));
                    mx += g * a;
                    my += g * b;
                    xx += g * a * a;
                    yy += g * b * b;
                    xy += g * a * b;
                }
            }
            let (vx, vy, c) = (xx - mx * mx, yy - my * my, xy - mx * my);
            (2.0 * mx * my + C1) * (2.0 * c + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2))
        };
        let mut total = 0.0;
        for py in 0..h as i64 {
            for px in 0..w as i64 {
                total += at(py, px);
            }
        }
        assert!((ssim(&x, &y) - total / (h * w) as f64).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(8, 8, 3, &mut rng);
        let y = random(8, 8, 3, &mut rng);
        let (_, g) = ssim_with_grad(&x, &y);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let fd = (ssim(&p, &y) - ssim(&m, &y)) / (2.0 * h);
            let rel = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "sample {i}: {fd} vs {}", g.data[i]);
        }
    }
}
