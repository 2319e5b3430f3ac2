//! Tile-binned CPU rasterizer.
//!
//! Each Gaussian is projected with the perspective-affine approximation
//! `Sigma2D = J W Sigma W^T J^T + 0.3 I` (with `x/z`, `y/z` in `J` clamped to
//! a widened frustum), splats are sorted by camera depth
//! (ties broken by input index) and composited front to back per pixel:
//!
//! ```text
//! alpha_i = opacity_i * exp(-0.5 * d^T Sigma2D^-1 d)
//! w_i     = alpha_i * T_i,   T_{i+1} = T_i (1 - alpha_i)
//! ```
//!
//! Compositing stops once `T < 1e-4`. Color, expected depth and the normal
//! accumulator are `sum w_i f_i`; the normal map is normalized where the
//! accumulated alpha exceeds 0.5 and zero elsewhere.
//!
//! The backward pass replays each pixel's splat list and walks it back to
//! front with a running suffix sum, so no division by `1 - alpha` is needed
//! and fully opaque splats are handled exactly.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{Gaussian, GaussianGrad, PARAMS_PER_GAUSSIAN};
use crate::camera::{CameraIntrinsics, CameraPose};
use crate::fmap::FloatImage;

pub const COV2D_DILATION: f64 = 0.3;
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
pub const NEAR_PLANE: f64 = 0.01;
pub const NORMAL_ALPHA_MIN: f64 = 0.5;
/// Mahalanobis cutoff: splats contribute less than `exp(-25)` beyond it.
const MAHALANOBIS_CUTOFF: f64 = 50.0;
const BACKWARD_BANDS: usize = 16;
const TILE: usize = 8;
const FRUSTUM_PAD: f64 = 0.3;

/// Per-pixel features accumulated by compositing.
const FEATURES: usize = 8;
const F_COLOR: usize = 0;
const F_DEPTH: usize = 3;
const F_NORMAL: usize = 4;
const F_ALPHA: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutputs {
    pub color: FloatImage,
    /// Alpha-weighted expected camera depth in meters.
    pub depth: FloatImage,
    /// Unit normals (world frame) where alpha > 0.5, zero elsewhere.
    pub normal: FloatImage,
    pub alpha: FloatImage,
}

impl RenderOutputs {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            color: FloatImage::zeros(height, width, 3),
            depth: FloatImage::zeros(height, width, 1),
            normal: FloatImage::zeros(height, width, 3),
            alpha: FloatImage::zeros(height, width, 1),
        }
    }
}

/// Upstream gradients on the render outputs; absent maps count as zero.
#[derive(Clone, Debug, Default)]
pub struct RenderGrads {
    pub color: Option<FloatImage>,
    pub depth: Option<FloatImage>,
    pub normal: Option<FloatImage>,
    pub alpha: Option<FloatImage>,
}

#[derive(Clone, Debug)]
pub struct RasterGrads {
    /// Per input Gaussian, laid out like [`Gaussian::to_params`].
    pub params: Vec<GaussianGrad>,
    /// Gradient w.r.t. each projected 2D mean in pixels (zero when culled).
    pub mean2d: Vec<Vector2<f64>>,
    /// Whether each Gaussian survived projection and culling.
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Splat {
    src: usize,
    pc: Vector3<f64>,
    mean2d: Vector2<f64>,
    inv_cov: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    normal: Vector3<f64>,
    normal_axis: usize,
    normal_sign: f64,
    bbox: [i64; 4],
    quat: [f64; 4],
    rot: Matrix3<f64>,
    scales: Vector3<f64>,
    cov_world: Matrix3<f64>,
    jac: Matrix2x3<f64>,
    /// Camera-space x, y the Jacobian was built from, and whether each was clamped.
    jac_xy: Vector2<f64>,
    clamped: [bool; 2],
}

impl Splat {
    fn features(&self) -> [f64; FEATURES] {
        [
            self.color.x,
            self.color.y,
            self.color.z,
            self.pc.z,
            self.normal.x,
            self.normal.y,
            self.normal.z,
            1.0,
        ]
    }

    #[inline]
    fn covers(&self, x: i64, y: i64) -> bool {
        x >= self.bbox[0] && x <= self.bbox[1] && y >= self.bbox[2] && y <= self.bbox[3]
    }

    /// `(alpha, offset)` at pixel `(x, y)`, or `None` beyond the cutoff.
    #[inline]
    fn alpha_at(&self, x: f64, y: f64) -> Option<(f64, Vector2<f64>)> {
        let d = Vector2::new(x - self.mean2d.x, y - self.mean2d.y);
        let q = d.dot(&(self.inv_cov * d));
        if q > MAHALANOBIS_CUTOFF {
            return None;
        }
        Some((self.opacity * (-0.5 * q).exp(), d))
    }
}

/// Forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RasterState {
    intr: CameraIntrinsics,
    pose: CameraPose,
    splats: Vec<Splat>,
    tiles: TileBins,
    count: usize,
    /// Unnormalized normal accumulator per pixel.
    normal_acc: Vec<Vector3<f64>>,
    alpha: Vec<f64>,
}

fn project_gaussian(idx: usize, g: &Gaussian, intr: &CameraIntrinsics, pose: &CameraPose) -> Option<Splat> {
    let w = pose.rotation.transpose();
    let pc = w * (g.mean - pose.translation);
    if pc.z <= NEAR_PLANE || !pc.iter().all(|v| v.is_finite()) {
        return None;
    }
    let z = pc.z;
    let (x, x_clamped) = clamp_to_frustum(pc.x, z, intr.cx, intr.width, intr.fx);
    let (y, y_clamped) = clamp_to_frustum(pc.y, z, intr.cy, intr.height, intr.fy);
    let jac = Matrix2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * x / (z * z),
        0.0,
        intr.fy / z,
        -intr.fy * y / (z * z),
    );
    let rot = g.rotation_matrix();
    let scales = g.scales();
    let m = rot * Matrix3::from_diagonal(&scales);
    let cov_world = m * m.transpose();
    let t = jac * w;
    let cov2d = t * cov_world * t.transpose() + Matrix2::identity() * COV2D_DILATION;
    let inv_cov = cov2d.try_inverse()?;
    let mean2d = Vector2::new(intr.fx * pc.x / z + intr.cx, intr.fy * pc.y / z + intr.cy);

    // q >= |d|^2 / lambda_max, so this box contains every pixel under the cutoff.
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    let radius = (MAHALANOBIS_CUTOFF * lambda_max).sqrt();
    let bbox = [
        (mean2d.x - radius).floor() as i64,
        (mean2d.x + radius).ceil() as i64,
        (mean2d.y - radius).floor() as i64,
        (mean2d.y + radius).ceil() as i64,
    ];
    if bbox[1] < 0 || bbox[3] < 0 || bbox[0] >= intr.width as i64 || bbox[2] >= intr.height as i64 {
        return None;
    }

    let log_s = g.log_scales;
    let mut normal_axis = 0;
    for k in 1..3 {
        if log_s[k] < log_s[normal_axis] {
            normal_axis = k;
        }
    }
    let axis = rot.column(normal_axis).into_owned();
    let normal_sign = if axis.dot(&(g.mean - pose.translation)) > 0.0 { -1.0 } else { 1.0 };

    Some(Splat {
        src: idx,
        pc,
        mean2d,
        inv_cov,
        opacity: g.opacity(),
        color: g.color,
        normal: axis * normal_sign,
        normal_axis,
        normal_sign,
        bbox,
        quat: g.rotation,
        rot,
        scales,
        cov_world,
        jac,
        jac_xy: Vector2::new(x, y),
        clamped: [x_clamped, y_clamped],
    })
}

/// Limits `x / z` to the image span widened by 30% of its half-width on each
/// side, so splats beside the camera near the image plane keep a bounded
/// footprint.
fn clamp_to_frustum(x: f64, z: f64, c: f64, size: usize, f: f64) -> (f64, bool) {
    let pad = FRUSTUM_PAD * size as f64 / 2.0;
    let (lo, hi) = ((-c - pad) / f, (size as f64 - c + pad) / f);
    let r = x / z;
    if r < lo {
        (lo * z, true)
    } else if r > hi {
        (hi * z, true)
    } else {
        (x, false)
    }
}

pub fn rasterize(gaussians: &[Gaussian], intr: &CameraIntrinsics, pose: &CameraPose) -> RenderOutputs {
    rasterize_with_state(gaussians, intr, pose).0
}

/// Depth-sorted splat indices per `TILE`×`TILE` block of pixels.
#[derive(Clone, Debug)]
struct TileBins {
    cols: usize,
    bins: Vec<Vec<u32>>,
}

impl TileBins {
    fn new(splats: &[Splat], w: usize, h: usize) -> Self {
        let (cols, rows) = (w.div_ceil(TILE), h.div_ceil(TILE));
        let mut bins = vec![Vec::new(); cols * rows];
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize / TILE;
        for (k, s) in splats.iter().enumerate() {
            let (x0, x1) = (clamp(s.bbox[0], w), clamp(s.bbox[1], w));
            let (y0, y1) = (clamp(s.bbox[2], h), clamp(s.bbox[3], h));
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    bins[ty * cols + tx].push(k as u32);
                }
            }
        }
        Self { cols, bins }
    }

    fn at(&self, x: usize, y: usize) -> &[u32] {
        &self.bins[(y / TILE) * self.cols + x / TILE]
    }
}

/// Walks the sorted splats for one pixel, calling `visit(k, splat, alpha, T, d)`.
#[inline]
fn composite_pixel(
    splats: &[Splat],
    tiles: &TileBins,
    x: usize,
    y: usize,
    mut visit: impl FnMut(usize, &Splat, f64, f64, Vector2<f64>),
) -> f64 {
    let (xi, yi) = (x as i64, y as i64);
    let mut t = 1.0;
    for &k in tiles.at(x, y) {
        let (k, s) = (k as usize, &splats[k as usize]);
        if !s.covers(xi, yi) {
            continue;
        }
        let Some((alpha, d)) = s.alpha_at(x as f64, y as f64) else { continue };
        visit(k, s, alpha, t, d);
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_EPS {
            break;
        }
    }
    t
}

pub fn rasterize_with_state(
    gaussians: &[Gaussian],
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> (RenderOutputs, RasterState) {
    let (h, w) = (intr.height, intr.width);
    let mut splats: Vec<Splat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(i, g, intr, pose))
        .collect();
    splats.sort_by(|a, b| a.pc.z.total_cmp(&b.pc.z).then(a.src.cmp(&b.src)));
    let tiles = TileBins::new(&splats, w, h);

    let rows: Vec<Vec<[f64; FEATURES]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut acc = [0.0; FEATURES];
                    composite_pixel(&splats, &tiles, x, y, |_, s, alpha, t, _| {
                        let wgt = alpha * t;
                        for (a, f) in acc.iter_mut().zip(s.features()) {
                            *a += wgt * f;
                        }
                    });
                    acc
                })
                .collect()
        })
        .collect();

    let mut out = RenderOutputs::zeros(h, w);
    let mut normal_acc = Vec::with_capacity(h * w);
    let mut alpha = Vec::with_capacity(h * w);
    for (y, row) in rows.iter().enumerate() {
        for (x, acc) in row.iter().enumerate() {
            out.color.pixel_mut(y, x).copy_from_slice(&acc[F_COLOR..F_COLOR + 3]);
            out.depth.set(y, x, 0, acc[F_DEPTH]);
            out.alpha.set(y, x, 0, acc[F_ALPHA]);
            let v = Vector3::new(acc[F_NORMAL], acc[F_NORMAL + 1], acc[F_NORMAL + 2]);
            let n = v.norm();
            if acc[F_ALPHA] > NORMAL_ALPHA_MIN && n > 0.0 {
                out.normal.pixel_mut(y, x).copy_from_slice((v / n).as_slice());
            }
            normal_acc.push(v);
            alpha.push(acc[F_ALPHA]);
        }
    }
    let state = RasterState {
        intr: *intr,
        pose: *pose,
        splats,
        tiles,
        count: gaussians.len(),
        normal_acc,
        alpha,
    };
    (out, state)
}

#[derive(Clone, Copy)]
struct SplatAccum {
    color: Vector3<f64>,
    depth: f64,
    normal: Vector3<f64>,
    opacity: f64,
    mean2d: Vector2<f64>,
    inv_cov: Matrix2<f64>,
}

impl SplatAccum {
    fn zero() -> Self {
        Self {
            color: Vector3::zeros(),
            depth: 0.0,
            normal: Vector3::zeros(),
            opacity: 0.0,
            mean2d: Vector2::zeros(),
            inv_cov: Matrix2::zeros(),
        }
    }

    fn add(&mut self, o: &Self) {
        self.color += o.color;
        self.depth += o.depth;
        self.normal += o.normal;
        self.opacity += o.opacity;
        self.mean2d += o.mean2d;
        self.inv_cov += o.inv_cov;
    }
}

/// Derivatives of the rotation matrix entries w.r.t. a unit quaternion.
fn rotation_grad_to_quat(d_rot: &Matrix3<f64>, q: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |r: usize, c: usize| d_rot[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
        - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
        - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2)
        + x * g(2, 0)
        + y * g(2, 1));
    // Through the normalization q / |q|.
    let dq_hat = [dw, dx, dy, dz];
    let qh = [w, x, y, z];
    let proj: f64 = dq_hat.iter().zip(&qh).map(|(a, b)| a * b).sum();
    std::array::from_fn(|i| (dq_hat[i] - qh[i] * proj) / n)
}

/// Backpropagates output-image gradients to Gaussian parameters.
pub fn rasterize_backward(state: &RasterState, grads: &RenderGrads) -> RasterGrads {
    let (h, w) = (state.intr.height, state.intr.width);
    let n_splats = state.splats.len();
    let px_grad = |img: &Option<FloatImage>, y: usize, x: usize, c: usize| img.as_ref().map_or(0.0, |i| i.get(y, x, c));

    // Fixed row bands keep the reduction order independent of the thread count.
    let band = h.div_ceil(BACKWARD_BANDS).max(1);
    let row_accums: Vec<Vec<SplatAccum>> = (0..h.div_ceil(band))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![SplatAccum::zero(); n_splats];
            let mut list: Vec<(usize, f64, f64, Vector2<f64>)> = Vec::new();
            for (y, x) in (b * band..((b + 1) * band).min(h)).flat_map(|y| (0..w).map(move |x| (y, x))) {
                let p = y * w + x;
                let mut g = [0.0; FEATURES];
                for c in 0..3 {
                    g[F_COLOR + c] = px_grad(&grads.color, y, x, c);
                }
                g[F_DEPTH] = px_grad(&grads.depth, y, x, 0);
                g[F_ALPHA] = px_grad(&grads.alpha, y, x, 0);
                let v = state.normal_acc[p];
                let vn = v.norm();
                if state.alpha[p] > NORMAL_ALPHA_MIN && vn > 0.0 {
                    let gn = Vector3::new(
                        px_grad(&grads.normal, y, x, 0),
                        px_grad(&grads.normal, y, x, 1),
                        px_grad(&grads.normal, y, x, 2),
                    );
                    let nh = v / vn;
                    let gv = (gn - nh * nh.dot(&gn)) / vn;
                    g[F_NORMAL..F_NORMAL + 3].copy_from_slice(gv.as_slice());
                }
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                list.clear();
                composite_pixel(&state.splats, &state.tiles, x, y, |k, _, alpha, t, d| list.push((k, alpha, t, d)));

                let mut suffix = [0.0; FEATURES];
                for &(k, alpha, t, d) in list.iter().rev() {
                    let s = &state.splats[k];
                    let f = s.features();
                    let wgt = alpha * t;
                    let mut d_alpha = 0.0;
                    for i in 0..FEATURES {
                        d_alpha += g[i] * (f[i] - suffix[i]);
                    }
                    d_alpha *= t;
                    for i in 0..FEATURES {
                        suffix[i] = alpha * f[i] + (1.0 - alpha) * suffix[i];
                    }
                    let a = &mut acc[k];
                    a.color += Vector3::new(g[0], g[1], g[2]) * wgt;
                    a.depth += g[F_DEPTH] * wgt;
                    a.normal += Vector3::new(g[F_NORMAL], g[F_NORMAL + 1], g[F_NORMAL + 2]) * wgt;
                    // alpha = opacity * exp(-q/2), q = d^T A d, d = pixel - mean2d.
                    let gauss = alpha / s.opacity;
                    a.opacity += d_alpha * gauss;
                    a.mean2d += s.inv_cov * d * (d_alpha * alpha);
                    a.inv_cov += d * d.transpose() * (-0.5 * d_alpha * alpha);
                }
            }
            acc
        })
        .collect();

    let mut total = vec![SplatAccum::zero(); n_splats];
    for row in &row_accums {
        for (t, r) in total.iter_mut().zip(row) {
            t.add(r);
        }
    }

    let mut params = vec![[0.0; PARAMS_PER_GAUSSIAN]; state.count];
    let mut mean2d = vec![Vector2::zeros(); state.count];
    let mut visible = vec![false; state.count];
    let w_rot = state.pose.rotation.transpose();
    let (fx, fy) = (state.intr.fx, state.intr.fy);

    for (s, a) in state.splats.iter().zip(&total) {
        let out = &mut params[s.src];
        out[11] += a.color.x;
        out[12] += a.color.y;
        out[13] += a.color.z;
        let sig = s.opacity;
        out[10] += a.opacity * sig * (1.0 - sig);
        mean2d[s.src] = a.mean2d;
        visible[s.src] = true;

        // inverse -> covariance: dL/dSigma2D = -A G A.
        let g_cov2d = -(s.inv_cov * a.inv_cov * s.inv_cov);
        let g_cov2d = (g_cov2d + g_cov2d.transpose()) * 0.5;
        let t = s.jac * w_rot;
        let g_cov_world = t.transpose() * g_cov2d * t;
        let g_t = g_cov2d * t * s.cov_world * 2.0;
        let g_jac = g_t * w_rot.transpose();

        let (x, y, z) = (s.pc.x, s.pc.y, s.pc.z);
        let mut g_pc = Vector3::new(0.0, 0.0, a.depth);
        // Mean projection.
        g_pc.x += a.mean2d.x * fx / z;
        g_pc.y += a.mean2d.y * fy / z;
        g_pc.z += -a.mean2d.x * fx * x / (z * z) - a.mean2d.y * fy * y / (z * z);
        // Jacobian entries. A clamped coordinate is `r z` with `r` fixed.
        let (jx, jy) = (s.jac_xy.x, s.jac_xy.y);
        g_pc.z += g_jac[(0, 0)] * (-fx / (z * z));
        g_pc.z += g_jac[(1, 1)] * (-fy / (z * z));
        if s.clamped[0] {
            g_pc.z += g_jac[(0, 2)] * (fx * jx / (z * z * z));
        } else {
            g_pc.x += g_jac[(0, 2)] * (-fx / (z * z));
            g_pc.z += g_jac[(0, 2)] * (2.0 * fx * jx / (z * z * z));
        }
        if s.clamped[1] {
            g_pc.z += g_jac[(1, 2)] * (fy * jy / (z * z * z));
        } else {
            g_pc.y += g_jac[(1, 2)] * (-fy / (z * z));
            g_pc.z += g_jac[(1, 2)] * (2.0 * fy * jy / (z * z * z));
        }
        let g_mean = w_rot.transpose() * g_pc;
        out[0] += g_mean.x;
        out[1] += g_mean.y;
        out[2] += g_mean.z;

        // Sigma = M M^T with M = R diag(s).
        let m = s.rot * Matrix3::from_diagonal(&s.scales);
        let g_sigma = (g_cov_world + g_cov_world.transpose()) * 0.5;
        let g_m = g_sigma * m * 2.0;
        let mut g_rot = Matrix3::zeros();
        for k in 0..3 {
            let mut g_scale = 0.0;
            for r in 0..3 {
                g_scale += g_m[(r, k)] * s.rot[(r, k)];
                g_rot[(r, k)] = g_m[(r, k)] * s.scales[k];
            }
            out[3 + k] += g_scale * s.scales[k];
        }
        for r in 0..3 {
            g_rot[(r, s.normal_axis)] += s.normal_sign * a.normal[r];
        }
        let g_q = rotation_grad_to_quat(&g_rot, &s.quat);
        for i in 0..4 {
            out[6 + i] += g_q[i];
        }
    }
    RasterGrads { params, mean2d, visible }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::tests::random_gaussian;
    use crate::gsplat::logit;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(size: usize, focal: f64) -> (CameraIntrinsics, CameraPose) {
        (CameraIntrinsics::centered(focal, size, size), CameraPose::identity())
    }

    fn at(x: f64, y: f64, z: f64, scale: f64, opacity: f64, rgb: [f64; 3]) -> Gaussian {
        Gaussian::isotropic(Vector3::new(x, y, z), scale, opacity, Vector3::from(rgb))
    }

    /// Random Gaussians in front of the identity camera covering an 8x8 view.
    fn scene(rng: &mut impl Rng, n: usize) -> Vec<Gaussian> {
        (0..n)
            .map(|_| {
                let mut g = random_gaussian(rng);
                g.mean = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(2.0..4.0));
                g.log_scales = Vector3::from_fn(|_, _| rng.random_range(-1.6..-0.6));
                g.opacity_logit = rng.random_range(logit(0.15)..logit(0.8));
                g
            })
            .collect()
    }

    #[test]
    fn no_gaussians_render_zero() {
        let (intr, pose) = cam(8, 10.0);
        assert_eq!(rasterize(&[], &intr, &pose), RenderOutputs::zeros(8, 8));
    }

    #[test]
    fn single_isotropic_matches_closed_form() {
        let (intr, pose) = cam(16, 20.0);
        let (s, z, o) = (0.1, 4.0, 0.7);
        let g = at(0.0, 0.0, z, s, o, [0.2, 0.5, 0.9]);
        let out = rasterize(&[g], &intr, &pose);
        // On the optical axis J W Sigma W^T J^T is isotropic with variance (f s / z)^2.
        let var = (20.0 * s / z).powi(2) + COV2D_DILATION;
        for y in 0..16 {
            for x in 0..16 {
                let d2 = (x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2);
                let q = d2 / var;
                let a = if q > 50.0 { 0.0 } else { o * (-0.5 * q).exp() };
                assert!((out.alpha.get(y, x, 0) - a).abs() < 1e-12);
                assert!((out.depth.get(y, x, 0) - a * z).abs() < 1e-12);
                assert!((out.color.get(y, x, 2) - a * 0.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn front_splat_occludes_back_splat() {
        let (intr, pose) = cam(8, 10.0);
        let front = at(0.0, 0.0, 2.0, 0.3, 0.6, [1.0, 0.0, 0.0]);
        let back = at(0.0, 0.0, 5.0, 0.3, 0.5, [0.0, 1.0, 0.0]);
        for order in [[back, front], [front, back]] {
            let out = rasterize(&order, &intr, &pose);
            let c = out.color.pixel(4, 4);
            assert!((c[0] - 0.6).abs() < 1e-12);
            assert!((c[1] - 0.4 * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_front_splat_hides_everything_behind() {
        let (intr, pose) = cam(8, 10.0);
        let mut front = at(0.0, 0.0, 2.0, 2.0, 0.5, [0.1, 0.2, 0.3]);
        front.opacity_logit = 40.0;
        let back = at(0.0, 0.0, 5.0, 0.3, 0.9, [0.0, 1.0, 0.0]);
        let out = rasterize(&[back, front], &intr, &pose);
        assert_eq!(out.color.pixel(4, 4), &[0.1, 0.2, 0.3]);
        assert_eq!(out.alpha.get(4, 4, 0), 1.0);
        assert_eq!(out.depth.get(4, 4, 0), 2.0);
    }

    #[test]
    fn render_ignores_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (intr, pose) = cam(8, 10.0);
        let gs = scene(&mut rng, 12);
        let reference = rasterize(&gs, &intr, &pose);
        for _ in 0..5 {
            let mut shuffled = gs.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(rasterize(&shuffled, &intr, &pose), reference);
        }
    }

    #[test]
    fn normals_are_unit_where_opaque_and_face_the_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (intr, pose) = cam(8, 10.0);
        let mut gs = scene(&mut rng, 20);
        gs.iter_mut().for_each(|g| g.opacity_logit = 3.0);
        let out = rasterize(&gs, &intr, &pose);
        let mut opaque = 0;
        for y in 0..8 {
            for x in 0..8 {
                let n = Vector3::from_column_slice(out.normal.pixel(y, x));
                if out.alpha.get(y, x, 0) > NORMAL_ALPHA_MIN {
                    opaque += 1;
                    assert!((n.norm() - 1.0).abs() < 1e-12);
                    assert!(n.z <= 0.0);
                } else {
                    assert_eq!(n.norm(), 0.0);
                }
            }
        }
        assert!(opaque > 0);
    }

    fn weighted_loss(out: &RenderOutputs, w: &RenderOutputs) -> f64 {
        out.color.dot(&w.color) + out.depth.dot(&w.depth) + out.alpha.dot(&w.alpha) + out.normal.dot(&w.normal)
    }

    fn random_weights(rng: &mut impl Rng, size: usize, with_normal: bool) -> RenderOutputs {
        let mut img = |c| FloatImage::from_vec(size, size, c, (0..size * size * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        RenderOutputs {
            color: img(3),
            depth: img(1),
            alpha: img(1),
            normal: if with_normal { img(3) } else { FloatImage::zeros(size, size, 3) },
        }
    }

    fn check_against_finite_differences(gs: &[Gaussian], w: &RenderOutputs, intr: &CameraIntrinsics) {
        let pose = CameraPose::identity();
        let (_, state) = rasterize_with_state(gs, intr, &pose);
        let grads = rasterize_backward(
            &state,
            &RenderGrads {
                color: Some(w.color.clone()),
                depth: Some(w.depth.clone()),
                normal: Some(w.normal.clone()),
                alpha: Some(w.alpha.clone()),
            },
        );
        let eps = 1e-4;
        for (i, g) in gs.iter().enumerate() {
            for p in 0..PARAMS_PER_GAUSSIAN {
                let eval = |delta: f64| {
                    let mut moved = gs.to_vec();
                    let mut params = g.to_params();
                    params[p] += delta;
                    moved[i] = Gaussian::from_params(&params);
                    weighted_loss(&rasterize(&moved, intr, &pose), w)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = grads.params[i][p];
                let scale = analytic.abs().max(numeric.abs());
                assert!(
                    (analytic - numeric).abs() <= 1e-3 * scale + 1e-6,
                    "gaussian {i} param {p}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let intr = CameraIntrinsics::centered(10.0, 8, 8);
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let gs = scene(&mut rng, 5);
            let w = random_weights(&mut rng, 8, false);
            check_against_finite_differences(&gs, &w, &intr);
        }
    }

    #[test]
    fn normal_gradients_match_finite_differences() {
        let intr = CameraIntrinsics::centered(10.0, 8, 8);
        let mut checked = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut gs = scene(&mut rng, 4);
            gs.iter_mut().for_each(|g| g.opacity_logit = rng.random_range(1.0..2.5));
            let w = random_weights(&mut rng, 8, true);
            // The normal map switches on at alpha = 0.5; stay clear of the switch.
            let out = rasterize(&gs, &intr, &CameraPose::identity());
            if out.alpha.data.iter().any(|a| (a - NORMAL_ALPHA_MIN).abs() < 0.02) {
                continue;
            }
            check_against_finite_differences(&gs, &w, &intr);
            checked += 1;
        }
        assert!(checked >= 2, "only {checked} scenes were checkable");
    }

    #[test]
    fn clamped_jacobian_gradients_match_finite_differences() {
        // Wide splats centered outside the widened frustum still reach the image.
        let intr = CameraIntrinsics::centered(10.0, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let gs = vec![at(2.4, 0.3, 2.0, 0.9, 0.8, [0.9, 0.2, 0.1]), at(-0.2, -2.0, 1.5, 0.8, 0.7, [0.1, 0.8, 0.3])];
        let (_, state) = rasterize_with_state(&gs, &intr, &CameraPose::identity());
        assert!(state.splats.iter().any(|s| s.clamped[0]) && state.splats.iter().any(|s| s.clamped[1]));
        let w = random_weights(&mut rng, 8, false);
        check_against_finite_differences(&gs, &w, &intr);
    }

    #[test]
    fn splat_beside_the_camera_keeps_a_bounded_footprint() {
        let (intr, pose) = cam(16, 14.0);
        let g = at(1.5, 0.0, 0.02, 0.05, 0.95, [1.0, 1.0, 1.0]);
        let out = rasterize(&[g], &intr, &pose);
        assert!(out.alpha.data.iter().all(|&a| a < 1e-6));
    }

    #[test]
    fn splat_behind_an_opaque_pixel_gets_zero_gradient() {
        let (intr, pose) = cam(8, 10.0);
        let mut front = at(0.0, 0.0, 2.0, 3.0, 0.5, [0.1, 0.2, 0.3]);
        front.opacity_logit = 40.0;
        let back = at(0.0, 0.0, 5.0, 0.2, 0.9, [0.0, 1.0, 0.0]);
        let (out, state) = rasterize_with_state(&[front, back], &intr, &pose);
        assert_eq!(out.alpha.get(4, 4, 0), 1.0);
        // Upstream gradient only on the pixel the front splat saturates.
        let center = |c| {
            let mut img = FloatImage::zeros(8, 8, c);
            img.pixel_mut(4, 4).fill(1.0);
            Some(img)
        };
        let grads = rasterize_backward(&state, &RenderGrads { color: center(3), depth: center(1), normal: center(3), alpha: center(1) });
        assert!(grads.params[1].iter().all(|&v| v == 0.0));
        assert!(grads.params[0].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_signs_follow_intuition() {
        let (intr, pose) = cam(9, 10.0);
        let g = at(0.0, 0.0, 3.0, 0.3, 0.5, [0.5, 0.5, 0.5]);
        let (_, state) = rasterize_with_state(&[g], &intr, &pose);
        let mut red = FloatImage::zeros(9, 9, 3);
        for y in 0..9 {
            for x in 0..9 {
                red.set(y, x, 0, 1.0);
            }
        }
        let grads = rasterize_backward(&state, &RenderGrads { color: Some(red), ..Default::default() });
        let p = grads.params[0];
        assert!(p[11] > 0.0 && p[12] == 0.0 && p[13] == 0.0);
        assert!(p[10] > 0.0);
        // Growing the splat covers more pixels of a black background.
        assert!(p[3] > 0.0 && p[4] > 0.0);

        // Pulling the right half brighter should push the mean to the right.
        let mut right = FloatImage::zeros(9, 9, 3);
        for y in 0..9 {
            for x in 5..9 {
                right.set(y, x, 0, 1.0);
            }
        }
        let grads = rasterize_backward(&state, &RenderGrads { color: Some(right), ..Default::default() });
        assert!(grads.params[0][0] > 0.0);
        assert!(grads.mean2d[0].x > 0.0);
    }
}
