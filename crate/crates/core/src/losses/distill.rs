use rand::Rng;

use crate::diffusion::{sample_noise, DenoiseRequest, Denoiser, DiffusionSchedule, GeometryDenoiser, ParticleDenoiser};
use crate::fmap::FloatImage;
use crate::gsplat::RenderOutputs;

use super::LossError;

/// One distillation draw: the pixel gradient and the time it used.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSample {
    pub grad: FloatImage,
    pub t: f64,
}

/// Draws `t` then `eps` from `rng` and forms `x_t`.
fn noised(
    render: &FloatImage,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<(f64, FloatImage, FloatImage), LossError> {
    let t = schedule.sample_t(rng);
    let (h, w, c) = render.shape();
    let eps = sample_noise(h, w, c, rng);
    let x_t = schedule.perturb(render, t, &eps)?;
    Ok((t, eps, x_t))
}

/// `omega(t) (eps_p - eps_phi)`, followed by one particle update toward the
/// injected noise.
#[allow(clippy::too_many_arguments)]
pub fn hsg_vsd_grad(
    render: &FloatImage,
    cond: &FloatImage,
    pose_tag: &str,
    prompt: &str,
    schedule: &DiffusionSchedule,
    eps_p: &mut dyn Denoiser,
    eps_phi: &mut dyn ParticleDenoiser,
    rng: &mut impl Rng,
) -> Result<DistillSample, LossError> {
    let (t, eps, x_t) = noised(render, schedule, rng)?;
    let omega = schedule.weight(t)?;
    let req = DenoiseRequest {
        x_t: &x_t,
        t,
        prompt,
        cond,
        camera_tag: Some(pose_tag),
    };
    let pred = eps_p.predict(&req)?;
    let particle = eps_phi.step(&req, &eps)?;
    super::same_shape(&pred, &particle)?;
    Ok(DistillSample {
        grad: pred.zip_map(&particle, |a, b| omega * (a - b)),
        t,
    })
}

/// `omega(t) (eps_p - eps)`.
pub fn hsg_sds_grad(
    render: &FloatImage,
    cond: &FloatImage,
    prompt: &str,
    schedule: &DiffusionSchedule,
    eps_p: &mut dyn Denoiser,
    rng: &mut impl Rng,
) -> Result<DistillSample, LossError> {
    let (t, eps, x_t) = noised(render, schedule, rng)?;
    let omega = schedule.weight(t)?;
    let pred = eps_p.predict(&DenoiseRequest {
        x_t: &x_t,
        t,
        prompt,
        cond,
        camera_tag: None,
    })?;
    super::same_shape(&pred, &eps)?;
    Ok(DistillSample {
        grad: pred.zip_map(&eps, |a, b| omega * (a - b)),
        t,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryGrads {
    /// Gradient on the rendered depth map in meters.
    pub depth: FloatImage,
    /// Gradient on the rendered normal map.
    pub normal: FloatImage,
}

fn geometry_branch(
    clean: &FloatImage,
    cond: &FloatImage,
    schedule: &DiffusionSchedule,
    geo: &mut dyn GeometryDenoiser,
    rng: &mut impl Rng,
) -> Result<FloatImage, LossError> {
    let (t, eps, x_t) = noised(clean, schedule, rng)?;
    let omega = schedule.weight(t)?;
    let pred = geo.predict_geometry(&x_t, t, clean, cond)?;
    super::same_shape(&pred, &eps)?;
    Ok(pred.zip_map(&eps, |a, b| omega * (a - b)))
}

/// Score distillation on the depth map (divided by `far`) and on the normal
/// map (remapped by `(n + 1) / 2`), each with its own time and noise draw.
/// Gradients are returned in the units of the rendered maps.
pub fn g_sds_grad(
    render: &RenderOutputs,
    far: f64,
    cond: &FloatImage,
    schedule: &DiffusionSchedule,
    geo: &mut dyn GeometryDenoiser,
    rng: &mut impl Rng,
) -> Result<GeometryGrads, LossError> {
    let depth = render.depth.scale(1.0 / far);
    let normal = render.normal.map(|v| (v + 1.0) / 2.0);
    let g_depth = geometry_branch(&depth, cond, schedule, geo, rng)?;
    let g_normal = geometry_branch(&normal, cond, schedule, geo, rng)?;
    Ok(GeometryGrads {
        depth: g_depth.scale(1.0 / far),
        normal: g_normal.scale(0.5),
    })
}
