//! Gaussian-splat scene: static set plus per-instance sets living in box
//! coordinates, a CPU rasterizer with analytic gradients, and
//! densification.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use thiserror::Error;

use crate::condition::{BoundingBox3D, BoxPose};

pub mod checkpoint;
pub mod densify;
pub mod raster;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use densify::{densify_and_prune, DensifyConfig, DensifyReport, GradStats};
pub use raster::{rasterize, rasterize_backward, rasterize_with_state, RasterGrads, RasterState, RenderGrads, RenderOutputs};

/// Number of scalar parameters per Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

#[derive(Debug, Error)]
pub enum GsplatError {
    #[error("instance {id} has no pose for frame {frame}")]
    MissingFramePose { id: u32, frame: u32 },
    #[error("non-finite parameter in Gaussian {index}")]
    NonFinite { index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Fmap(#[from] crate::fmap::FmapError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of `q = (w, x, y, z)` after normalization.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(m);
    [q.w, q.i, q.j, q.k]
}

/// Matrix `L(p)` with `p ⊗ q = L(p) q` for `(w, x, y, z)` quaternions.
pub fn quat_left_matrix(p: &[f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = *p;
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

pub fn quat_mul(p: &[f64; 4], q: &[f64; 4]) -> [f64; 4] {
    let r = quat_left_matrix(p) * Vector4::from(*q);
    [r[0], r[1], r[2], r[3]]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Natural-log scales; activated scale is `exp(log_scales)`.
    pub log_scales: Vector3<f64>,
    /// `(w, x, y, z)`, kept unit-norm by the optimizer.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mean,
            log_scales: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scales());
        m * m.transpose()
    }

    pub fn to_params(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut p = [0.0; PARAMS_PER_GAUSSIAN];
        p[0..3].copy_from_slice(self.mean.as_slice());
        p[3..6].copy_from_slice(self.log_scales.as_slice());
        p[6..10].copy_from_slice(&self.rotation);
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(self.color.as_slice());
        p
    }

    pub fn from_params(p: &[f64; PARAMS_PER_GAUSSIAN]) -> Self {
        Self {
            mean: Vector3::new(p[0], p[1], p[2]),
            log_scales: Vector3::new(p[3], p[4], p[5]),
            rotation: [p[6], p[7], p[8], p[9]],
            opacity_logit: p[10],
            color: Vector3::new(p[11], p[12], p[13]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            self.rotation = self.rotation.map(|v| v / n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }
}

/// Gradient with the same layout as [`Gaussian::to_params`].
pub type GaussianGrad = [f64; PARAMS_PER_GAUSSIAN];

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Gaussians in box coordinates.
    pub gaussians: Vec<Gaussian>,
    pub bbox: BoundingBox3D,
}

/// Static Gaussians plus per-instance sets keyed by box id. The flat order
/// used by optimizers and checkpoints is static first, then instances in
/// ascending id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub static_set: Vec<Gaussian>,
    pub instances: BTreeMap<u32, Instance>,
}

impl GaussianCloud {
    pub fn from_static(gaussians: Vec<Gaussian>) -> Self {
        Self {
            static_set: gaussians,
            instances: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.static_set.len() + self.instances.values().map(|i| i.gaussians.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Gaussian> {
        self.static_set
            .iter()
            .chain(self.instances.values().flat_map(|i| i.gaussians.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Gaussian> {
        self.static_set
            .iter_mut()
            .chain(self.instances.values_mut().flat_map(|i| i.gaussians.iter_mut()))
    }

    /// Flat index ranges of each set: `None` is the static set.
    pub fn segments(&self) -> Vec<(Option<u32>, Range<usize>)> {
        let mut out = vec![(None, 0..self.static_set.len())];
        let mut start = self.static_set.len();
        for (&id, inst) in &self.instances {
            out.push((Some(id), start..start + inst.gaussians.len()));
            start += inst.gaussians.len();
        }
        out
    }

    pub fn check_finite(&self) -> Result<(), GsplatError> {
        match self.iter().position(|g| !g.is_finite()) {
            Some(index) => Err(GsplatError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn normalize_rotations(&mut self) {
        self.iter_mut().for_each(Gaussian::normalize_rotation);
    }
}

/// World-frame Gaussians for one frame together with the box transforms
/// needed to map gradients back onto cloud parameters.
#[derive(Clone, Debug)]
pub struct ComposedScene {
    pub gaussians: Vec<Gaussian>,
    transforms: Vec<(Range<usize>, Option<(Matrix3<f64>, [f64; 4])>)>,
}

impl ComposedScene {
    /// Maps world-frame gradients (in composed order) to cloud parameters.
    pub fn pull_back(&self, world: &[GaussianGrad]) -> Vec<GaussianGrad> {
        let mut out = world.to_vec();
        for (range, tf) in &self.transforms {
            let Some((rot, q_box)) = tf else { continue };
            let lt = quat_left_matrix(q_box).transpose();
            for g in &mut out[range.clone()] {
                let dm = rot.transpose() * Vector3::new(g[0], g[1], g[2]);
                g[0..3].copy_from_slice(dm.as_slice());
                let dq = lt * Vector4::new(g[6], g[7], g[8], g[9]);
                g[6..10].copy_from_slice(dq.as_slice());
            }
        }
        out
    }
}

fn to_world(g: &Gaussian, pose: &BoxPose, q_box: &[f64; 4]) -> Gaussian {
    Gaussian {
        mean: pose.to_world(&g.mean),
        rotation: quat_mul(q_box, &g.rotation),
        ..*g
    }
}

/// Places every instance set at its box pose for `frame`.
pub fn compose_scene(cloud: &GaussianCloud, frame: u32) -> Result<ComposedScene, GsplatError> {
    let mut gaussians = Vec::with_capacity(cloud.len());
    let mut transforms = Vec::with_capacity(cloud.instances.len() + 1);
    gaussians.extend_from_slice(&cloud.static_set);
    transforms.push((0..cloud.static_set.len(), None));
    for (&id, inst) in &cloud.instances {
        let pose = inst
            .bbox
            .pose_at(frame)
            .ok_or(GsplatError::MissingFramePose { id, frame })?;
        let q_box = matrix_to_quat(&pose.rotation);
        let start = gaussians.len();
        gaussians.extend(inst.gaussians.iter().map(|g| to_world(g, &pose, &q_box)));
        transforms.push((start..gaussians.len(), Some((pose.rotation, q_box))));
    }
    Ok(ComposedScene { gaussians, transforms })
}
