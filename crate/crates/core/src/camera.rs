//! Pinhole cameras, rigid poses and extrapolated-view (EVS) trajectories.
//!
//! Camera frame: X right, Y down, Z forward. Poses are stored as
//! `world_from_camera`. Pixel `(px, py)` samples the image-plane point
//! `u = px, v = py`, so a principal point of `(W/2, H/2)` puts the optical
//! axis on pixel `(W/2, H/2)`.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth at or below which a point counts as behind the camera.
pub const BEHIND_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid EVS spec: {0}")]
    InvalidSpec(String),
    #[error("invalid camera: {0}")]
    Invalid(String),
    #[error("camera file line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(CameraError::Invalid(format!("{self:?}")))
        }
    }

    /// Camera-frame direction (unnormalized, z = 1) through pixel `(px, py)`.
    pub fn pixel_ray(&self, px: f64, py: f64) -> Vector3<f64> {
        Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Camera at `eye` looking at `target`, with image-down as close to
    /// `-up` as the view direction allows.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, CameraError> {
        let pose = Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        );
        let bottom = m.row(3);
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > 1e-9 {
            return Err(CameraError::Invalid(format!("bottom row {bottom}")));
        }
        pose.validate()?;
        Ok(pose)
    }

    /// Max deviation of `R^T R` from identity plus `|det R - 1|`.
    pub fn orthonormality_residual(&self) -> f64 {
        rotation_residual(&self.rotation)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let r = self.orthonormality_residual();
        if r > 1e-6 {
            return Err(CameraError::Invalid(format!("rotation residual {r:e}")));
        }
        Ok(())
    }

    /// Stable text tag identifying the pose; handed to view-conditioned denoisers.
    pub fn tag(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.matrix().iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}

pub fn rotation_residual(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ortho + (r.determinant() - 1.0).abs()
}

/// Projection result: pixel coordinates and camera-frame depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, z: f64 },
    Behind,
}

pub fn project(intr: &CameraIntrinsics, pose: &CameraPose, p: &Vector3<f64>) -> Projection {
    let pc = pose.to_camera(p);
    if pc.z <= BEHIND_EPS {
        return Projection::Behind;
    }
    Projection::Visible {
        u: intr.fx * pc.x / pc.z + intr.cx,
        v: intr.fy * pc.y / pc.z + intr.cy,
        z: pc.z,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvsFamily {
    D,
    LR,
    #[serde(rename = "LR-D")]
    LRD,
}

impl EvsFamily {
    pub const ALL: [EvsFamily; 3] = [EvsFamily::D, EvsFamily::LR, EvsFamily::LRD];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "D" => Some(Self::D),
            "LR" => Some(Self::LR),
            "LR-D" | "LRD" => Some(Self::LRD),
            _ => None,
        }
    }

    fn pitches(self) -> bool {
        matches!(self, Self::D | Self::LRD)
    }

    fn yaws(self) -> bool {
        matches!(self, Self::LR | Self::LRD)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvsLevel {
    Easy,
    Middle,
    Hard,
}

impl EvsLevel {
    pub const ALL: [EvsLevel; 3] = [EvsLevel::Easy, EvsLevel::Middle, EvsLevel::Hard];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Some(Self::Easy),
            "middle" => Some(Self::Middle),
            "hard" => Some(Self::Hard),
            _ => None,
        }
    }

    /// Upward translation for the downward-looking families.
    pub fn lift_m(self) -> f64 {
        match self {
            Self::Easy => 0.2,
            Self::Middle => 0.4,
            Self::Hard => 0.6,
        }
    }

    /// Representative yaw inside the level's band.
    pub fn default_yaw_deg(self) -> f64 {
        match self {
            Self::Easy => 10.0,
            Self::Middle => 30.0,
            Self::Hard => 60.0,
        }
    }

    pub fn yaw_in_band(self, deg: f64) -> bool {
        let a = deg.abs();
        match self {
            Self::Easy => a <= 15.0,
            Self::Middle => a > 15.0 && a < 45.0,
            Self::Hard => a >= 45.0,
        }
    }
}

pub const EVS_PITCH_DEG: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvsSpec {
    pub family: EvsFamily,
    pub level: EvsLevel,
    pub lr_angle_deg: f64,
    pub d_lift_m: f64,
    pub d_pitch_deg: f64,
    pub world_up: Vector3<f64>,
}

impl EvsSpec {
    pub fn new(family: EvsFamily, level: EvsLevel) -> Self {
        Self {
            family,
            level,
            lr_angle_deg: if family.yaws() { level.default_yaw_deg() } else { 0.0 },
            d_lift_m: if family.pitches() { level.lift_m() } else { 0.0 },
            d_pitch_deg: if family.pitches() { EVS_PITCH_DEG } else { 0.0 },
            world_up: Vector3::z(),
        }
    }

    pub fn with_yaw(mut self, deg: f64) -> Self {
        self.lr_angle_deg = deg;
        self
    }

    pub fn with_up(mut self, up: Vector3<f64>) -> Self {
        self.world_up = up.normalize();
        self
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.family.yaws() && !self.level.yaw_in_band(self.lr_angle_deg) {
            return Err(CameraError::InvalidSpec(format!(
                "yaw {}° outside the {:?} band",
                self.lr_angle_deg, self.level
            )));
        }
        if self.family.pitches() {
            let lift_ok = [0.2, 0.4, 0.6].iter().any(|l| (self.d_lift_m - l).abs() < 1e-12);
            if !lift_ok {
                return Err(CameraError::InvalidSpec(format!("lift {} m", self.d_lift_m)));
            }
        }
        if self.world_up.norm() < 1e-12 {
            return Err(CameraError::InvalidSpec("zero up axis".into()));
        }
        Ok(())
    }
}

/// Rotation about the camera X axis that tilts the view toward image-down.
pub fn pitch_down(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), -deg.to_radians()).into_inner()
}

fn yaw_about(up: &Vector3<f64>, deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*up), deg.to_radians()).into_inner()
}

fn reorthonormalize(r: Matrix3<f64>) -> Matrix3<f64> {
    if rotation_residual(&r) <= 1e-9 {
        r
    } else {
        Rotation3::from_matrix(&r).into_inner()
    }
}

/// Pitch a pose down about its own X axis, then lift it along `up`.
pub fn apply_pitch_lift(pose: &CameraPose, pitch_deg: f64, lift_m: f64, up: &Vector3<f64>) -> CameraPose {
    CameraPose::new(
        reorthonormalize(pose.rotation * pitch_down(pitch_deg)),
        pose.translation + up.normalize() * lift_m,
    )
}

/// Yaw a pose in place about the world up axis through its center.
pub fn apply_yaw(pose: &CameraPose, yaw_deg: f64, up: &Vector3<f64>) -> CameraPose {
    CameraPose::new(
        reorthonormalize(yaw_about(up, yaw_deg) * pose.rotation),
        pose.translation,
    )
}

pub fn make_evs(poses: &[CameraPose], spec: &EvsSpec) -> Result<Vec<CameraPose>, CameraError> {
    spec.validate()?;
    Ok(poses
        .iter()
        .map(|pose| {
            let mut p = *pose;
            if spec.family.yaws() {
                p = apply_yaw(&p, spec.lr_angle_deg, &spec.world_up);
            }
            if spec.family.pitches() {
                p = apply_pitch_lift(&p, spec.d_pitch_deg, spec.d_lift_m, &spec.world_up);
            }
            p
        })
        .collect())
}

/// One entry of a camera JSON-lines file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRecord {
    pub intr: CameraIntrinsics,
    pub pose: CameraPose,
    pub frame: u32,
}

#[derive(Serialize, Deserialize)]
struct CameraLine {
    intr: CameraIntrinsics,
    world_from_camera: [f64; 16],
    #[serde(default, skip_serializing_if = "is_zero")]
    frame: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl CameraRecord {
    pub fn to_json(&self) -> String {
        let m = self.pose.matrix();
        let mut flat = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                flat[r * 4 + c] = m[(r, c)];
            }
        }
        serde_json::to_string(&CameraLine {
            intr: self.intr,
            world_from_camera: flat,
            frame: self.frame,
        })
        .expect("camera serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CameraError> {
        let line: CameraLine =
            serde_json::from_str(text).map_err(|source| CameraError::Parse { line: 0, source })?;
        line.intr.validate()?;
        let m = Matrix4::from_row_slice(&line.world_from_camera);
        Ok(Self {
            intr: line.intr,
            pose: CameraPose::from_matrix(&m)?,
            frame: line.frame,
        })
    }
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraRecord>, CameraError> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(CameraRecord::from_json(&line).map_err(|e| match e {
            CameraError::Parse { source, .. } => CameraError::Parse { line: i + 1, source },
            other => other,
        })?);
    }
    Ok(out)
}

pub fn write_cameras(path: impl AsRef<Path>, cams: &[CameraRecord]) -> Result<(), CameraError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for c in cams {
        writeln!(f, "{}", c.to_json())?;
    }
    f.flush()?;
    Ok(())
}
