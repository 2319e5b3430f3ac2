//! Per-view condition maps rendered from the occupancy grid and 3D boxes.
//!
//! Three maps are produced for a camera:
//!
//! * `S` (3 channels): palette color of the first occupied voxel along each
//!   pixel ray, found with an exact integer voxel walk.
//! * `D` (1 channel): camera-frame depth of the ray's entry into that voxel,
//!   divided by the far clip. `0` means no hit.
//! * `R` (9 channels): row-major camera-frame rotation of the nearest box
//!   whose projected hull covers the pixel. The zero vector means no box.
//!
//! [`pack_control`] stacks them as the 13-channel control signal `[R | S | D]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{rotation_residual, CameraIntrinsics, CameraPose};
use crate::fmap::FloatImage;
use crate::grid::{OccupancyGrid, SemanticPalette};

pub const ROTATION_CHANNELS: usize = 9;
pub const SEMANTIC_CHANNELS: usize = 3;
pub const DEPTH_CHANNELS: usize = 1;
pub const CONTROL_CHANNELS: usize = ROTATION_CHANNELS + SEMANTIC_CHANNELS + DEPTH_CHANNELS;

/// Camera-frame depth of the clipping plane used for box hulls.
const HULL_NEAR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid box {id}: {reason}")]
    InvalidBox { id: u32, reason: String },
    #[error("box file line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Box placement: center and world-from-box rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPose {
    pub center: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl BoxPose {
    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.center
    }

    pub fn to_box(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.center)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox3D {
    pub id: u32,
    pub center: Vector3<f64>,
    /// Length, width, height along the box's local x, y, z axes.
    pub size: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub per_frame_pose: Option<BTreeMap<u32, BoxPose>>,
}

impl BoundingBox3D {
    pub fn new(id: u32, center: Vector3<f64>, size: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self, ConditionError> {
        let b = Self {
            id,
            center,
            size,
            rotation,
            per_frame_pose: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), ConditionError> {
        let bad = |reason: String| ConditionError::InvalidBox { id: self.id, reason };
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(bad(format!("size {:?}", self.size.as_slice())));
        }
        let rotations = std::iter::once(&self.rotation)
            .chain(self.per_frame_pose.iter().flat_map(|m| m.values().map(|p| &p.rotation)));
        for r in rotations {
            let res = rotation_residual(r);
            if res > 1e-6 {
                return Err(bad(format!("rotation residual {res:e}")));
            }
        }
        Ok(())
    }

    pub fn is_dynamic(&self) -> bool {
        self.per_frame_pose.is_some()
    }

    /// Pose at `frame`; static boxes ignore the frame, dynamic boxes may lack it.
    pub fn pose_at(&self, frame: u32) -> Option<BoxPose> {
        match &self.per_frame_pose {
            None => Some(BoxPose {
                center: self.center,
                rotation: self.rotation,
            }),
            Some(frames) => frames.get(&frame).copied(),
        }
    }

    pub fn contains(&self, pose: &BoxPose, p: &Vector3<f64>) -> bool {
        let local = pose.to_box(p);
        (0..3).all(|a| local[a].abs() <= self.size[a] / 2.0)
    }

    pub fn corners(&self, pose: &BoxPose) -> [Vector3<f64>; 8] {
        std::array::from_fn(|i| {
            let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
            let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
            let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
            pose.to_world(&Vector3::new(sx * self.size.x, sy * self.size.y, sz * self.size.z))
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FramePoseLine {
    center: [f64; 3],
    rotation: [f64; 9],
}

#[derive(Serialize, Deserialize)]
struct BoxLine {
    id: u32,
    center: [f64; 3],
    size: [f64; 3],
    rotation: [f64; 9],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<BTreeMap<u32, FramePoseLine>>,
}

fn flat9(m: &Matrix3<f64>) -> [f64; 9] {
    std::array::from_fn(|i| m[(i / 3, i % 3)])
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<BoundingBox3D>, ConditionError> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let b: BoxLine = serde_json::from_str(&line).map_err(|source| ConditionError::Parse { line: i + 1, source })?;
        let per_frame_pose = b.frames.map(|frames| {
            frames
                .into_iter()
                .map(|(f, p)| {
                    (
                        f,
                        BoxPose {
                            center: Vector3::from(p.center),
                            rotation: Matrix3::from_row_slice(&p.rotation),
                        },
                    )
                })
                .collect()
        });
        let bx = BoundingBox3D {
            id: b.id,
            center: Vector3::from(b.center),
            size: Vector3::from(b.size),
            rotation: Matrix3::from_row_slice(&b.rotation),
            per_frame_pose,
        };
        bx.validate()?;
        out.push(bx);
    }
    Ok(out)
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[BoundingBox3D]) -> Result<(), ConditionError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for b in boxes {
        let line = BoxLine {
            id: b.id,
            center: b.center.into(),
            size: b.size.into(),
            rotation: flat9(&b.rotation),
            frames: b.per_frame_pose.as_ref().map(|m| {
                m.iter()
                    .map(|(&k, p)| {
                        (
                            k,
                            FramePoseLine {
                                center: p.center.into(),
                                rotation: flat9(&p.rotation),
                            },
                        )
                    })
                    .collect()
            }),
        };
        writeln!(f, "{}", serde_json::to_string(&line).expect("box serializes"))?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMaps {
    pub semantic: FloatImage,
    pub depth: FloatImage,
    pub rotation: FloatImage,
}

impl ConditionMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            semantic: FloatImage::zeros(height, width, SEMANTIC_CHANNELS),
            depth: FloatImage::zeros(height, width, DEPTH_CHANNELS),
            rotation: FloatImage::zeros(height, width, ROTATION_CHANNELS),
        }
    }

    pub fn control(&self) -> FloatImage {
        pack_control(&self.semantic, &self.depth, &self.rotation).expect("condition maps share a shape")
    }

    pub fn from_control(c: &FloatImage) -> Result<Self, ConditionError> {
        let (s, d, r) = unpack_control(c)?;
        Ok(Self {
            semantic: s,
            depth: d,
            rotation: r,
        })
    }

    /// Largest orthonormality residual over all nonzero rotation pixels.
    pub fn max_rotation_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for y in 0..self.rotation.height {
            for x in 0..self.rotation.width {
                let v = self.rotation.pixel(y, x);
                if v.iter().any(|&a| a != 0.0) {
                    worst = worst.max(rotation_residual(&Matrix3::from_row_slice(v)));
                }
            }
        }
        worst
    }
}

/// Stacks the maps as `[R(9) | S(3) | D(1)]`.
pub fn pack_control(s: &FloatImage, d: &FloatImage, r: &FloatImage) -> Result<FloatImage, ConditionError> {
    let channels = [
        (r, ROTATION_CHANNELS, "R"),
        (s, SEMANTIC_CHANNELS, "S"),
        (d, DEPTH_CHANNELS, "D"),
    ];
    for (img, c, name) in channels {
        if img.channels != c || img.height != s.height || img.width != s.width {
            return Err(ConditionError::ShapeMismatch(format!(
                "{name} is {:?}, expected ({}, {}, {c})",
                img.shape(),
                s.height,
                s.width
            )));
        }
    }
    FloatImage::concat_channels(&[r, s, d]).map_err(|e| ConditionError::ShapeMismatch(e.to_string()))
}

pub fn unpack_control(c: &FloatImage) -> Result<(FloatImage, FloatImage, FloatImage), ConditionError> {
    if c.channels != CONTROL_CHANNELS {
        return Err(ConditionError::ShapeMismatch(format!(
            "control signal has {} channels, expected {CONTROL_CHANNELS}",
            c.channels
        )));
    }
    Ok((
        c.channel_slice(ROTATION_CHANNELS, SEMANTIC_CHANNELS),
        c.channel_slice(ROTATION_CHANNELS + SEMANTIC_CHANNELS, DEPTH_CHANNELS),
        c.channel_slice(0, ROTATION_CHANNELS),
    ))
}

/// First occupied voxel along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelHit {
    pub cell: [usize; 3],
    pub label: u8,
    /// Ray parameter at the cell entry; with a `z = 1` camera ray this is
    /// the camera-frame depth.
    pub t: f64,
}

/// Exact voxel walk (Amanatides & Woo) from `origin` along `dir` for
/// `t` in `[0, t_far]`. Returns the first non-empty cell.
pub fn first_hit(grid: &OccupancyGrid, origin: &Vector3<f64>, dir: &Vector3<f64>, t_far: f64) -> Option<VoxelHit> {
    let g0 = (origin - grid.origin) / grid.voxel_size;
    let gd = dir / grid.voxel_size;
    let n = grid.dims.map(|d| d as f64);

    let mut t_enter = 0.0f64;
    let mut t_exit = t_far;
    for a in 0..3 {
        if gd[a] == 0.0 {
            if g0[a] < 0.0 || g0[a] >= n[a] {
                return None;
            }
            continue;
        }
        let t0 = (0.0 - g0[a]) / gd[a];
        let t1 = (n[a] - g0[a]) / gd[a];
        t_enter = t_enter.max(t0.min(t1));
        t_exit = t_exit.min(t0.max(t1));
    }
    if t_enter > t_exit || t_enter >= t_far {
        return None;
    }

    let start = g0 + gd * t_enter;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        cell[a] = (start[a].floor() as i64).clamp(0, grid.dims[a] as i64 - 1);
        if gd[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (cell[a] as f64 + 1.0 - g0[a]) / gd[a];
            t_delta[a] = 1.0 / gd[a];
        } else if gd[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - g0[a]) / gd[a];
            t_delta[a] = -1.0 / gd[a];
        }
    }

    let mut t = t_enter;
    loop {
        let [i, j, k] = cell.map(|c| c as usize);
        let label = grid.label(i, j, k);
        if label != 0 {
            return Some(VoxelHit { cell: [i, j, k], label, t });
        }
        let a = if t_max[0] < t_max[1] {
            if t_max[0] < t_max[2] { 0 } else { 2 }
        } else if t_max[1] < t_max[2] {
            1
        } else {
            2
        };
        t = t_max[a];
        if t > t_far {
            return None;
        }
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= grid.dims[a] as i64 {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}

/// Renders `S` and `D`. `far` defaults to the grid diagonal.
pub fn render_scene_prior(
    grid: &OccupancyGrid,
    palette: &SemanticPalette,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    far: Option<f64>,
) -> (FloatImage, FloatImage) {
    let far = far.unwrap_or_else(|| grid.diagonal());
    let (h, w) = (intr.height, intr.width);
    let mut s = FloatImage::zeros(h, w, SEMANTIC_CHANNELS);
    let mut d = FloatImage::zeros(h, w, DEPTH_CHANNELS);
    let origin = pose.center();
    s.data
        .par_chunks_mut(w * SEMANTIC_CHANNELS)
        .zip(d.data.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (srow, drow))| {
            for x in 0..w {
                let dir = pose.rotation * intr.pixel_ray(x as f64, y as f64);
                if let Some(hit) = first_hit(grid, &origin, &dir, far) {
                    srow[x * 3..x * 3 + 3].copy_from_slice(&palette.color(hit.label));
                    drow[x] = hit.t / far;
                }
            }
        });
    (s, d)
}

fn hull_points(bx: &BoundingBox3D, box_pose: &BoxPose, intr: &CameraIntrinsics, pose: &CameraPose) -> Vec<Vector2<f64>> {
    let corners = bx.corners(box_pose).map(|c| pose.to_camera(&c));
    let mut pts3 = Vec::with_capacity(20);
    for c in &corners {
        if c.z >= HULL_NEAR {
            pts3.push(*c);
        }
    }
    // Edges join corners differing in exactly one index bit.
    for i in 0..8usize {
        for bit in [1usize, 2, 4] {
            let j = i | bit;
            if j == i {
                continue;
            }
            let (a, b) = (corners[i], corners[j]);
            if (a.z - HULL_NEAR) * (b.z - HULL_NEAR) < 0.0 {
                let s = (HULL_NEAR - a.z) / (b.z - a.z);
                pts3.push(a + (b - a) * s);
            }
        }
    }
    pts3.iter()
        .map(|p| Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy))
        .collect()
}

fn cross2(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull(mut pts: Vec<Vector2<f64>>) -> Vec<Vector2<f64>> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for p in iter {
            while hull.len() >= start + 2 && cross2(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[Vector2<f64>], p: &Vector2<f64>) -> bool {
    let n = hull.len();
    n >= 3 && (0..n).all(|i| cross2(&hull[i], &hull[(i + 1) % n], p) >= 0.0)
}

/// Renders `R`: camera-frame box rotations over each box's projected hull,
/// nearest box center winning overlaps.
pub fn render_rotation_map(
    boxes: &[BoundingBox3D],
    frame: u32,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> FloatImage {
    let (h, w) = (intr.height, intr.width);
    let mut r = FloatImage::zeros(h, w, ROTATION_CHANNELS);
    let mut zbuf = vec![f64::INFINITY; h * w];
    let cam_from_world = pose.rotation.transpose();
    for bx in boxes {
        let Some(box_pose) = bx.pose_at(frame) else { continue };
        let center_z = pose.to_camera(&box_pose.center).z;
        let hull = convex_hull(hull_points(bx, &box_pose, intr, pose));
        if hull.len() < 3 {
            continue;
        }
        let m_cam = flat9(&(cam_from_world * box_pose.rotation));
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let (xa, xb) = (x0.ceil().max(0.0) as i64, x1.floor().min(w as f64 - 1.0) as i64);
        let (ya, yb) = (y0.ceil().max(0.0) as i64, y1.floor().min(h as f64 - 1.0) as i64);
        for y in (ya..=yb).map(|v| v as usize) {
            for x in (xa..=xb).map(|v| v as usize) {
                let idx = y * w + x;
                if center_z < zbuf[idx] && inside_hull(&hull, &Vector2::new(x as f64, y as f64)) {
                    zbuf[idx] = center_z;
                    r.pixel_mut(y, x).copy_from_slice(&m_cam);
                }
            }
        }
    }
    r
}

pub fn render_conditions(
    grid: &OccupancyGrid,
    palette: &SemanticPalette,
    boxes: &[BoundingBox3D],
    frame: u32,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> ConditionMaps {
    let (semantic, depth) = render_scene_prior(grid, palette, intr, pose, None);
    ConditionMaps {
        semantic,
        depth,
        rotation: render_rotation_map(boxes, frame, intr, pose),
    }
}
