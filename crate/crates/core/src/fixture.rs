//! The bundled street fixture: a 16³ grid (road, back wall, a tree and a
//! car), one static box around the car, and two forward cameras.
//!
//! Training views are the semantic renders of the grid, so a seeded cloud
//! starts close to its targets.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::camera::{write_cameras, CameraIntrinsics, CameraPose, CameraRecord};
use crate::cli::view_stem;
use crate::condition::{render_conditions, write_boxes, BoundingBox3D};
use crate::fmap::FloatImage;
use crate::grid::{save_grid, OccupancyGrid, SemanticPalette};

pub const GRID_DIMS: [usize; 3] = [16, 16, 16];
pub const VOXEL_SIZE: f64 = 0.25;
pub const IMAGE_SIZE: usize = 32;
pub const FOCAL: f64 = 28.0;

pub const ROAD: u8 = 7;
pub const BUILDING: u8 = 11;
pub const CAR: u8 = 1;
pub const VEGETATION: u8 = 13;
pub const TRUNK: u8 = 14;

/// Short schedules for smoke runs on the fixture.
pub const FIXTURE_CONFIG: &str = "\
[stage1]
steps = 200
densification_interval = 50
densify_from_iter = 50
densify_until_iter = 150

[stage2]
steps = 60
densification_interval = 20
densify_from_iter = 20
densify_until_iter = 50
";

pub fn grid() -> OccupancyGrid {
    let mut g = OccupancyGrid::empty(GRID_DIMS, VOXEL_SIZE, Vector3::new(-2.0, 1.0, 0.0));
    for i in 0..16 {
        for j in 0..16 {
            g.set_label(i, j, 0, ROAD);
        }
        for k in 1..12 {
            g.set_label(i, 15, k, BUILDING);
        }
    }
    for i in 6..10 {
        for j in 5..7 {
            for k in 1..3 {
                g.set_label(i, j, k, CAR);
            }
        }
    }
    for k in 1..5 {
        g.set_label(2, 10, k, TRUNK);
    }
    for i in 1..4 {
        for j in 9..12 {
            for k in 5..7 {
                g.set_label(i, j, k, VEGETATION);
            }
        }
    }
    g
}

/// A static box enclosing the car voxels.
pub fn boxes() -> Vec<BoundingBox3D> {
    let g = grid();
    let lo = g.voxel_center(6, 5, 1);
    let hi = g.voxel_center(9, 6, 2);
    let center = (lo + hi) / 2.0;
    let size = hi - lo + Vector3::repeat(VOXEL_SIZE);
    vec![BoundingBox3D::new(1, center, size, Matrix3::identity()).expect("valid box")]
}

pub fn cameras() -> Vec<CameraRecord> {
    let intr = CameraIntrinsics::centered(FOCAL, IMAGE_SIZE, IMAGE_SIZE);
    let target = Vector3::new(0.0, 3.5, 0.8);
    [-0.4, 0.4]
        .into_iter()
        .map(|x| CameraRecord {
            intr,
            pose: CameraPose::look_at(Vector3::new(x, -0.5, 1.3), target, Vector3::z()),
            frame: 0,
        })
        .collect()
}

/// Semantic render of the grid from every fixture camera.
pub fn views() -> Vec<FloatImage> {
    let (g, pal, b) = (grid(), SemanticPalette::default_urban(), boxes());
    cameras()
        .iter()
        .map(|c| render_conditions(&g, &pal, &b, c.frame, &c.intr, &c.pose).semantic)
        .collect()
}

/// Writes `grid.occ`, `boxes.jsonl`, `cameras.jsonl`, `config.toml` and
/// `views/cam_XXXXX.fmap` under `dir`.
pub fn write_fixture(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir.join("views"))?;
    save_grid(&grid(), dir.join("grid.occ")).map_err(std::io::Error::other)?;
    write_boxes(dir.join("boxes.jsonl"), &boxes()).map_err(std::io::Error::other)?;
    write_cameras(dir.join("cameras.jsonl"), &cameras()).map_err(std::io::Error::other)?;
    fs::write(dir.join("config.toml"), FIXTURE_CONFIG)?;
    for (i, v) in views().iter().enumerate() {
        v.save(dir.join("views").join(format!("{}.fmap", view_stem(i))))?;
    }
    Ok(())
}
