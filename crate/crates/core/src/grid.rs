//! Semantic occupancy grids and their color palette.
//!
//! A grid is a dense `nx * ny * nz` array of `u8` labels (x fastest, then y,
//! then z), with label `0` reserved for empty space. Cells are half-open:
//! a point exactly on the max face of the grid is outside.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"OCCG";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 4 + 12;

const DEFAULT_PALETTE_JSON: &str = include_str!("../assets/palette.json");

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at byte {offset}")]
    BadVersion { version: u32, offset: usize },
    #[error("file truncated at byte {offset}")]
    TruncatedFile { offset: usize },
    #[error("label {label} out of range for a {palette_len}-entry palette at byte {offset}")]
    LabelOutOfRange {
        label: u8,
        palette_len: usize,
        offset: usize,
    },
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("invalid palette: {0}")]
    Palette(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: u8,
    pub rgb: [u8; 3],
    pub name: String,
}

/// Label-to-color table. Ids are contiguous from 0 and id 0 is black "empty".
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPalette {
    entries: Vec<PaletteEntry>,
}

impl SemanticPalette {
    pub fn new(mut entries: Vec<PaletteEntry>) -> Result<Self, GridError> {
        entries.sort_by_key(|e| e.id);
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(GridError::Palette(format!(
                    "ids must be unique and contiguous from 0, found {} at position {i}",
                    e.id
                )));
            }
        }
        match entries.first() {
            Some(e) if e.rgb == [0, 0, 0] => {}
            _ => return Err(GridError::Palette("label 0 must map to (0,0,0)".into())),
        }
        Ok(Self { entries })
    }

    /// The 19-class street-scene table shipped with the crate.
    pub fn default_urban() -> Self {
        Self::from_json(DEFAULT_PALETTE_JSON).expect("bundled palette is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    /// Color of `label` scaled to `[0, 1]`; unknown labels render black.
    pub fn color(&self, label: u8) -> [f64; 3] {
        match self.entries.get(label as usize) {
            Some(e) => e.rgb.map(|c| c as f64 / 255.0),
            None => [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vector3<f64>,
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Vector3<f64>,
        labels: Vec<u8>,
    ) -> Result<Self, GridError> {
        if labels.len() != dims[0] * dims[1] * dims[2] {
            return Err(GridError::Invalid(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(GridError::Invalid(format!("voxel_size {voxel_size}")));
        }
        Ok(Self {
            dims,
            voxel_size,
            origin,
            labels,
        })
    }

    pub fn empty(dims: [usize; 3], voxel_size: f64, origin: Vector3<f64>) -> Self {
        Self::new(dims, voxel_size, origin, vec![0; dims[0] * dims[1] * dims[2]])
            .expect("valid empty grid")
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn label(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.linear_index(i, j, k)]
    }

    pub fn set_label(&mut self, i: usize, j: usize, k: usize, label: u8) {
        let idx = self.linear_index(i, j, k);
        self.labels[idx] = label;
    }

    /// Per-axis size of the grid in meters.
    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.dims[0] as f64 * self.voxel_size,
            self.dims[1] as f64 * self.voxel_size,
            self.dims[2] as f64 * self.voxel_size,
        )
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        self.origin + self.extent()
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Cell containing `p`, or `None` outside the half-open extent.
    pub fn cell_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            cell[a] = f as usize;
        }
        Some(cell)
    }

    /// Label of the cell containing `p`; 0 outside the grid.
    pub fn voxel_at(&self, p: &Vector3<f64>) -> u8 {
        match self.cell_of(p) {
            Some([i, j, k]) => self.label(i, j, k),
            None => 0,
        }
    }

    /// Iterates `(i, j, k, label)` over non-empty cells in storage order.
    pub fn occupied(&self) -> impl Iterator<Item = ([usize; 3], u8)> + '_ {
        let [nx, ny, _] = self.dims;
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(move |(idx, &l)| ([idx % nx, (idx / nx) % ny, idx / (nx * ny)], l))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.labels.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.voxel_size as f32).to_le_bytes());
        for a in 0..3 {
            buf.extend_from_slice(&(self.origin[a] as f32).to_le_bytes());
        }
        buf.extend_from_slice(&self.labels);
        buf
    }

    /// Parses an `.occ` buffer, rejecting labels outside a `palette_len` palette.
    pub fn from_bytes(bytes: &[u8], palette_len: usize) -> Result<Self, GridError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(GridError::TruncatedFile {
                    offset: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        if &bytes[..4] != MAGIC {
            return Err(GridError::BadMagic { offset: 0 });
        }
        need(HEADER_LEN)?;
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
        let version = u32_at(4);
        if version != VERSION {
            return Err(GridError::BadVersion { version, offset: 4 });
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let voxel_size = f32_at(20);
        let origin = Vector3::new(f32_at(24), f32_at(28), f32_at(32));
        let count = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or(GridError::Invalid(format!("dims {dims:?} overflow")))?;
        need(HEADER_LEN + count)?;
        let labels = bytes[HEADER_LEN..HEADER_LEN + count].to_vec();
        if let Some(pos) = labels.iter().position(|&l| l as usize >= palette_len) {
            return Err(GridError::LabelOutOfRange {
                label: labels[pos],
                palette_len,
                offset: HEADER_LEN + pos,
            });
        }
        Self::new(dims, voxel_size, origin, labels)
    }
}

pub fn load_grid(path: impl AsRef<Path>, palette: &SemanticPalette) -> Result<OccupancyGrid, GridError> {
    OccupancyGrid::from_bytes(&fs::read(path)?, palette.len())
}

pub fn save_grid(grid: &OccupancyGrid, path: impl AsRef<Path>) -> Result<(), GridError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&grid.to_bytes())?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut impl Rng, n: usize, palette_len: u8) -> OccupancyGrid {
        let labels = (0..n * n * n)
            .map(|_| if rng.random_bool(0.3) { rng.random_range(1..palette_len) } else { 0 })
            .collect();
        OccupancyGrid::new([n; 3], 0.2f32 as f64, Vector3::new(-1.5, 0.25, -0.5), labels).unwrap()
    }

    #[test]
    fn default_palette_shape() {
        let p = SemanticPalette::default_urban();
        assert_eq!(p.len(), 19);
        assert_eq!(p.entries()[0].name, "empty");
        assert_eq!(p.color(0), [0.0; 3]);
    }

    #[test]
    fn palette_rejects_gaps_and_nonblack_empty() {
        let e = |id, rgb| PaletteEntry { id, rgb, name: String::new() };
        assert!(SemanticPalette::new(vec![e(0, [0, 0, 0]), e(2, [1, 1, 1])]).is_err());
        assert!(SemanticPalette::new(vec![e(0, [1, 0, 0])]).is_err());
        assert!(SemanticPalette::new(vec![e(1, [1, 1, 1]), e(0, [0, 0, 0])]).is_ok());
    }

    #[test]
    fn all_empty_grid_roundtrip() {
        let g = OccupancyGrid::empty([2, 2, 2], 0.2f32 as f64, Vector3::zeros());
        let back = OccupancyGrid::from_bytes(&g.to_bytes(), 19).unwrap();
        assert_eq!(back.labels, vec![0; 8]);
        assert_eq!(back, g);
    }

    #[test]
    fn perception_range_extent() {
        let g = OccupancyGrid::empty([256, 256, 32], 0.2, Vector3::zeros());
        let e = g.extent();
        assert!((e.x - 51.2).abs() < 1e-9);
        assert!((e.y - 51.2).abs() < 1e-9);
        assert!((e.z - 6.4).abs() < 1e-9);
        // Same check through the f32 file encoding.
        let back = OccupancyGrid::from_bytes(&g.to_bytes(), 19).unwrap();
        assert!((back.extent() - Vector3::new(51.2, 51.2, 6.4)).amax() < 1e-5);
    }

    #[test]
    fn random_grid_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_grid(&mut rng, 16, 19);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.occ");
        save_grid(&g, &path).unwrap();
        let back = load_grid(&path, &SemanticPalette::default_urban()).unwrap();
        assert_eq!(back.labels, g.labels);
        assert_eq!(back, g);
    }

    #[test]
    fn load_faults_report_offsets() {
        let mut g = OccupancyGrid::empty([2, 2, 2], 0.5, Vector3::zeros());
        g.set_label(1, 0, 0, 30);
        let bytes = g.to_bytes();
        match OccupancyGrid::from_bytes(&bytes, 19) {
            Err(GridError::LabelOutOfRange { offset, label: 30, .. }) => assert_eq!(offset, HEADER_LEN + 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            OccupancyGrid::from_bytes(&bytes[..HEADER_LEN + 3], 64),
            Err(GridError::TruncatedFile { offset }) if offset == HEADER_LEN + 3
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(OccupancyGrid::from_bytes(&bad, 64), Err(GridError::BadMagic { offset: 0 })));
    }

    #[test]
    fn voxel_at_corner_and_outside() {
        let mut g = OccupancyGrid::empty([4, 4, 4], 0.25, Vector3::new(1.0, 2.0, 3.0));
        g.set_label(0, 0, 0, 5);
        g.set_label(3, 3, 3, 6);
        assert_eq!(g.voxel_at(&g.origin), 5);
        assert_eq!(g.voxel_at(&Vector3::new(0.99, 2.1, 3.1)), 0);
        // Max face is outside; just inside it is the last cell.
        assert_eq!(g.voxel_at(&g.max_corner()), 0);
        assert_eq!(g.voxel_at(&(g.max_corner() - Vector3::repeat(1e-9))), 6);
    }

    #[test]
    fn voxel_at_matches_floor_division_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_grid(&mut rng, 16, 19);
        let lo = g.origin - Vector3::repeat(0.5);
        let hi = g.max_corner() + Vector3::repeat(0.5);
        for _ in 0..1000 {
            let p = Vector3::from_fn(|a, _| rng.random_range(lo[a]..hi[a]));
            let mut idx = [0i64; 3];
            let mut inside = true;
            for a in 0..3 {
                idx[a] = ((p[a] - g.origin[a]) / g.voxel_size).floor() as i64;
                inside &= idx[a] >= 0 && idx[a] < 16;
            }
            let expected = if inside {
                g.labels[(idx[0] + 16 * idx[1] + 256 * idx[2]) as usize]
            } else {
                0
            };
            assert_eq!(g.voxel_at(&p), expected, "{p:?}");
        }
    }

    #[test]
    fn occupied_iterates_cells() {
        let mut g = OccupancyGrid::empty([3, 2, 2], 1.0, Vector3::zeros());
        g.set_label(2, 1, 1, 4);
        g.set_label(0, 1, 0, 3);
        let cells: Vec<_> = g.occupied().collect();
        assert_eq!(cells, vec![([0, 1, 0], 3), ([2, 1, 1], 4)]);
    }

    proptest::proptest! {
        #[test]
        fn voxel_at_is_piecewise_constant(i in 0usize..8, j in 0usize..8, k in 0usize..8,
                                          a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64((i * 64 + j * 8 + k) as u64);
            let g = random_grid(&mut rng, 8, 19);
            let corner = g.origin + Vector3::new(i as f64, j as f64, k as f64) * g.voxel_size;
            let p = corner + Vector3::repeat(a * g.voxel_size);
            let q = corner + Vector3::repeat(b * g.voxel_size);
            proptest::prop_assert_eq!(g.voxel_at(&p), g.voxel_at(&q));
        }
    }
}
