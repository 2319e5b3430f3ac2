//! Dense float images and the `.fmap` container.
//!
//! Images are stored height-major, then width, with channels fastest
//! (`data[(y * width + x) * channels + c]`). Computation runs in `f64`; the
//! on-disk format stores little-endian `f32`:
//!
//! ```text
//! "FMAP" | u32 H | u32 W | u32 C | f32[H*W*C]
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"FMAP";

#[derive(Debug, Error)]
pub enum FmapError {
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A dense `H x W x C` image of `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "image buffer length");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = self.index(y, x, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Copies channels `start..start + count` into a new image.
    pub fn channel_slice(&self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.channels);
        let mut out = Self::zeros(self.height, self.width, count);
        for p in 0..self.pixel_count() {
            let src = &self.data[p * self.channels + start..p * self.channels + start + count];
            out.data[p * count..(p + 1) * count].copy_from_slice(src);
        }
        out
    }

    /// Concatenates images along the channel axis.
    pub fn concat_channels(parts: &[&FloatImage]) -> Result<Self, FmapError> {
        let first = parts.first().expect("at least one part");
        let (h, w) = (first.height, first.width);
        for p in parts {
            if p.height != h || p.width != w {
                return Err(FmapError::ShapeMismatch {
                    expected: (h, w, p.channels),
                    got: p.shape(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[px * p.channels..(px + 1) * p.channels]);
            }
        }
        Ok(Self::from_vec(h, w, total, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape());
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_scaled(&mut self, other: &Self, k: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Re-lays the samples out channel-major (`C x H x W`).
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.pixel_count();
        let mut out = vec![0.0; self.data.len()];
        for p in 0..n {
            for c in 0..self.channels {
                out[c * n + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn from_planar(channels: usize, height: usize, width: usize, planar: &[f64]) -> Self {
        let n = height * width;
        assert_eq!(planar.len(), n * channels);
        let mut out = Self::zeros(height, width, channels);
        for c in 0..channels {
            for p in 0..n {
                out.data[p * channels + c] = planar[c * n + p];
            }
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        for d in [self.height, self.width, self.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FmapError> {
        if bytes.len() < 4 {
            return Err(FmapError::Truncated(bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err(FmapError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(FmapError::Truncated(bytes.len()));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (u(4), u(8), u(12));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or(FmapError::Truncated(16))?;
        let need = 16 + n * 4;
        if bytes.len() < need {
            return Err(FmapError::Truncated(bytes.len()));
        }
        let data = bytes[16..need]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self::from_vec(h, w, c, data))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FmapError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// 8-bit preview of up to three channels; values are clamped to `[0, 1]`.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(y as usize, x as usize);
            let ch = |c: usize| {
                let v = if self.channels >= 3 { px[c] } else { px[0] };
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([ch(0), ch(1), ch(2)])
        })
    }
}
