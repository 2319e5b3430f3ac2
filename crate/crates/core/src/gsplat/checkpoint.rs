//! Cloud checkpoints: one `.fmap` per parameter group plus `manifest.json`.
//!
//! Each parameter file is an `N x 1 x C` float map in flat cloud order
//! (static set first, then instances by ascending id). The directory is
//! written next to the target and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Gaussian, GaussianCloud, GsplatError, Instance};
use crate::condition::BoundingBox3D;
use crate::fmap::FloatImage;

const GROUPS: [(&str, usize); 5] = [
    ("means", 3),
    ("log_scales", 3),
    ("rotations", 4),
    ("opacity_logits", 1),
    ("colors", 3),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    #[serde(rename = "static")]
    pub static_count: usize,
    pub instances: BTreeMap<u32, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub counts: Counts,
    pub instance_ids: Vec<u32>,
    /// Training stage that produced the cloud; 0 for a fresh initialization.
    pub stage: u8,
    pub step: u64,
}

impl CheckpointManifest {
    pub fn for_cloud(cloud: &GaussianCloud, stage: u8, step: u64) -> Self {
        Self {
            counts: Counts {
                static_count: cloud.static_set.len(),
                instances: cloud.instances.iter().map(|(&id, i)| (id, i.gaussians.len())).collect(),
            },
            instance_ids: cloud.instances.keys().copied().collect(),
            stage,
            step,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.static_count + self.counts.instances.values().sum::<usize>()
    }
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

pub fn save_checkpoint(dir: impl AsRef<Path>, cloud: &GaussianCloud, stage: u8, step: u64) -> Result<(), GsplatError> {
    let dir = dir.as_ref();
    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let n = cloud.len();
    let params: Vec<_> = cloud.iter().map(Gaussian::to_params).collect();
    let mut offset = 0;
    for (name, c) in GROUPS {
        let data = params.iter().flat_map(|p| p[offset..offset + c].iter().copied()).collect();
        FloatImage::from_vec(n, 1, c, data).save(tmp.join(format!("{name}.fmap")))?;
        offset += c;
    }
    let manifest = CheckpointManifest::for_cloud(cloud, stage, step);
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Loads a checkpoint, attaching each instance set to its box from `boxes`.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
    boxes: &[BoundingBox3D],
) -> Result<(GaussianCloud, CheckpointManifest), GsplatError> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let n = manifest.counts.static_count + manifest.counts.instances.values().sum::<usize>();
    let mut groups = Vec::new();
    for (name, c) in GROUPS {
        let img = FloatImage::load(dir.join(format!("{name}.fmap")))?;
        if img.shape() != (n, 1, c) {
            return Err(GsplatError::Checkpoint(format!("{name}.fmap has shape {:?}, expected ({n}, 1, {c})", img.shape())));
        }
        groups.push(img);
    }
    let gaussian = |i: usize| {
        let mut p = [0.0; 14];
        let mut o = 0;
        for g in &groups {
            p[o..o + g.channels].copy_from_slice(g.pixel(i, 0));
            o += g.channels;
        }
        Gaussian::from_params(&p)
    };
    let mut cloud = GaussianCloud {
        static_set: (0..manifest.counts.static_count).map(gaussian).collect(),
        instances: BTreeMap::new(),
    };
    let mut start = manifest.counts.static_count;
    for (&id, &count) in &manifest.counts.instances {
        let bbox = boxes
            .iter()
            .find(|b| b.id == id)
            .cloned()
            .ok_or_else(|| GsplatError::Checkpoint(format!("no box with id {id}")))?;
        cloud.instances.insert(
            id,
            Instance {
                gaussians: (start..start + count).map(gaussian).collect(),
                bbox,
            },
        );
        start += count;
    }
    Ok((cloud, manifest))
}
