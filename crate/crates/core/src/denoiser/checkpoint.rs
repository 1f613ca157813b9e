//! Checkpoints: a JSON manifest next to a little-endian `f64` parameter blob.
//!
//! `model.json` names its blob (`model.bin` by default) relative to itself.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{DenoiserConfig, Transformer};
use crate::error::{invalid, Result};
use crate::schedule::ScheduleSpec;
use crate::system::System;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DenoiserConfig,
    pub system: System,
    pub schedule: ScheduleSpec,
    pub step: usize,
    pub seed: u64,
    pub blob: String,
    pub num_params: usize,
    /// Parameter tensors in blob order.
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Transformer,
}

impl Checkpoint {
    pub fn new(model: Transformer, system: System, schedule: ScheduleSpec, step: usize, seed: u64) -> Self {
        let tensors = model
            .layout()
            .specs()
            .iter()
            .map(|s| TensorEntry { name: s.name.clone(), rows: s.rows, cols: s.cols, offset: s.offset })
            .collect();
        let manifest = Manifest {
            version: FORMAT_VERSION,
            config: model.config().clone(),
            system,
            schedule,
            step,
            seed,
            blob: String::new(),
            num_params: model.num_params(),
            tensors,
        };
        Self { manifest, model }
    }

    /// Writes `path` (the manifest) and a sibling `.bin` blob.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob_path = path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| crate::error::Error::InvalidArgument(format!("bad checkpoint path {}", path.display())))?
            .to_string();
        let mut manifest = self.manifest.clone();
        manifest.blob = blob_name;
        let mut bytes = Vec::with_capacity(self.model.num_params() * 8);
        for v in self.model.params() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&blob_path, bytes)?;
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.version != FORMAT_VERSION {
            return invalid(format!("unsupported checkpoint version {}", manifest.version));
        }
        let blob_path: PathBuf = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let bytes = fs::read(&blob_path)?;
        if bytes.len() != manifest.num_params * 8 {
            return invalid(format!("blob has {} bytes, expected {}", bytes.len(), manifest.num_params * 8));
        }
        let params: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let model = Transformer::from_parts(manifest.config.clone(), params)?;
        let expected = Checkpoint::new(model.clone(), manifest.system, manifest.schedule.clone(), 0, 0).manifest.tensors;
        if expected != manifest.tensors {
            return invalid("checkpoint parameter ordering does not match the model layout");
        }
        Ok(Self { manifest, model })
    }
}
