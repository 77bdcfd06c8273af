//! On-disk model format: a directory holding `manifest.json` and
//! `weights.bin` (little-endian `f32`, tensors concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::MoeLmConfig;
use super::lm::MoeLm;
use super::weights::{expected_shapes, LmWeights};
use crate::error::{Error, IoContext, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    training_step: u64,
    config: MoeLmConfig,
    tensors: Vec<TensorEntry>,
}

/// A model snapshot. Weights are held at `f32` precision so that saving and
/// loading reproduces them bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MoeLm,
    pub training_step: u64,
}

impl Checkpoint {
    pub fn new(mut model: MoeLm, training_step: u64) -> Self {
        model.weights.round_to_f32();
        Checkpoint { model, training_step }
    }

    pub fn config(&self) -> &MoeLmConfig {
        &self.model.config
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.model.weights.named_tensors() {
            let offset = blob.len() as u64;
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            training_step: self.training_step,
            config: self.model.config.clone(),
            tensors,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        let weights_path = dir.join(WEIGHTS);
        fs::write(&weights_path, blob).at(&weights_path)?;
        let manifest_path = dir.join(MANIFEST);
        fs::write(&manifest_path, json).at(&manifest_path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).at(&manifest_path)?;
        let version: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("manifest is not JSON: {e}")))?;
        let found = version
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::CorruptCheckpoint("manifest lacks format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::VersionMismatch {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(version).map_err(|e| Error::CorruptCheckpoint(format!("bad manifest: {e}")))?;
        manifest.config.validate()?;

        let expected = expected_shapes(&manifest.config);
        if expected.len() != manifest.tensors.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "manifest lists {} tensors, config implies {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            if *name != entry.name {
                return Err(Error::CorruptCheckpoint(format!(
                    "expected tensor `{name}`, found `{}`",
                    entry.name
                )));
            }
            if *shape != entry.shape {
                return Err(Error::ShapeMismatch {
                    tensor: name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            if entry.dtype != "f32" {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor `{name}` has unsupported dtype {}",
                    entry.dtype
                )));
            }
        }

        let weights_path = dir.join(WEIGHTS);
        let blob = fs::read(&weights_path).at(&weights_path)?;
        let mut flat = Vec::with_capacity(blob.len() / 4);
        for entry in &manifest.tensors {
            let numel: u64 = entry.shape.iter().map(|&d| d as u64).product();
            if entry.length != numel * 4 {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor `{}` declares {} bytes for {numel} values",
                    entry.name, entry.length
                )));
            }
            let end = entry.offset.saturating_add(entry.length);
            if end > blob.len() as u64 {
                return Err(Error::CorruptCheckpoint(format!(
                    "weights.bin is truncated: tensor `{}` needs bytes up to {end}, file has {}",
                    entry.name,
                    blob.len()
                )));
            }
            let bytes = &blob[entry.offset as usize..end as usize];
            flat.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
            );
        }
        crate::math::ensure_finite(&flat, "checkpoint weights")?;
        let mut weights = LmWeights::init(&manifest.config, 0)?;
        weights.assign_flat(&flat)?;
        Ok(Checkpoint {
            model: MoeLm {
                config: manifest.config,
                weights,
            },
            training_step: manifest.training_step,
        })
    }
}
