//! Binary checkpoint format.
//!
//! ```text
//! "TCKP" | version: u32 LE | manifest length: u64 LE | manifest (JSON) | blob
//! ```
//!
//! The manifest records the model configuration, training metadata and, for
//! every parameter, its name, shape and byte offset into the blob. The blob
//! is the parameters as little-endian `f32`, in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use taskclip_tensor::{ParamTree, Tensor};

use crate::error::{CheckpointError, Error, Result};
use crate::pipeline::Model;
use crate::recalibration::{param_template, ModelConfig};

pub const MAGIC: [u8; 4] = *b"TCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        self.model.params.visit("", &mut |name, t| {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        });
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + blob.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |needed: usize| CheckpointError::Truncated {
            needed,
            found: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_LEN).into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic }.into());
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN).into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let blob_start = HEADER_LEN
            .checked_add(manifest_len)
            .ok_or_else(|| truncated(usize::MAX))?;
        if bytes.len() < blob_start {
            return Err(truncated(blob_start).into());
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let blob = &bytes[blob_start..];

        let config = manifest.config;
        config
            .validate()
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut params = param_template::<f32>(&config);
        let mut entries = manifest.tensors.iter();
        let mut failure: Option<Error> = None;
        params.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            failure = fill(name, t, entries.next(), blob, blob_start).err();
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = entries.next() {
            return Err(CheckpointError::Manifest(format!("unexpected tensor {}", extra.name)).into());
        }
        let needed: usize = manifest
            .tensors
            .last()
            .map_or(0, |e| e.offset + 4 * e.shape[0] * e.shape[1]);
        if blob.len() != needed {
            return Err(CheckpointError::Manifest(format!(
                "blob holds {} bytes, manifest describes {needed}",
                blob.len()
            ))
            .into());
        }
        Ok(Self {
            model: Model::from_params(config, params)?,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn fill(
    name: &str,
    target: &mut Tensor<f32>,
    entry: Option<&TensorEntry>,
    blob: &[u8],
    blob_start: usize,
) -> Result<()> {
    let entry = entry
        .ok_or_else(|| CheckpointError::Manifest(format!("missing tensor {name}")))?;
    if entry.name != name {
        return Err(CheckpointError::Manifest(format!(
            "expected tensor {name}, found {}",
            entry.name
        ))
        .into());
    }
    if entry.shape != target.shape() {
        return Err(CheckpointError::Manifest(format!(
            "tensor {name} has shape {:?}, configuration implies {:?}",
            entry.shape,
            target.shape()
        ))
        .into());
    }
    let end = entry.offset + 4 * target.len();
    if end > blob.len() {
        return Err(CheckpointError::Truncated {
            needed: blob_start + end,
            found: blob_start + blob.len(),
        }
        .into());
    }
    for (v, chunk) in target
        .data_mut()
        .iter_mut()
        .zip(blob[entry.offset..end].chunks_exact(4))
    {
        *v = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model<f32>, meta: &TrainingMeta, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        meta: meta.clone(),
    }
    .save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let config = ModelConfig {
            embed_dim: 8,
            adapter_hidden: 2,
            layers: 2,
            heads: 2,
            score_dim: 8,
            alpha: 0.3,
            beta: 0.3,
            ffn_dim: 16,
            num_words: 4,
        };
        Checkpoint {
            model: Model::init(config, 9).unwrap(),
            meta: TrainingMeta {
                epochs: 3,
                seed: 9,
                final_loss: Some(0.1234567890123),
            },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = small().to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))
        ));

        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(7)))
        ));

        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
    }

    #[test]
    fn default_architecture_survives_round_trip() {
        let mut config = ModelConfig::for_embed_dim(16);
        config.score_dim = 16;
        let ck = Checkpoint {
            model: Model::init(config, 1).unwrap(),
            meta: TrainingMeta {
                epochs: 0,
                seed: 1,
                final_loss: None,
            },
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model.config.layers, 8);
        assert_eq!(back.model.config.heads, 4);
    }
}
