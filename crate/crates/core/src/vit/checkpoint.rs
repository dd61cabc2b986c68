//! Binary checkpoint container.
//!
//! Layout: `VITL`, u32 LE version, u64 LE manifest length, UTF-8 JSON
//! manifest, then every weight as f32 LE in manifest order. A file may hold
//! several models (one per building); their payloads follow each other in
//! manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_count, param_layout, ParamSpec, VitConfig, VitError, VitWeights};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"VITL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("payload has {extra} bytes beyond what the manifest declares")]
    LengthMismatch { extra: u64 },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("param_count {declared} disagrees with shapes summing to {actual}")]
    ParamCount { declared: usize, actual: usize },
    #[error(transparent)]
    Weights(#[from] VitError),
}

impl CheckpointError {
    /// Short stable label for the failure class.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Io(_) => "io",
            Self::BadMagic(_) => "bad-magic",
            Self::UnsupportedVersion(_) => "unsupported-version",
            Self::Truncated { .. } => "truncated",
            Self::LengthMismatch { .. } => "length-mismatch",
            Self::Manifest(_) => "bad-manifest",
            Self::ParamCount { .. } => "param-count",
            Self::Weights(_) => "bad-weights",
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// One stored model plus caller-defined metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub weights: VitWeights<f32>,
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub models: Vec<StoredModel>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    config: VitConfig,
    weights: Vec<ParamSpec>,
    param_count: usize,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    models: Vec<ModelManifest>,
    #[serde(default)]
    metadata: serde_json::Value,
}

fn check_counts(config: &VitConfig, specs: &[ParamSpec], declared: usize) -> Result<()> {
    let actual: usize = specs.iter().map(ParamSpec::len).sum();
    if declared != actual || param_count(config) != actual {
        return Err(CheckpointError::ParamCount { declared, actual });
    }
    Ok(())
}

pub fn encode(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let mut manifest = Manifest {
        models: Vec::with_capacity(checkpoint.models.len()),
        metadata: checkpoint.metadata.clone(),
    };
    let mut total = 0;
    for m in &checkpoint.models {
        let config = m.weights.config().clone();
        let specs = m.weights.layout().to_vec();
        let count = m.weights.param_count();
        check_counts(&config, &specs, count)?;
        total += count;
        manifest.models.push(ModelManifest {
            config,
            weights: specs,
            param_count: count,
            metadata: m.metadata.clone(),
        });
    }
    let json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 4 * total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in &checkpoint.models {
        for t in m.weights.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, section: &'static str) -> Result<&'a [u8]> {
    let available = bytes.len().saturating_sub(at);
    if available < n {
        return Err(CheckpointError::Truncated {
            section,
            needed: n as u64,
            available: available as u64,
        });
    }
    Ok(&bytes[at..at + n])
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let magic = take(bytes, 0, 4, "header").map_err(|e| match bytes.len() {
        0..=3 if !MAGIC.starts_with(bytes) => CheckpointError::BadMagic(bytes.to_vec()),
        _ => e,
    })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "header")?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(take(bytes, 8, 8, "header")?.try_into().unwrap());
    let available = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > available {
        return Err(CheckpointError::Truncated {
            section: "manifest",
            needed: manifest_len,
            available,
        });
    }
    let manifest_len = manifest_len as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + manifest_len])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut needed: u64 = 0;
    for m in &manifest.models {
        m.config.validate()?;
        if m.weights != param_layout(&m.config) {
            return Err(CheckpointError::Manifest(
                "weight list does not match the config".into(),
            ));
        }
        check_counts(&m.config, &m.weights, m.param_count)?;
        needed += 4 * m.param_count as u64;
    }
    let mut at = HEADER_LEN + manifest_len;
    let available = (bytes.len() - at) as u64;
    if available < needed {
        return Err(CheckpointError::Truncated {
            section: "payload",
            needed,
            available,
        });
    }
    if available > needed {
        return Err(CheckpointError::LengthMismatch {
            extra: available - needed,
        });
    }

    let mut models = Vec::with_capacity(manifest.models.len());
    for m in manifest.models {
        let mut tensors = Vec::with_capacity(m.weights.len());
        for spec in &m.weights {
            let n = spec.len();
            let data: Vec<f32> = bytes[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 4 * n;
            tensors.push(Tensor::new(spec.shape.clone(), data).map_err(VitError::from)?);
        }
        models.push(StoredModel {
            weights: VitWeights::from_tensors(&m.config, tensors)?,
            metadata: m.metadata,
        });
    }
    Ok(Checkpoint {
        models,
        metadata: manifest.metadata,
    })
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(checkpoint)?;
    crate::io::atomic_write(path.as_ref(), &bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Saves a single model with no metadata.
pub fn save_checkpoint(weights: &VitWeights<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(
        &Checkpoint {
            models: vec![StoredModel {
                weights: weights.clone(),
                metadata: serde_json::Value::Null,
            }],
            metadata: serde_json::Value::Null,
        },
        path,
    )
}

/// Loads a file holding exactly one model.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VitWeights<f32>> {
    let mut ck = read_checkpoint(path)?;
    if ck.models.len() != 1 {
        return Err(CheckpointError::Manifest(format!(
            "expected one model, found {}",
            ck.models.len()
        )));
    }
    Ok(ck.models.remove(0).weights)
}
