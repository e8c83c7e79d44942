use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Toy,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
}

/// Checkpoint manifest shared by every encoder backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderManifest {
    pub format_version: u32,
    pub backend: Backend,
    pub dim: usize,
    pub pooling: Pooling,
    /// Backend-specific settings (hash bins and seed for the toy backend,
    /// file names and max length for transformers).
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

impl EncoderManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| PieError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self)?;
        fs::write(&path, body).map_err(|e| PieError::io(&path, e))
    }
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<EncoderManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let body = fs::read_to_string(&path).map_err(|e| PieError::io(&path, e))?;
    Ok(serde_json::from_str(&body)?)
}

pub fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| PieError::io(path, e))
}

pub fn read_f64_blob(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| PieError::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(PieError::Checkpoint(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}
