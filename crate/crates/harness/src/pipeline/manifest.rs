use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pie_core::fingerprint::{file_sha256, sha256_hex};
use serde::{Deserialize, Serialize};

use super::config::Stage;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        Self {
            name: "pie".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    /// Executed in this run.
    Ran,
    /// Key and artifacts matched the previous run; nothing executed.
    Cached,
    /// Not part of this run; artifacts carried over unchanged.
    Kept,
    /// Not part of this run and its artifacts changed on disk since.
    Stale,
    Failed,
}

impl std::fmt::Display for StageStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageStatus::Ran => "ran",
            StageStatus::Cached => "cached",
            StageStatus::Kept => "kept",
            StageStatus::Stale => "stale",
            StageStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: Stage,
    /// Hash of the stage's configuration, seed and input fingerprints.
    pub key: String,
    pub seed: u64,
    pub status: StageStatus,
    /// Run-directory relative path to SHA-256, for every file the stage wrote.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<FileRecord>,
    #[serde(default)]
    pub metrics: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StageRecord {
    /// Fingerprint of everything the stage produced.
    pub fn output_digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(&self.artifacts)
                .expect("string map")
                .as_bytes(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: ToolInfo,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// Input name to path and content hash.
    pub inputs: BTreeMap<String, FileRecord>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let body =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
    }

    /// Writes through a temporary file so a crash never leaves half a manifest.
    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let tmp = run_dir.join(".manifest.json.tmp");
        crate::io::write_json(&tmp, self)?;
        fs::rename(&tmp, run_dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == stage)
    }
}

/// Every regular file below `dir`, sorted, as paths relative to `root`.
pub fn list_files(root: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// File hashes below `dir`, keyed by `/`-separated paths relative to `root`.
pub fn hash_tree(root: &Path, dir: &Path) -> Result<BTreeMap<String, String>> {
    list_files(root, dir)?
        .into_iter()
        .map(|rel| Ok((rel_string(&rel), file_sha256(root.join(&rel))?)))
        .collect()
}

/// Content hash of a file, or of a directory's sorted file list and hashes.
pub fn fingerprint_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let tree = hash_tree(path, path)?;
        Ok(sha256_hex(serde_json::to_string(&tree)?.as_bytes()))
    } else {
        Ok(file_sha256(path).with_context(|| format!("hashing {}", path.display()))?)
    }
}

/// True when every recorded artifact still exists with the recorded hash
/// and the stage directory holds nothing else.
pub fn artifacts_intact(run_dir: &Path, record: &StageRecord) -> bool {
    let dir = run_dir.join("artifacts").join(record.name.name());
    match hash_tree(run_dir, &dir) {
        Ok(now) => !record.artifacts.is_empty() && now == record.artifacts,
        Err(_) => false,
    }
}
