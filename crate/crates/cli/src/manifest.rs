//! Run manifest: config snapshot, per-stage timestamps, error ledger, and
//! digests of every emitted artifact. The manifest is the only artifact
//! containing timestamps; everything else is byte-deterministic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rolesum::pipeline::CellError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageInfo {
    pub completed_at: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_toml: String,
    pub sampling_seed: u64,
    pub annotation_seed: u64,
    pub model_ids: Vec<String>,
    pub stages: BTreeMap<String, StageInfo>,
    pub errors: Vec<CellError>,
    /// Relative artifact path -> sha256 hex digest.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        run_id: &str,
        config_toml: &str,
        sampling_seed: u64,
        annotation_seed: u64,
        model_ids: Vec<String>,
    ) -> Self {
        RunManifest {
            run_id: run_id.to_string(),
            config_toml: config_toml.to_string(),
            sampling_seed,
            annotation_seed,
            model_ids,
            stages: BTreeMap::new(),
            errors: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let bytes = std::fs::read(&path)
            .with_context(|| format!("no manifest at {}; run `ingest` first", path.display()))?;
        serde_json::from_slice(&bytes).context("corrupt manifest")
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let payload = serde_json::to_vec_pretty(self)?;
        std::fs::write(&path, payload)
            .with_context(|| format!("cannot write {}", path.display()))
    }

    /// Registers one artifact (path relative to the run directory) and
    /// records its digest.
    pub fn record_artifact(&mut self, run_dir: &Path, relative: &str) -> Result<()> {
        let digest = file_digest(&run_dir.join(relative))?;
        self.artifacts.insert(relative.to_string(), digest);
        Ok(())
    }

    /// Verifies a predecessor artifact exists and still matches its
    /// recorded digest.
    pub fn require_artifact(&self, run_dir: &Path, relative: &str, needed_by: &str) -> Result<()> {
        let Some(expected) = self.artifacts.get(relative) else {
            bail!("stage {needed_by:?} requires missing artifact {relative:?}; run its producer stage first");
        };
        let actual = file_digest(&run_dir.join(relative))
            .with_context(|| format!("artifact {relative:?} recorded but unreadable"))?;
        if &actual != expected {
            bail!("artifact {relative:?} changed on disk since it was produced (digest mismatch)");
        }
        Ok(())
    }

    pub fn mark_stage(&mut self, stage: &str, notes: Vec<String>) {
        self.stages.insert(
            stage.to_string(),
            StageInfo {
                completed_at: chrono::Utc::now().to_rfc3339(),
                notes,
            },
        );
    }

    pub fn extend_errors(&mut self, errors: impl IntoIterator<Item = CellError>) {
        self.errors.extend(errors);
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
