//! Run manifest: one JSON document at `<out>/manifest.json` recording
//! the config hash, the seed, and every artifact each stage wrote. It
//! contains no timestamps or absolute paths, so identical runs produce
//! byte-identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// SHA-256 of the effective configuration (see `Config::sha256`).
    pub config_sha256: String,
    pub seed: u64,
    /// Stage name -> sorted artifact paths relative to the output dir.
    pub stages: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    fn new(config_sha256: &str, seed: u64) -> Self {
        Self {
            schema_version: crate::config::SCHEMA_VERSION,
            config_sha256: config_sha256.to_string(),
            seed,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(out: &Path) -> Result<Option<Self>, CliError> {
        let path = out.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let manifest = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("existing {} is unreadable: {e}", path.display()))
        })?;
        Ok(Some(manifest))
    }
}

/// Fails when the output directory already holds artifacts produced
/// under a different configuration or seed — mixing them would leave
/// stages reading stale inputs.
pub fn check_compatible(out: &Path, config_sha256: &str, seed: u64) -> Result<(), CliError> {
    if let Some(existing) = Manifest::load(out)? {
        if existing.config_sha256 != config_sha256 || existing.seed != seed {
            return Err(CliError::Config(format!(
                "output directory {} holds artifacts from a different configuration; \
                 use a fresh --out or delete its manifest.json",
                out.display()
            )));
        }
    }
    Ok(())
}

/// Records the artifacts of one finished stage and rewrites the
/// manifest.
pub fn record_stage(
    out: &Path,
    config_sha256: &str,
    seed: u64,
    stage: &str,
    mut files: Vec<String>,
) -> Result<(), CliError> {
    let mut manifest =
        Manifest::load(out)?.unwrap_or_else(|| Manifest::new(config_sha256, seed));
    files.sort();
    files.dedup();
    manifest.stages.insert(stage.to_string(), files);
    let path = out.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| {
        CliError::Config(format!("cannot serialize the manifest: {e}"))
    })?;
    text.push('\n');
    std::fs::write(&path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}
