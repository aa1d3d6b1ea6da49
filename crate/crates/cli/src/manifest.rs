//! Run manifests: every command writes a JSON record of the resolved
//! configuration, derived seeds, tool version, wall-clock time, and
//! SHA-256 hashes of the artifacts it produced — enough to re-run the
//! experiment and to detect artifact corruption.

use crate::config::RunConfig;
use gdvae_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Which subcommand produced this manifest.
    pub command: String,
    /// "running" until the command finishes, then "complete".
    pub status: String,
    pub master_seed: u64,
    /// Independent seed for each training trial, mixed from the master
    /// seed and the trial index.
    pub trial_seeds: Vec<u64>,
    pub wall_clock_seconds: f64,
    /// The fully resolved configuration (after command-line overrides).
    pub config: RunConfig,
    /// Artifact file name → `sha256:<hex>`, sorted by name.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Artifact(format!("cannot hash {}: {e}", path.display())))?;
    Ok(format!("sha256:{:x}", Sha256::digest(&bytes)))
}

fn manifest_path(dir: &Path, command: &str) -> std::path::PathBuf {
    dir.join(format!("manifest.{command}.json"))
}

impl RunManifest {
    /// Starts a manifest and writes it to disk *before* any results, so a
    /// crashed run still leaves a record of what was attempted.
    pub fn begin(command: &str, config: &RunConfig, trial_seeds: Vec<u64>) -> Result<Self> {
        let manifest = Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            status: "running".to_string(),
            master_seed: config.seed,
            trial_seeds,
            wall_clock_seconds: 0.0,
            config: config.clone(),
            artifacts: BTreeMap::new(),
        };
        manifest.write()?;
        Ok(manifest)
    }

    /// Records artifact hashes and the elapsed time, marks the run
    /// complete, rewrites the manifest, and re-reads it to verify that
    /// every stored hash matches the file on disk.
    pub fn finalize(mut self, started: Instant, artifact_names: &[String]) -> Result<()> {
        let dir = self.config.out_dir.clone();
        for name in artifact_names {
            self.artifacts
                .insert(name.clone(), sha256_file(&dir.join(name))?);
        }
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        self.status = "complete".to_string();
        self.write()?;
        let reread = Self::read(&dir, &self.command)?;
        reread.verify_artifacts()
    }

    fn write(&self) -> Result<()> {
        let path = manifest_path(&self.config.out_dir, &self.command);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Artifact(format!("manifest encode failed: {e}")))?;
        std::fs::write(&path, json)
            .map_err(|e| Error::Artifact(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn read(dir: &Path, command: &str) -> Result<Self> {
        let path = manifest_path(dir, command);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Artifact(format!("manifest {} invalid: {e}", path.display())))
    }

    /// Recomputes every artifact hash and errors on the first mismatch or
    /// missing file.
    pub fn verify_artifacts(&self) -> Result<()> {
        for (name, recorded) in &self.artifacts {
            let actual = sha256_file(&self.config.out_dir.join(name))?;
            if &actual != recorded {
                return Err(Error::Artifact(format!(
                    "artifact {name} hash mismatch: manifest says {recorded}, file is {actual}"
                )));
            }
        }
        Ok(())
    }

    /// Checks one artifact of an earlier command against its manifest, if
    /// that manifest exists; silently passes when it does not (artifacts
    /// may be supplied out-of-band).
    pub fn check_artifact(dir: &Path, command: &str, name: &str) -> Result<()> {
        let path = manifest_path(dir, command);
        if !path.exists() {
            return Ok(());
        }
        let manifest = Self::read(dir, command)?;
        if let Some(recorded) = manifest.artifacts.get(name) {
            let actual = sha256_file(&dir.join(name))?;
            if &actual != recorded {
                return Err(Error::Artifact(format!(
                    "artifact {name} hash mismatch: manifest says {recorded}, file is {actual}"
                )));
            }
        }
        Ok(())
    }
}
