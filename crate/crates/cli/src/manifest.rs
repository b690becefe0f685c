use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Flat `key = value` snapshot of the effective configuration.
    pub config: String,
    pub seed: u64,
    /// SHA-256 of the input dataset file, when the command reads one.
    pub dataset_digest: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: String, seed: u64, dataset: Option<&Path>) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            dataset_digest: dataset.map(file_digest).transpose()?,
            artifacts: Vec::new(),
            wall_clock_secs: 0.0,
        })
    }

    pub fn add_artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(Artifact {
            path: path.to_path_buf(),
            sha256: file_digest(path)?,
        });
        Ok(())
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recomputes every artifact digest and compares it with the recorded one. Relative
    /// artifact paths resolve against `base`, the directory the command ran in.
    pub fn verify(&self, base: &Path) -> Result<()> {
        for a in &self.artifacts {
            let now = file_digest(&base.join(&a.path))?;
            if now != a.sha256 {
                bail!("digest mismatch for {}", a.path.display());
            }
        }
        Ok(())
    }
}
