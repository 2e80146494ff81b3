//! Run manifests: content checksums of every artifact a command produced.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::artifacts::{read_json, write_json};
use crate::config::sha256_hex;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEntry {
    pub role: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub created_unix: u64,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    /// Checksums the given files; paths are stored relative to `dir`.
    pub fn build(command: &str, config_hash: &str, dir: &Path, files: &[(&str, &Path)]) -> CliResult<Self> {
        let artifacts = files
            .iter()
            .map(|(role, p)| {
                let rel = p.strip_prefix(dir).unwrap_or(p).to_path_buf();
                Ok(ArtifactEntry { role: role.to_string(), path: rel, sha256: file_sha256(p)?, bytes: std::fs::metadata(p)?.len() })
            })
            .collect::<CliResult<_>>()?;
        Ok(RunManifest { command: command.into(), config_hash: config_hash.into(), created_unix: now(), artifacts })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    /// Every listed file exists and matches its checksum.
    pub fn verify(&self, dir: &Path) -> CliResult<()> {
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            if !p.exists() {
                return Err(CliError::Io(format!("integrity: {} listed in manifest is missing", p.display())));
            }
            if file_sha256(&p)? != a.sha256 {
                return Err(CliError::Io(format!("integrity: {} does not match its manifest checksum", p.display())));
            }
        }
        Ok(())
    }

    pub fn entry(&self, role: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.role == role)
    }
}

/// Loads `manifest` and verifies it; `Ok(None)` when it does not exist.
pub fn verified(manifest: &Path) -> CliResult<Option<RunManifest>> {
    if !manifest.exists() {
        return Ok(None);
    }
    let m = RunManifest::load(manifest)?;
    m.verify(manifest.parent().unwrap_or(Path::new(".")))?;
    Ok(Some(m))
}

/// Before an artifact is consumed, every manifest beside it that lists it
/// must agree with its current content.
pub fn check_before_use(artifact: &Path) -> CliResult<()> {
    let dir = artifact.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = artifact.file_name().map(PathBuf::from);
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let is_manifest = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("manifest.json"));
        if !is_manifest {
            continue;
        }
        let Ok(m) = RunManifest::load(&p) else { continue };
        for a in m.artifacts.iter().filter(|a| Some(&a.path) == name.as_ref()) {
            if file_sha256(artifact)? != a.sha256 {
                return Err(CliError::Io(format!("integrity: {} was modified after {} was written", artifact.display(), p.display())));
            }
        }
    }
    Ok(())
}
