//! Stage manifests: content digests of a stage's inputs and outputs plus
//! row counts and drop/filter counters. Manifests contain no timestamps or
//! absolute paths, so identical runs write identical bytes; wall time goes
//! to a separate timing sidecar.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManifestError {
    #[error("I/O on {path}: {message}")]
    Io { path: String, message: String },
    #[error("manifest {path} is malformed: {message}")]
    Malformed { path: String, message: String },
    #[error("digest mismatch for {artifact} recorded by stage {stage}: expected {expected}, found {found}")]
    DigestMismatch { stage: String, artifact: String, expected: String, found: String },
    #[error("artifact {artifact} recorded by stage {stage} is missing")]
    MissingArtifact { stage: String, artifact: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_digest: String,
    /// Logical artifact name -> sha256 of the file consumed.
    pub input_digests: BTreeMap<String, String>,
    /// Logical artifact name -> sha256 of the file produced.
    pub output_digests: BTreeMap<String, String>,
    pub row_counts: BTreeMap<String, u64>,
    /// Drop and filter counters accumulated during the stage.
    pub counters: BTreeMap<String, u64>,
}

/// Wall time lives outside the manifest so reruns stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_time_ms: u128,
}

pub fn file_digest(path: &Path) -> Result<String, ManifestError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ManifestError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

pub fn write_manifest(path: &Path, manifest: &StageManifest) -> Result<(), ManifestError> {
    let io_err = |e: std::io::Error| ManifestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut payload = serde_json::to_string_pretty(manifest).map_err(|e| ManifestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    payload.push('\n');
    std::fs::write(path, payload).map_err(io_err)
}

pub fn read_manifest(path: &Path) -> Result<StageManifest, ManifestError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ManifestError::Io { path: path.display().to_string(), message: e.to_string() })?;
    serde_json::from_slice(&bytes).map_err(|e| ManifestError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_timing(path: &Path, timing: &StageTiming) -> Result<(), ManifestError> {
    let io_err = |e: std::io::Error| ManifestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let payload = serde_json::to_string_pretty(timing).map_err(|e| ManifestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, payload).map_err(io_err)
}

/// Verifies one manifest against the files on disk. `resolve` maps logical
/// artifact names to paths.
pub fn verify_manifest(
    manifest: &StageManifest,
    resolve: impl Fn(&str) -> std::path::PathBuf,
) -> Result<(), ManifestError> {
    for (digests, _role) in [(&manifest.input_digests, "input"), (&manifest.output_digests, "output")]
    {
        for (artifact, expected) in digests {
            let path = resolve(artifact);
            if !path.exists() {
                return Err(ManifestError::MissingArtifact {
                    stage: manifest.stage.clone(),
                    artifact: artifact.clone(),
                });
            }
            let found = file_digest(&path)?;
            if &found != expected {
                return Err(ManifestError::DigestMismatch {
                    stage: manifest.stage.clone(),
                    artifact: artifact.clone(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
    }
    Ok(())
}
