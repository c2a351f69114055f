//! Run manifests: what a command produced, hashed for later verification.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Library and driver versions that produced the run.
    pub version: String,
    /// Subcommand that wrote this manifest.
    pub command: String,
    /// Effective configuration snapshot (TOML).
    pub config: String,
    pub artifacts: Vec<ArtifactRecord>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl RunManifest {
    pub fn new(command: &str, config: &str) -> Self {
        Self {
            version: format!(
                "tqn-core {} / tqn-cli {}",
                tqn_core::VERSION,
                env!("CARGO_PKG_VERSION")
            ),
            command: command.to_string(),
            config: config.to_string(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Hashes `base/rel` and records it.
    pub fn add_artifact(&mut self, base: &Path, rel: &str) -> CliResult<()> {
        let full = base.join(rel);
        let bytes = fs::read(&full)
            .map_err(|e| CliError::Data(format!("cannot hash {}: {e}", full.display())))?;
        self.artifacts.push(ArtifactRecord {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn add_timing(&mut self, phase: &str, seconds: f64) {
        self.timings.insert(phase.to_string(), seconds);
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Data(format!("manifest serialisation: {e}")))?;
        fs::write(path, json + "\n")
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("manifest {}: {e}", path.display())))
    }

    /// Re-hashes every artifact against `base`; returns the paths that no
    /// longer match.
    pub fn verify(&self, base: &Path) -> CliResult<Vec<String>> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            let full = base.join(&a.path);
            let bytes = fs::read(&full)
                .map_err(|e| CliError::Data(format!("cannot re-hash {}: {e}", full.display())))?;
            if sha256_hex(&bytes) != a.sha256 || bytes.len() as u64 != a.bytes {
                bad.push(a.path.clone());
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        // Standard test vector: SHA-256 of "abc".
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn verify_flags_modified_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "hello").unwrap();
        let mut m = RunManifest::new("test", "");
        m.add_artifact(dir.path(), "a.txt").unwrap();
        assert!(m.verify(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("a.txt"), "tampered").unwrap();
        assert_eq!(m.verify(dir.path()).unwrap(), vec!["a.txt".to_string()]);
    }
}
