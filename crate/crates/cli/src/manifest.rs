//! Run manifests: everything needed to rerun a command and check its inputs.

use std::path::{Path, PathBuf};

use game_core::checkpoint::atomic_write;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub seed: u64,
    /// Effective configuration after defaults, file and flags were combined.
    pub config: ExperimentConfig,
    pub inputs: Vec<InputFile>,
    pub artifacts: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], seed: u64, config: &ExperimentConfig) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: args.to_vec(),
            seed,
            config: config.clone(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputFile { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn add_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn write(&self, path: &Path) -> game_core::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    pub fn read(path: &Path) -> game_core::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Inputs whose current content no longer matches the recorded hash.
    pub fn stale_inputs(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .filter(|i| sha256_file(&i.path).map(|h| h != i.sha256).unwrap_or(true))
            .map(|i| i.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, b"abc").unwrap();
        let mut m = RunManifest::new("gen-data", &["--size".into(), "3".into()], 7, &ExperimentConfig::default());
        m.add_input(&input).unwrap();
        assert_eq!(m.inputs[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let p = dir.path().join(MANIFEST_FILE);
        m.write(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
        assert!(m.stale_inputs().is_empty());
        std::fs::write(&input, b"abd").unwrap();
        assert_eq!(m.stale_inputs(), vec![input]);
    }
}
