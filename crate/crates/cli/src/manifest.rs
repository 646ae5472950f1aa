//! Run manifests: everything needed to repeat a command exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tensorformer_core::volume::write_atomic;

use crate::args::Command;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl OutputFile {
    pub fn describe(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            sha256: sha256_hex(&data),
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// The command line as typed.
    pub argv: Vec<String>,
    /// Fully resolved arguments; `rerun` executes these.
    pub config: Command,
    pub out: PathBuf,
    pub seeds: BTreeMap<String, u64>,
    pub rng: String,
    pub threads: Option<usize>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<OutputFile>,
    /// Command-specific facts (noise level, failures, hashes, ...).
    pub details: Value,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Input(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::Cli;
    use clap::Parser;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_round_trips_resolved_config() {
        let cli = Cli::try_parse_from(["tensorformer", "synth", "--phantom", "ph", "--snr", "15", "--noise-seed", "4"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            tool: "tensorformer".into(),
            version: "0".into(),
            command: cli.command.name().into(),
            argv: vec![],
            config: cli.command,
            out: dir.path().to_path_buf(),
            seeds: BTreeMap::from([("noise".to_string(), 4)]),
            rng: "chacha8".into(),
            threads: Some(1),
            inputs: vec![],
            outputs: vec![],
            details: Value::Null,
            duration_s: 0.0,
        };
        let back = RunManifest::load(&m.save(dir.path()).unwrap()).unwrap();
        match back.config {
            Command::Synth(a) => {
                assert_eq!(a.snr, Some(15.0));
                assert_eq!(a.noise_seed, 4);
                assert_eq!(a.phantom, PathBuf::from("ph"));
            }
            other => panic!("wrong command {other:?}"),
        }
        assert_eq!(back.seeds["noise"], 4);
    }
}
