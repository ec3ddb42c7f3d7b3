//! Reproducibility manifests.
//!
//! Every command that writes an artifact also writes a manifest next to
//! its first output recording the command line, the fully resolved
//! configuration, the seed, and a SHA-256 digest of every input file —
//! enough to re-run the command and to detect silently changed inputs.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

/// One input file and its content digest.
#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// The reproducibility record written beside each command's first output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

/// Hash a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)
        .with_context(|| format!("hashing input {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buffer = [0u8; 64 * 1024];
    loop {
        let read = file.read(&mut buffer)?;
        if read == 0 {
            break;
        }
        hasher.update(&buffer[..read]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Collects inputs while a command runs, then writes the manifest.
pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: Vec<FileDigest>,
    started_at: String,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &PipelineConfig, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config: config.entries().clone(),
            inputs: Vec::new(),
            started_at: timestamp(),
        }
    }

    /// Record (and digest) one input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Write the manifest next to the first output as
    /// `<output>.manifest.json`.
    pub fn finish(self, outputs: &[&Path]) -> Result<PathBuf> {
        let first = outputs
            .first()
            .context("manifest requires at least one output")?;
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            started_at: self.started_at,
            finished_at: timestamp(),
        };
        let mut name = first.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = first.with_file_name(name);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn digest_matches_a_known_vector() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, "abc").unwrap();
        file.flush().unwrap();
        // SHA-256("abc"), a published test vector.
        assert_eq!(
            sha256_file(file.path()).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lands_next_to_the_first_output() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "data").unwrap();
        let output = dir.path().join("out.jsonl");
        std::fs::write(&output, "").unwrap();

        let config = PipelineConfig::resolve(None, &[]).unwrap();
        let mut builder = ManifestBuilder::new("predict", &config, 7);
        builder.input(&input).unwrap();
        let path = builder.finish(&[&output]).unwrap();
        assert_eq!(path, dir.path().join("out.jsonl.manifest.json"));

        let text = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["command"], "predict");
        assert_eq!(value["seed"], 7);
        assert_eq!(value["inputs"][0]["sha256"], sha256_file(&input).unwrap());
        assert!(value["config"]["max_len"].is_string());
    }
}
