//! `manifest.json`: what ran, with which settings, and what it wrote.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::CliResult;
use crate::store::{read_bytes, write_atomic, MANIFEST_FILE};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the deterministic fields below; equal inputs give equal ids.
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub preset: String,
    pub version: String,
    pub inputs: Vec<FileEntry>,
    pub threads: usize,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub outputs: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn file_entry(path: &Path) -> CliResult<FileEntry> {
    Ok(FileEntry {
        path: path.display().to_string(),
        sha256: sha256_hex(&read_bytes(path)?),
    })
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, seed: u64, preset: &str, inputs: &[&Path], threads: usize) -> CliResult<Self> {
        let inputs = inputs.iter().map(|p| file_entry(p)).collect::<CliResult<Vec<_>>>()?;
        let mut key = format!("{command}\n{config_hash}\n{seed}\n{preset}\n{VERSION}\n");
        for f in &inputs {
            key.push_str(&f.sha256);
            key.push('\n');
        }
        Ok(RunManifest {
            run_id: sha256_hex(key.as_bytes())[..16].to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            preset: preset.to_string(),
            version: VERSION.to_string(),
            inputs,
            threads,
            started_at: unix_now(),
            finished_at: None,
            outputs: Vec::new(),
        })
    }

    /// Writes the manifest before any artifact exists.
    pub fn start(&self, dir: &Path) -> CliResult<()> {
        self.write(dir)
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Hashes each output file, recorded relative to `dir`, and writes the manifest into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[&Path]) -> CliResult<Self> {
        self.outputs = outputs
            .iter()
            .map(|p| {
                let mut e = file_entry(p)?;
                e.path = p.strip_prefix(dir).unwrap_or(p).display().to_string();
                Ok(e)
            })
            .collect::<CliResult<Vec<_>>>()?;
        self.finished_at = Some(unix_now());
        self.write(dir)?;
        Ok(self)
    }

    /// First line of every CSV and text artifact.
    pub fn header(&self) -> String {
        format!("# run_id={}\n", self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_depends_on_inputs_not_time() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        std::fs::write(&a, "x").unwrap();
        let m1 = RunManifest::new("synth", "h", 1, "desk", &[&a], 1).unwrap();
        let m2 = RunManifest::new("synth", "h", 1, "desk", &[&a], 4).unwrap();
        assert_eq!(m1.run_id, m2.run_id);
        std::fs::write(&a, "y").unwrap();
        let m3 = RunManifest::new("synth", "h", 1, "desk", &[&a], 1).unwrap();
        assert_ne!(m1.run_id, m3.run_id);
        let m4 = RunManifest::new("synth", "h", 2, "desk", &[&a], 1).unwrap();
        assert_ne!(m3.run_id, m4.run_id);
    }

    #[test]
    fn finish_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o.txt");
        std::fs::write(&out, "hello").unwrap();
        let m = RunManifest::new("x", "h", 0, "desk", &[], 1).unwrap().finish(dir.path(), &[&out]).unwrap();
        assert_eq!(m.outputs.len(), 1);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert!(m.header().starts_with("# run_id="));
    }
}
