//! Run manifests: what a command wrote, with checksums for later checking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// Emitted config text the run used, after overrides.
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoint: Option<String>,
    pub loss_curve: Option<String>,
    pub metrics: Vec<String>,
    pub figures: Vec<String>,
    pub tables: Vec<String>,
    /// SHA-256 of every referenced file, keyed by path relative to the manifest.
    pub checksums: BTreeMap<String, String>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(run_id: &str, command: &str, config: String) -> Self {
        Self {
            run_id: run_id.into(),
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            checkpoint: None,
            loss_curve: None,
            metrics: Vec::new(),
            figures: Vec::new(),
            tables: Vec::new(),
            checksums: BTreeMap::new(),
            duration_secs: 0.0,
        }
    }

    pub fn referenced(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.checkpoint.iter().chain(&self.loss_curve).map(String::as_str).collect();
        v.extend(self.metrics.iter().chain(&self.figures).chain(&self.tables).map(String::as_str));
        v
    }

    /// Hashes every referenced file under `dir` and writes the manifest there.
    pub fn finish(&mut self, dir: &Path) -> CliResult<PathBuf> {
        self.checksums.clear();
        let names: Vec<String> = self.referenced().into_iter().map(String::from).collect();
        for name in names {
            let digest = sha256_file(&dir.join(&name))?;
            self.checksums.insert(name, digest);
        }
        let path = dir.join(format!("{}{MANIFEST_SUFFIX}", self.run_id));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Confirms every referenced file exists and matches its checksum.
    pub fn check(&self, dir: &Path) -> CliResult<()> {
        for name in self.referenced() {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(CliError::Check(format!("{} is missing", path.display())));
            }
            let expected = self
                .checksums
                .get(name)
                .ok_or_else(|| CliError::Check(format!("no checksum recorded for {name}")))?;
            if &sha256_file(&path)? != expected {
                return Err(CliError::Check(format!("{} does not match its checksum", path.display())));
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// First `{prefix}-NNN` with no manifest in `dir`.
pub fn next_run_id(dir: &Path, prefix: &str) -> String {
    (0..)
        .map(|n| format!("{prefix}-{n:03}"))
        .find(|id| !dir.join(format!("{id}{MANIFEST_SUFFIX}")).exists())
        .expect("unbounded search")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finish_then_check_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n1\n").unwrap();
        let id = next_run_id(dir.path(), "train");
        assert_eq!(id, "train-000");
        let mut m = RunManifest::new(&id, "train", String::new());
        m.tables.push("a.csv".into());
        let path = m.finish(dir.path()).unwrap();
        assert_eq!(next_run_id(dir.path(), "train"), "train-001");
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, m);
        back.check(dir.path()).unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n2\n").unwrap();
        assert!(matches!(back.check(dir.path()), Err(CliError::Check(_))));
        std::fs::remove_file(dir.path().join("a.csv")).unwrap();
        assert!(back.check(dir.path()).unwrap_err().to_string().contains("missing"));
    }
}
