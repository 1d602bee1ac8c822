//! Run manifests: what was run, with which resolved settings, and the SHA-256
//! of every artifact written.
//!
//! The text form is itself `key = value` lines. Settings are stored under
//! `config.<key>`, artifacts under `artifact.<relative path>`, so a manifest
//! can be fed back as a configuration file to repeat the run.

use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::config::{parse_config, Settings};
use crate::error::{Error, Result};

pub const FLOW_CONVENTION: &str = "pull";
const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub duration: Duration,
    /// Artifact paths relative to the output directory with their digests.
    pub artifacts: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, settings: &Settings, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config: settings.resolved(),
            seed,
            duration: Duration::ZERO,
            artifacts: Vec::new(),
        }
    }

    /// Hashes `files` (relative to `out_dir`) and records them, sorted.
    pub fn record_artifacts(&mut self, out_dir: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let rel = f.strip_prefix(out_dir).unwrap_or(f);
            let name = rel.to_string_lossy().replace('\\', "/");
            self.artifacts.push((name, sha256_file(out_dir.join(rel))?));
        }
        self.artifacts.sort();
        self.artifacts.dedup();
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "manifest_version = {MANIFEST_VERSION}\ncommand = {}\nconvention = {FLOW_CONVENTION}\nseed = {}\nduration_seconds = {:.3}\n",
            self.command,
            self.seed,
            self.duration.as_secs_f64()
        );
        for (k, v) in &self.config {
            out.push_str(&format!("config.{k} = {v}\n"));
        }
        for (p, h) in &self.artifacts {
            out.push_str(&format!("artifact.{p} = {h}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_config(text)?;
        let get = |key: &str| {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Config(format!("manifest lacks `{key}`")))
        };
        if get("manifest_version")? != MANIFEST_VERSION {
            return Err(Error::Config("unsupported manifest version".into()));
        }
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::Config("manifest seed is not an integer".into()))?;
        let secs: f64 = get("duration_seconds")?
            .parse()
            .map_err(|_| Error::Config("manifest duration is not a number".into()))?;
        let strip = |prefix: &str| -> Vec<(String, String)> {
            kv.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        Ok(Self {
            command: get("command")?,
            config: strip("config."),
            seed,
            duration: Duration::from_secs_f64(secs.max(0.0)),
            artifacts: strip("artifact."),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The recorded settings as configuration text.
    pub fn config_text(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Artifacts whose recorded digest differs from `other`, or that only one
    /// of the two manifests lists.
    pub fn artifact_mismatches(&self, other: &RunManifest) -> Vec<String> {
        let mut bad = Vec::new();
        for (p, h) in &self.artifacts {
            match other.artifacts.iter().find(|(q, _)| q == p) {
                Some((_, g)) if g == h => {}
                _ => bad.push(p.clone()),
            }
        }
        for (p, _) in &other.artifacts {
            if !self.artifacts.iter().any(|(q, _)| q == p) {
                bad.push(p.clone());
            }
        }
        bad
    }
}
