//! Per-output-directory manifest: one JSON line per command execution.
//!
//! A command is skipped when its last entry has the same input and config
//! digests and every artifact it listed still has the recorded content.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use insight_rag::io::{digest_parts, read_jsonl, write_atomic};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub command: String,
    pub inputs_digest: String,
    pub config_digest: String,
    /// Artifact paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub artifacts_digest: String,
    pub version: String,
}

/// Digest of the given files by name and content; directories contribute their name only.
pub fn digest_files(paths: &[PathBuf]) -> Result<String> {
    let mut parts: Vec<Vec<u8>> = Vec::new();
    for path in paths {
        parts.push(path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().into_bytes());
        if path.is_dir() {
            continue;
        }
        parts.push(std::fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(digest_parts(parts.iter().map(Vec::as_slice)))
}

pub fn digest_config(value: &serde_json::Value) -> String {
    digest_parts([value.to_string().as_bytes()])
}

pub struct Manifest {
    dir: PathBuf,
    entries: Vec<Entry>,
}

impl Manifest {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let entries = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    fn artifacts_digest(&self, artifacts: &[String]) -> Option<String> {
        let paths: Vec<PathBuf> = artifacts.iter().map(|a| self.dir.join(a)).collect();
        if paths.iter().any(|p| !p.exists()) {
            return None;
        }
        digest_files(&paths).ok()
    }

    /// True when `command` already ran with these digests and its outputs are intact.
    pub fn is_current(&self, command: &str, inputs_digest: &str, config_digest: &str) -> bool {
        let Some(last) = self.entries.iter().rev().find(|e| e.command == command) else {
            return false;
        };
        last.inputs_digest == inputs_digest
            && last.config_digest == config_digest
            && self.artifacts_digest(&last.artifacts).as_deref() == Some(last.artifacts_digest.as_str())
    }

    pub fn record(&mut self, command: &str, inputs_digest: String, config_digest: String, artifacts: &[PathBuf]) -> Result<()> {
        let mut relative: Vec<String> = artifacts
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        relative.sort();
        let artifacts_digest = self
            .artifacts_digest(&relative)
            .with_context(|| format!("{command}: an artifact is missing after writing"))?;
        self.entries.push(Entry {
            command: command.to_string(),
            inputs_digest,
            config_digest,
            artifacts: relative,
            artifacts_digest,
            version: env!("CARGO_PKG_VERSION").to_string(),
        });
        let bytes = insight_rag::io::to_jsonl(&self.entries)?;
        write_atomic(&self.dir.join(MANIFEST), &bytes)?;
        Ok(())
    }
}
