//! Per-subcommand manifest tying every artifact to the config that made it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct FileEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileEntry>,
    pub artifacts: Vec<FileEntry>,
}

fn entry(root: &Path, path: &Path) -> Result<FileEntry, CliError> {
    let bytes = fs::read(path)?;
    let rel = path.strip_prefix(root).unwrap_or(path);
    Ok(FileEntry {
        path: rel.to_string_lossy().replace('\\', "/"),
        sha256: hex(&Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// Writes `manifest_<subcommand>.json` under `root` and returns its path.
pub fn write(
    root: &Path,
    subcommand: &str,
    config_hash: &str,
    seed: u64,
    inputs: &[PathBuf],
    artifacts: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let m = Manifest {
        subcommand: subcommand.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        inputs: inputs.iter().map(|p| entry(root, p)).collect::<Result<_, _>>()?,
        artifacts: artifacts.iter().map(|p| entry(root, p)).collect::<Result<_, _>>()?,
    };
    let path = root.join(format!("manifest_{subcommand}.json"));
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}
