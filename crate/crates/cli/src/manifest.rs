//! One `manifest.json` per output directory, listing every run that wrote there.
//!
//! Content hashes are SHA-256 of the file bytes, hex encoded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const DIGEST: &str = "sha256";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config_paths: Vec<String>,
    /// Options after defaults, flags and config files are merged.
    pub resolved_options: serde_json::Value,
    pub started: String,
    pub finished: String,
    pub digest: String,
    /// Canonical input path to hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the manifest directory to hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ManifestFile {
    pub runs: Vec<RunManifest>,
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn canonical(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load(dir: &Path) -> std::io::Result<Option<ManifestFile>> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

/// Checks `input` against the newest manifest entry in its directory that wrote it.
///
/// Returns a message when the file changed since then; files no manifest knows pass.
pub fn verify_input(input: &Path) -> std::io::Result<Option<String>> {
    let dir = dir_of(input);
    let Some(file) = load(&dir)? else {
        return Ok(None);
    };
    let Some(name) = input.file_name().and_then(|n| n.to_str()) else {
        return Ok(None);
    };
    let Some(run) = file.runs.iter().rev().find(|r| r.outputs.contains_key(name)) else {
        return Ok(None);
    };
    let recorded = &run.outputs[name];
    let actual = hash_file(input)?;
    if &actual != recorded {
        return Ok(Some(format!(
            "{} changed since `{}` wrote it ({DIGEST} {} != recorded {})",
            input.display(),
            run.subcommand,
            &actual[..12],
            &recorded[..recorded.len().min(12)]
        )));
    }
    Ok(None)
}

/// Hashes the files and appends the run to the manifest of each output directory.
pub fn record(mut run: RunManifest, inputs: &[&Path], outputs: &[&Path]) -> std::io::Result<Vec<PathBuf>> {
    for input in inputs {
        run.inputs.insert(canonical(input).display().to_string(), hash_file(input)?);
    }
    let mut by_dir: BTreeMap<PathBuf, Vec<&Path>> = BTreeMap::new();
    for output in outputs {
        by_dir.entry(canonical(&dir_of(output))).or_default().push(output);
    }
    let mut written = Vec::new();
    for (dir, files) in by_dir {
        let mut entry = run.clone();
        for output in files {
            let name = output.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            entry.outputs.insert(name, hash_file(output)?);
        }
        let mut file = load(&dir)?.unwrap_or_default();
        file.runs.push(entry);
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, serde_json::to_string_pretty(&file)?)?;
        written.push(path);
    }
    Ok(written)
}
