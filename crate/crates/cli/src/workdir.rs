//! Work directory layout, locking and run manifests.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use deltafix_core::repo_miner::{read_jsonl, write_jsonl};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const LOCK_FILE: &str = ".deltafix.lock";
pub const COMMITS: &str = "commits.jsonl";
pub const BUILD_DIR: &str = "build";
pub const VOCAB: &str = "vocab.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const PREDICTIONS: &str = "predictions.jsonl";

/// Exclusive claim on a work directory, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(workdir).map_err(CliError::io(workdir))?;
        let path = workdir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = std::fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::Data(format!(
                    "work directory {} is in use (lock held by pid {}); remove {} if that process is gone",
                    workdir.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::io(&path)(e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn config_digest(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(cfg.canonical_json().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub checkpoint_format_version: u32,
    pub config_digest: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn digests(root: &Path, paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.strip_prefix(root).unwrap_or(p).display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_format_version: deltafix_core::trainer::VERSION,
        config_digest: config_digest(cfg),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs: digests(&cfg.workdir, inputs)?,
        outputs: digests(&cfg.workdir, outputs)?,
    };
    let path = dir.join(format!("{command}.manifest.json"));
    write_text(&path, &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))?;
    Ok(path)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn write_records<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let f = File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(f);
    write_jsonl(&mut w, items).map_err(CliError::io(path))?;
    w.flush().map_err(CliError::io(path))
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = File::open(path).map_err(CliError::io(path))?;
    read_jsonl(BufReader::new(f)).map_err(CliError::io(path))
}
