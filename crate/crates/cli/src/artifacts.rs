//! Run-directory layout and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const CONFIG_FILE: &str = "config.toml";
pub const AGGREGATE_TABLE: &str = "aggregate.txt";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const OMEGA_TABLE: &str = "omega.tsv";
pub const ACCURACY_TABLE: &str = "accuracy.tsv";
pub const UPPER_BOUND_JSON: &str = "upper_bound.json";
pub const ERROR_FILE: &str = "error.json";

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().context("artifact path has no file name")?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn record_path(out: &Path, seed: u64) -> PathBuf {
    out.join("records").join(format!("seed-{seed}.json"))
}

pub fn epoch_log_path(out: &Path, seed: u64) -> PathBuf {
    out.join("epochs").join(format!("seed-{seed}.jsonl"))
}

/// Checkpoint directory holding the state after the 0-based `task`; named
/// 1-based, like every task number a user sees.
pub fn checkpoint_dir(out: &Path, seed: u64, task: usize) -> PathBuf {
    out.join("checkpoints").join(format!("seed-{seed}")).join(format!("task-{}", task + 1))
}

pub fn grid_path(out: &Path, seed: u64, task: usize) -> PathBuf {
    out.join("synth").join(format!("seed-{seed}")).join(format!("task-{}.png", task + 1))
}
