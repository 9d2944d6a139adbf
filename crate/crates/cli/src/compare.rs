use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dfcil_core::config::ExperimentConfig;
use dfcil_core::trainer::Aggregate;

use crate::artifacts::{self, read_json, write_atomic};
use crate::run::TABLE_HEADER;

/// One row per run directory, in method order, as a `|`-delimited table.
pub fn compare(dirs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if dirs.len() < 2 {
        bail!("compare needs at least 2 run directories, got {}", dirs.len());
    }
    let mut rows: Vec<(Aggregate, usize)> = Vec::with_capacity(dirs.len());
    let mut reference: Option<(PathBuf, ExperimentConfig)> = None;
    for dir in dirs {
        let cfg = ExperimentConfig::load(&dir.join(artifacts::CONFIG_FILE))
            .with_context(|| format!("{} is not a run directory", dir.display()))?;
        if let Some((first, r)) = &reference {
            if r.num_tasks != cfg.num_tasks || r.dataset != cfg.dataset {
                bail!(
                    "incompatible runs: {} has {} tasks on {:?}, {} has {} tasks on {:?}",
                    first.display(),
                    r.num_tasks,
                    r.dataset,
                    dir.display(),
                    cfg.num_tasks,
                    cfg.dataset
                );
            }
        } else {
            reference = Some((dir.clone(), cfg.clone()));
        }
        let agg: Aggregate = read_json(&dir.join(artifacts::AGGREGATE_JSON))
            .with_context(|| format!("{} has no finished aggregate", dir.display()))?;
        rows.push((agg, rows.len()));
    }
    rows.sort_by_key(|(a, i)| (a.method, *i));
    let mut table = format!("{TABLE_HEADER}\n");
    for (a, _) in &rows {
        table.push_str(&a.row());
        table.push('\n');
    }
    if let Some(path) = out {
        write_atomic(path, table.as_bytes())?;
    }
    Ok(table)
}
