use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dfcil_core::config::ExperimentConfig;
use dfcil_core::trainer::{aggregate, EpochRecord, Experiment, RunRecord, TrainerState, TrialProgress};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, write_atomic, write_json};
use crate::grid;

/// Synthetic images per task in `--dump-synth-grid` output.
const GRID_SAMPLES: usize = 64;

pub const TABLE_HEADER: &str = "Method | Replay Data | A_N (↑) | Ω (↑)";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub checkpoint_every_task: bool,
    pub dump_synth_grid: bool,
    pub resume: bool,
}

/// Offline upper-bound accuracies per trial seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundFile {
    pub digest: String,
    pub offline: BTreeMap<u64, Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct ErrorManifest<'a> {
    error: String,
    causes: Vec<String>,
    seed: Option<u64>,
    completed_seeds: &'a [u64],
}

/// Applies `--seed` / `--trials` and resolves the output directory.
pub fn prepare(mut cfg: ExperimentConfig, opts: &RunOptions, default_name: &str) -> Result<(ExperimentConfig, PathBuf)> {
    if let Some(s) = opts.seed {
        cfg.seed = s;
        cfg.seeds = None;
    }
    if let Some(t) = opts.trials {
        cfg.trials = t;
        cfg.seeds = None;
    }
    cfg.seeds = Some(cfg.seeds());
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(default_name));
    // The snapshot is independent of where it is written.
    cfg.output_dir = None;
    cfg.validate()?;
    Ok((cfg, out))
}

pub fn default_run_name(cfg: &ExperimentConfig) -> String {
    let dataset = serde_json::to_value(cfg.dataset).ok();
    let dataset = dataset.as_ref().and_then(|v| v.as_str()).unwrap_or("run");
    format!("{dataset}_{}_{}task", cfg.method_config().label(), cfg.num_tasks)
}

/// Entry point of `run`: trains every trial and writes the run directory.
pub fn run(cfg: ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let name = default_run_name(&cfg);
    let (cfg, out) = prepare(cfg, opts, &name)?;
    let snapshot = out.join(artifacts::CONFIG_FILE);
    if opts.resume && snapshot.exists() {
        let previous = ExperimentConfig::load(&snapshot)?;
        if previous != cfg {
            bail!("{} holds a different configuration; refusing to resume into it", out.display());
        }
    }
    write_atomic(&snapshot, cfg.to_toml()?.as_bytes())?;
    let _ = std::fs::remove_file(out.join(artifacts::ERROR_FILE));

    let mut exp = cfg.experiment()?;
    if opts.dump_synth_grid {
        exp.diagnostics.grid_samples = GRID_SAMPLES;
    }
    let mut completed = Vec::new();
    let mut current = None;
    let result = execute(&exp, &cfg, &out, opts, &mut completed, &mut current);
    if let Err(e) = &result {
        let manifest = ErrorManifest {
            error: e.to_string(),
            causes: e.chain().skip(1).map(ToString::to_string).collect(),
            seed: current,
            completed_seeds: &completed,
        };
        write_json(&out.join(artifacts::ERROR_FILE), &manifest)?;
    }
    result.map(|table| {
        print!("{table}");
        out
    })
}

fn execute(
    exp: &Experiment,
    cfg: &ExperimentConfig,
    out: &Path,
    opts: &RunOptions,
    completed: &mut Vec<u64>,
    current: &mut Option<u64>,
) -> Result<String> {
    let seeds = cfg.seeds();
    let bounds = upper_bounds(exp, &seeds, out)?;
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        *current = Some(seed);
        let record_path = artifacts::record_path(out, seed);
        if opts.resume && record_path.exists() {
            log::info!("seed {seed}: reusing {}", record_path.display());
            records.push(artifacts::read_json::<RunRecord>(&record_path)?);
            completed.push(seed);
            continue;
        }
        let record = run_seed(exp, out, opts, seed, &bounds.offline[&seed])?;
        write_json(&record_path, &record)?;
        records.push(record);
        completed.push(seed);
    }
    *current = None;
    write_summary(out, &records)
}

/// Upper bounds for `seeds`, reusing the ones already in `out`.
pub fn upper_bounds(exp: &Experiment, seeds: &[u64], out: &Path) -> Result<UpperBoundFile> {
    let path = out.join(artifacts::UPPER_BOUND_JSON);
    let digest = exp.upper_bound_digest();
    let mut file = match path.exists() {
        true => artifacts::read_json::<UpperBoundFile>(&path)?,
        false => UpperBoundFile::default(),
    };
    if file.digest != digest {
        file = UpperBoundFile {
            digest,
            offline: BTreeMap::new(),
        };
    }
    for &seed in seeds {
        if file.offline.contains_key(&seed) {
            continue;
        }
        log::info!("seed {seed}: training the offline upper bound");
        let ub = exp.upper_bound(seed)?;
        file.offline.insert(seed, ub.offline);
        write_json(&path, &file)?;
    }
    Ok(file)
}

#[derive(Debug, Serialize, Deserialize)]
struct EpochLine {
    seed: u64,
    #[serde(flatten)]
    record: EpochRecord,
}

fn latest_checkpoint(out: &Path, seed: u64, num_tasks: usize) -> Option<usize> {
    (0..num_tasks)
        .rev()
        .find(|&t| artifacts::checkpoint_dir(out, seed, t).join("progress.json").exists())
}

fn run_seed(exp: &Experiment, out: &Path, opts: &RunOptions, seed: u64, offline: &[f64]) -> Result<RunRecord> {
    let log_path = artifacts::epoch_log_path(out, seed);
    let mut resume = None;
    let mut log_text = String::new();
    if opts.resume {
        if let Some(task) = latest_checkpoint(out, seed, exp.num_tasks) {
            let dir = artifacts::checkpoint_dir(out, seed, task);
            let state = TrainerState::load_checkpoint(&dir, &exp.method)
                .with_context(|| format!("loading checkpoint {}", dir.display()))?;
            let progress: TrialProgress = artifacts::read_json(&dir.join("progress.json"))?;
            log::info!("seed {seed}: resuming after task {task}");
            if let Ok(old) = std::fs::read_to_string(&log_path) {
                for line in old.lines() {
                    let parsed: EpochLine = serde_json::from_str(line)?;
                    if parsed.record.task <= task {
                        log_text.push_str(line);
                        log_text.push('\n');
                    }
                }
            }
            resume = Some((state, progress));
        }
    }
    let normalizer = exp.train.normalizer().cloned();
    let mut observer = |state: &TrainerState, log: &dfcil_core::trainer::TaskLog, progress: &TrialProgress| {
        let mut io = || -> Result<()> {
            for record in &log.epochs {
                let line = EpochLine {
                    seed,
                    record: record.clone(),
                };
                writeln!(log_text, "{}", serde_json::to_string(&line)?)?;
            }
            write_atomic(&log_path, log_text.as_bytes())?;
            if opts.checkpoint_every_task {
                save_checkpoint(&artifacts::checkpoint_dir(out, seed, log.task), state, progress)?;
            }
            if let Some((images, labels)) = &log.synthetic_grid {
                let png = grid::encode_png(images, normalizer.as_ref())?;
                write_atomic(&artifacts::grid_path(out, seed, log.task), &png)?;
                let labels = labels.iter().map(ToString::to_string).collect::<Vec<_>>().join("\t");
                write_atomic(
                    &artifacts::grid_path(out, seed, log.task).with_extension("labels.tsv"),
                    format!("{labels}\n").as_bytes(),
                )?;
            }
            Ok(())
        };
        io().map_err(|e| dfcil_core::Error::Io(std::io::Error::other(format!("{e:#}"))))
    };
    let outcome = exp.run_trial_from(seed, offline, resume, &mut observer)?;
    Ok(outcome.record)
}

/// Writes the checkpoint through a temporary directory so a crash never
/// leaves a half-written one behind.
fn save_checkpoint(dir: &Path, state: &TrainerState, progress: &TrialProgress) -> Result<()> {
    let parent = dir.parent().context("checkpoint directory has no parent")?;
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        dir.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    state.save_checkpoint(&tmp)?;
    write_json(&tmp.join("progress.json"), progress)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

/// Aggregate row plus the Ω and accuracy curve tables.
fn write_summary(out: &Path, records: &[RunRecord]) -> Result<String> {
    let agg = aggregate(records)?;
    write_json(&out.join(artifacts::AGGREGATE_JSON), &agg)?;
    let table = format!("{TABLE_HEADER}\n{}\n", agg.row());
    write_atomic(&out.join(artifacts::AGGREGATE_TABLE), table.as_bytes())?;

    let mut omega = String::from("seed\ttasks_seen\tomega\n");
    for r in records {
        for (i, v) in r.omega_trajectory.iter().enumerate() {
            writeln!(omega, "{}\t{}\t{v:.6}", r.seed, i + 1)?;
        }
    }
    let n = records.iter().map(|r| r.omega_trajectory.len()).min().unwrap_or(0);
    for i in 0..n {
        let m = records.iter().map(|r| r.omega_trajectory[i]).sum::<f64>() / records.len() as f64;
        writeln!(omega, "mean\t{}\t{m:.6}", i + 1)?;
    }
    write_atomic(&out.join(artifacts::OMEGA_TABLE), omega.as_bytes())?;

    let mut acc = String::from("seed\tafter_task\ttask\taccuracy\tcumulative\n");
    for r in records {
        for (i, (row, cum)) in r.accuracy.per_task.iter().zip(&r.accuracy.cumulative).enumerate() {
            for (n, (a, c)) in row.iter().zip(cum).enumerate() {
                writeln!(acc, "{}\t{}\t{}\t{a:.6}\t{c:.6}", r.seed, i + 1, n + 1)?;
            }
        }
    }
    write_atomic(&out.join(artifacts::ACCURACY_TABLE), acc.as_bytes())?;
    Ok(table)
}

/// Entry point of `upper-bound`: offline accuracies per seed and task prefix.
pub fn upper_bound(cfg: ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let name = format!("{}_upper_bound", default_run_name(&cfg));
    let (cfg, out) = prepare(cfg, opts, &name)?;
    write_atomic(&out.join(artifacts::CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let exp = cfg.experiment()?;
    let file = upper_bounds(&exp, &cfg.seeds(), &out)?;
    let mut table = String::from("seed\ttasks_seen\toffline_accuracy\n");
    for (seed, offline) in &file.offline {
        for (i, a) in offline.iter().enumerate() {
            writeln!(table, "{seed}\t{}\t{a:.6}", i + 1)?;
        }
    }
    write_atomic(&out.join("upper_bound.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(out)
}
