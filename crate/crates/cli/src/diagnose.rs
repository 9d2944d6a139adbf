use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dfcil_core::config::ExperimentConfig;
use dfcil_core::data::task_subset;
use dfcil_core::metrics::{drift_report, export_embeddings, DriftReport, EmbeddingSource};
use dfcil_core::model::{IncrementalClassifier, ModelSnapshot};
use dfcil_core::seed;
use dfcil_core::synthesis::train_generator;
use ndarray::{s, Array4, Axis};
use serde::Serialize;

use crate::artifacts::{self, write_atomic, write_json};

#[derive(Debug, Serialize)]
struct DriftFile {
    seed: u64,
    /// 1-based task pair `(a, b)`.
    tasks: (usize, usize),
    samples: (usize, usize, usize),
    report: DriftReport,
}

fn load_model(run: &Path, seed: u64, task: usize) -> Result<IncrementalClassifier> {
    let dir = artifacts::checkpoint_dir(run, seed, task);
    let path = dir.join("model.bin");
    if !path.exists() {
        bail!(
            "no checkpoint after task {} for seed {seed} in {}; rerun with --checkpoint-every-task to keep one",
            task + 1,
            run.display()
        );
    }
    let (model, _) = IncrementalClassifier::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

/// Drift of the model after task `b` between real task-`a` data, real
/// task-`b` data and the task-`a` part of the replay synthesized at the
/// start of task `b`. Tasks are 1-based.
pub fn diagnose(run: &Path, pair: (usize, usize), seed: Option<u64>, out: Option<&Path>) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(&run.join(artifacts::CONFIG_FILE))
        .with_context(|| format!("{} is not a run directory", run.display()))?;
    let (a, b) = pair;
    if a == 0 || a >= b || b > cfg.num_tasks {
        bail!("task pair ({a}, {b}) must satisfy 1 <= a < b <= {} for this {}-task run", cfg.num_tasks, cfg.num_tasks);
    }
    let seeds = cfg.seeds();
    let seed = seed.unwrap_or(seeds[0]);
    if !seeds.contains(&seed) {
        bail!("seed {seed} is not one of the run's trial seeds {seeds:?}");
    }
    let method = cfg.method_config();
    let Some(scfg) = &method.synthesis else {
        bail!("method {} has no synthetic replay to diagnose", cfg.method);
    };
    let (a0, b0) = (a - 1, b - 1);
    let teacher = load_model(run, seed, b0 - 1)?;
    let student = load_model(run, seed, b0)?;

    let exp = cfg.experiment()?;
    let schedule = exp.schedule(seed)?;
    let n = exp.diagnostics.drift_samples;
    let real = |task: usize| -> Result<(Array4<f64>, Vec<usize>)> {
        let subset = task_subset(&exp.test, schedule.task(task)?)?;
        let k = n.min(subset.len());
        let images = subset.all_images().slice(s![..k, .., .., ..]).to_owned();
        Ok((images, subset.labels()[..k].to_vec()))
    };
    let (x1, y1) = real(a0)?;
    let (x2, y2) = real(b0)?;

    let snapshot = ModelSnapshot::capture(&teacher, b0 - 1);
    let generator = train_generator(&snapshot, scfg, seed::derive(seed, "synthesis", &[b0 as u64]))?;
    let mut rng = seed::derived_rng(seed, "probe", &[b0 as u64]);
    let batch = generator.sample(&snapshot, n, &mut rng)?;
    let keep: Vec<usize> = (0..batch.labels.len())
        .filter(|&i| schedule.task_of(batch.labels[i]) == Some(a0))
        .collect();
    let xs = batch.images.select(Axis(0), &keep);
    let ys: Vec<usize> = keep.iter().map(|&i| batch.labels[i]).collect();

    let report = drift_report(&student, &x1, &x2, &xs, &exp.diagnostics.kernel)?;
    let table = export_embeddings(
        &student,
        &[
            EmbeddingSource {
                images: x1.clone(),
                labels: y1,
                provenance: format!("real-task-{a}"),
            },
            EmbeddingSource {
                images: x2.clone(),
                labels: y2,
                provenance: format!("real-task-{b}"),
            },
            EmbeddingSource {
                images: xs.clone(),
                labels: ys,
                provenance: format!("synthetic-task-{a}"),
            },
        ],
    )?;

    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("diagnostics").join(format!("seed-{seed}_tasks-{a}-{b}")));
    write_json(
        &dir.join("drift.json"),
        &DriftFile {
            seed,
            tasks: pair,
            samples: (x1.len_of(Axis(0)), x2.len_of(Axis(0)), xs.len_of(Axis(0))),
            report,
        },
    )?;
    write_atomic(&dir.join("embeddings.tsv"), table.to_text().as_bytes())?;
    println!(
        "MID real{a}/synth{a} {:.4}  real{a}/real{b} {:.4}  ratio {:.3}",
        report.mid_real1_synth1, report.mid_real1_real2, report.mid_ratio
    );
    println!(
        "MMD real{a}/synth{a} {:.4}  real{a}/real{b} {:.4}  ratio {:.3}",
        report.mmd_real1_synth1, report.mmd_real1_real2, report.mmd_ratio
    );
    Ok(dir)
}
