use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{epoch_batches, task_subset, AccessAuditor, AuditedData, LabeledDataset, TaskSchedule};
use crate::error::{config, invalid, Result};
use crate::losses::ce_loss;
use crate::metrics::{drift_report, evaluate_row, omega, task_accuracy, AccuracyMatrix, DriftReport, MmdKernel};
use crate::model::{Architecture, IncrementalClassifier, Mode, Session};
use crate::optim::Sgd;
use crate::seed;

use super::ledger::MemoryLedger;
use super::task::{train_task, EpochRecord, TaskEnv, TaskLog, TrainerState};
use super::{Ablation, Method, MethodConfig, OptimSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Images per sample in the drift report (0 disables it).
    pub drift_samples: usize,
    #[serde(default)]
    pub kernel: MmdKernel,
    /// Synthetic images kept per task for inspection (0 keeps none).
    #[serde(default)]
    pub grid_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            drift_samples: 200,
            kernel: MmdKernel::default(),
            grid_samples: 0,
        }
    }
}

/// A fully specified incremental-learning experiment over one dataset.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// Normalized training split.
    pub train: LabeledDataset,
    /// Test split with the training normalizer.
    pub test: LabeledDataset,
    pub architecture: Architecture,
    pub num_tasks: usize,
    pub method: MethodConfig,
    pub optim: OptimSchedule,
    pub diagnostics: DiagnosticsConfig,
}

/// Result of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub label: String,
    pub ablation: Ablation,
    pub seed: u64,
    pub tasks: Vec<Vec<usize>>,
    pub accuracy: AccuracyMatrix,
    /// Upper-bound accuracy on every class prefix.
    pub offline: Vec<f64>,
    pub final_accuracy: f64,
    pub omega: f64,
    pub omega_trajectory: Vec<f64>,
    /// Embedding drift after the second task, for synthesizing methods.
    pub drift: Option<DriftReport>,
    pub seconds_per_batch: Vec<f64>,
    pub synthesis_seconds: Vec<f64>,
    /// Real training examples of earlier tasks read while training each task.
    pub past_task_reads: Vec<usize>,
    pub memory: MemoryLedger,
    pub config_digest: String,
}

/// Progress of a trial, enough to resume it after a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialProgress {
    pub accuracy: AccuracyMatrix,
    pub drift: Option<DriftReport>,
    pub seconds_per_batch: Vec<f64>,
    pub synthesis_seconds: Vec<f64>,
    pub past_task_reads: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub record: RunRecord,
    pub epochs: Vec<EpochRecord>,
    pub state: TrainerState,
}

/// Called after each task with the live state, the task's log and the
/// trial's progress so far.
pub type TaskObserver<'a> = dyn FnMut(&TrainerState, &TaskLog, &TrialProgress) -> Result<()> + 'a;

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.optim.validate()?;
        if self.train.dims() != self.test.dims() || self.train.num_classes() != self.test.num_classes() {
            return Err(config("train and test splits disagree on image dims or class count"));
        }
        TaskSchedule::build(self.train.num_classes(), self.num_tasks, 0)?;
        Ok(())
    }

    /// Class order and task split for a trial; reshuffled per seed.
    pub fn schedule(&self, seed: u64) -> Result<TaskSchedule> {
        TaskSchedule::build(self.train.num_classes(), self.num_tasks, seed)
    }

    pub fn fresh_model(&self, seed: u64) -> IncrementalClassifier {
        IncrementalClassifier::new(self.architecture, self.train.dims(), seed::derive(seed, "model", &[]))
    }

    /// SHA-256 over the serialized training configuration.
    pub fn config_digest(&self) -> String {
        let v = serde_json::json!({
            "architecture": self.architecture,
            "num_tasks": self.num_tasks,
            "method": self.method,
            "optim": self.optim,
            "diagnostics": self.diagnostics,
            "dims": [self.train.dims().channels, self.train.dims().height, self.train.dims().width],
            "num_classes": self.train.num_classes(),
            "train_size": self.train.len(),
        });
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    /// Digest of what determines the upper bound (not the method).
    pub fn upper_bound_digest(&self) -> String {
        let v = serde_json::json!({
            "architecture": self.architecture,
            "num_tasks": self.num_tasks,
            "optim": self.optim,
            "num_classes": self.train.num_classes(),
            "train_size": self.train.len(),
        });
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn upper_bound(&self, seed: u64) -> Result<UpperBound> {
        let schedule = self.schedule(seed)?;
        train_upper_bound(&self.train, &self.test, &schedule, self.architecture, &self.optim, seed)
    }

    /// Runs every task of one trial, evaluating after each.
    pub fn run_trial(&self, seed: u64, offline: &[f64], observer: &mut TaskObserver<'_>) -> Result<TrialOutcome> {
        self.run_trial_from(seed, offline, None, observer)
    }

    /// Like [`run_trial`](Self::run_trial), optionally resuming from a
    /// checkpointed state and its progress.
    pub fn run_trial_from(
        &self,
        seed: u64,
        offline: &[f64],
        resume: Option<(TrainerState, TrialProgress)>,
        observer: &mut TaskObserver<'_>,
    ) -> Result<TrialOutcome> {
        self.validate()?;
        let schedule = self.schedule(seed)?;
        let sizes: Vec<usize> = schedule.tasks.iter().map(Vec::len).collect();
        let (mut state, mut progress) = match resume {
            Some(r) => r,
            None => (
                TrainerState::new(self.fresh_model(seed), &self.method)?,
                TrialProgress {
                    accuracy: AccuracyMatrix::new(sizes),
                    drift: None,
                    seconds_per_batch: Vec::new(),
                    synthesis_seconds: Vec::new(),
                    past_task_reads: Vec::new(),
                },
            ),
        };
        if progress.accuracy.len() != state.next_task() {
            return Err(invalid("resume progress does not match the checkpointed task"));
        }
        let auditor = AccessAuditor::new();
        let mut epochs = Vec::new();
        for task in state.next_task()..schedule.num_tasks() {
            let env = TaskEnv {
                train: &self.train,
                schedule: &schedule,
                auditor: &auditor,
                probe_samples: if task == 1 { self.diagnostics.drift_samples } else { 0 },
                grid_samples: self.diagnostics.grid_samples,
            };
            let log = train_task(&mut state, &env, task, &self.method, &self.optim, seed)?;
            let (per_task, cumulative) = evaluate_row(&state.model, &self.test, &schedule, task)?;
            progress.accuracy.push_row(per_task, cumulative)?;
            progress.seconds_per_batch.push(log.seconds_per_batch);
            progress.synthesis_seconds.push(log.synthesis_seconds);
            progress.past_task_reads.push(auditor.count(task, &schedule.past(task)));
            if let Some(probe) = &log.synthetic_probe {
                progress.drift = Some(self.drift(&state.model, &schedule, probe)?);
            }
            log::info!(
                "{} seed {seed}: task {task} done, accuracy over seen classes {:.3}",
                self.method.label(),
                progress.accuracy.final_accuracy().unwrap_or(0.0)
            );
            observer(&state, &log, &progress)?;
            epochs.extend(log.epochs);
        }
        let (om, trajectory) = omega(&progress.accuracy, offline)?;
        let record = RunRecord {
            method: self.method.method,
            label: self.method.label(),
            ablation: self.method.ablation,
            seed,
            tasks: schedule.tasks.clone(),
            final_accuracy: progress.accuracy.final_accuracy().unwrap_or(0.0),
            accuracy: progress.accuracy,
            offline: offline.to_vec(),
            omega: om,
            omega_trajectory: trajectory,
            drift: progress.drift,
            seconds_per_batch: progress.seconds_per_batch,
            synthesis_seconds: progress.synthesis_seconds,
            past_task_reads: progress.past_task_reads,
            memory: state.ledger.clone(),
            config_digest: self.config_digest(),
        };
        Ok(TrialOutcome { record, epochs, state })
    }

    fn drift(
        &self,
        model: &IncrementalClassifier,
        schedule: &TaskSchedule,
        synth: &Array4<f64>,
    ) -> Result<DriftReport> {
        let n = self.diagnostics.drift_samples;
        let take = |task: usize| -> Result<Array4<f64>> {
            let imgs = task_subset(&self.test, schedule.task(task)?)?.all_images();
            let k = n.min(imgs.dim().0);
            Ok(imgs.slice(s![..k, .., .., ..]).to_owned())
        };
        drift_report(model, &take(0)?, &take(1)?, synth, &self.diagnostics.kernel)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Upper-bound accuracies keyed by (seed, upper-bound digest).
pub type OfflineCache = BTreeMap<(u64, String), Vec<f64>>;

/// Runs one trial per seed, training (or reusing) the upper bound of each.
pub fn run_experiment(exp: &Experiment, seeds: &[u64], cache: &mut OfflineCache) -> Result<Vec<RunRecord>> {
    if seeds.is_empty() {
        return Err(config("trials must be at least 1"));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(config(format!("trial seeds must be distinct: {seeds:?}")));
    }
    exp.validate()?;
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let key = (seed, exp.upper_bound_digest());
        if !cache.contains_key(&key) {
            let ub = exp.upper_bound(seed)?;
            cache.insert(key.clone(), ub.offline);
        }
        let outcome = exp.run_trial(seed, &cache[&key], &mut |_, _, _| Ok(()))?;
        records.push(outcome.record);
    }
    Ok(records)
}

/// Offline model trained on every class at once.
#[derive(Debug, Clone)]
pub struct UpperBound {
    pub model: IncrementalClassifier,
    /// Accuracy on the test data of classes in tasks `0..=n`, predicting over
    /// all classes.
    pub offline: Vec<f64>,
}

pub fn train_upper_bound(
    train: &LabeledDataset,
    test: &LabeledDataset,
    schedule: &TaskSchedule,
    arch: Architecture,
    sched: &OptimSchedule,
    seed: u64,
) -> Result<UpperBound> {
    sched.validate()?;
    let mut model = IncrementalClassifier::new(arch, train.dims(), seed::derive(seed, "model", &[]));
    for (n, classes) in schedule.tasks.iter().enumerate() {
        model.grow_heads(classes, seed::derive(seed, "heads", &[n as u64]))?;
    }
    let all = model.registry();
    let data = AuditedData::new(task_subset(train, &all)?, AccessAuditor::new());
    let mut sgd = Sgd::new(sched.momentum, sched.weight_decay);
    for epoch in 0..sched.epochs {
        let mut order = seed::derived_rng(seed, "offline-order", &[epoch as u64]);
        let mut aug = seed::derived_rng(seed, "offline-augment", &[epoch as u64]);
        for positions in epoch_batches(data.len(), sched.batch_size, &mut order) {
            let (x, y) = data.batch(&positions, &sched.augmentation, &mut aug);
            let tape = dfcil_autograd::Tape::new();
            let s = Session::new(&tape, Mode::Train, true);
            let z = model.features(&s, tape.constant(x.into_dyn()))?;
            let loss = ce_loss(&model, &s, z, &y, &all)?;
            let grads = s.gradients(&tape.backward(loss));
            let stats = s.take_batch_stats();
            sgd.step(&mut model, &grads, sched.lr_at(epoch));
            model.absorb_bn_stats(&stats);
        }
    }
    let offline = (0..schedule.num_tasks())
        .map(|n| task_accuracy(&model, &task_subset(test, &schedule.cumulative(n)?)?, &all))
        .collect::<Result<Vec<_>>>()?;
    Ok(UpperBound { model, offline })
}

/// Mean ± population std of final accuracy and Ω over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub method: Method,
    pub replay: String,
    pub trials: usize,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub omega_mean: f64,
    pub omega_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn aggregate(records: &[RunRecord]) -> Result<Aggregate> {
    let first = records.first().ok_or_else(|| invalid("aggregate over zero trials"))?;
    if records.iter().any(|r| r.label != first.label) {
        return Err(invalid("aggregate over records of different methods"));
    }
    let finals: Vec<f64> = records.iter().map(|r| r.final_accuracy).collect();
    let omegas: Vec<f64> = records.iter().map(|r| r.omega).collect();
    let (fm, fs) = mean_std(&finals);
    let (om, os) = mean_std(&omegas);
    Ok(Aggregate {
        label: first.label.clone(),
        method: first.method,
        replay: first.method.replay_kind().to_string(),
        trials: records.len(),
        final_accuracy_mean: fm,
        final_accuracy_std: fs,
        omega_mean: om,
        omega_std: os,
    })
}

impl Aggregate {
    /// `label | replay | A_N | Ω` in percent with one decimal.
    pub fn row(&self) -> String {
        format!(
            "{} | {} | {:.1} ± {:.1} | {:.1} ± {:.1}",
            self.label,
            self.replay,
            100.0 * self.final_accuracy_mean,
            100.0 * self.final_accuracy_std,
            100.0 * self.omega_mean,
            100.0 * self.omega_std
        )
    }
}
