use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use dfcil_autograd::{Array, Tape};
use ndarray::{concatenate, Array2, Array4, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, task_subset, AccessAuditor, AuditedData, CoresetStore, LabeledDataset, TaskSchedule};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    ce_loss, lwf_di_objective, ours_objective, teacher_head_matrix, teacher_outputs, DistillOptions, LossBreakdown,
    MixedBatch, ObjectivePlan, TaskClasses, TeacherView,
};
use crate::model::{BnBatchStats, IncrementalClassifier, Mode, Module, ModelSnapshot, Session};
use crate::optim::Sgd;
use crate::seed;
use crate::synthesis::{train_generator, SynthesisGenerator};

use super::ledger::{MemoryEvent, MemoryLedger, MemoryPhase};
use super::{apply_ablation, Method, MethodConfig, OptimSchedule};

/// Everything that survives from one task to the next.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model: IncrementalClassifier,
    pub coreset: Option<CoresetStore>,
    pub ledger: MemoryLedger,
    next_task: usize,
}

impl TrainerState {
    pub fn new(model: IncrementalClassifier, cfg: &MethodConfig) -> Result<Self> {
        let coreset = cfg.coreset_capacity.map(CoresetStore::new).transpose()?;
        Ok(Self {
            model,
            coreset,
            ledger: MemoryLedger::default(),
            next_task: 0,
        })
    }

    /// The task `train_task` expects next.
    pub fn next_task(&self) -> usize {
        self.next_task
    }

    /// Writes the model (and coreset, if any) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.bin"), self.next_task)?;
        if let Some(c) = &self.coreset {
            c.save(&dir.join("coreset.bin"))?;
        }
        Ok(())
    }

    /// Restores a state saved by [`save_checkpoint`](Self::save_checkpoint);
    /// training resumes at the task after the checkpointed one.
    pub fn load_checkpoint(dir: &Path, cfg: &MethodConfig) -> Result<Self> {
        let (model, next_task) = IncrementalClassifier::load(&dir.join("model.bin"))?;
        let coreset = match cfg.coreset_capacity {
            Some(_) => Some(CoresetStore::load(&dir.join("coreset.bin"))?),
            None => None,
        };
        Ok(Self {
            model,
            coreset,
            ledger: MemoryLedger::default(),
            next_task,
        })
    }
}

/// Data and bookkeeping shared by all tasks of a trial.
#[derive(Debug, Clone, Copy)]
pub struct TaskEnv<'a> {
    /// Full (normalized) training set; only the current task is read.
    pub train: &'a LabeledDataset,
    pub schedule: &'a TaskSchedule,
    pub auditor: &'a AccessAuditor,
    /// Synthetic images to keep from the task's generator before it is
    /// dropped, for diagnostics.
    pub probe_samples: usize,
    /// Synthetic images to return in [`TaskLog::synthetic_grid`].
    pub grid_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Mean of each weighted loss term over the epoch's batches.
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TaskLog {
    pub task: usize,
    pub epochs: Vec<EpochRecord>,
    /// Digest of the teacher before and after the epoch loop.
    pub teacher_digest: Option<(String, String)>,
    pub generator_params: usize,
    /// Final inversion objective value, when a generator was trained.
    pub synthesis_final_loss: Option<f64>,
    pub synthesis_seconds: f64,
    pub seconds_per_batch: f64,
    pub synthetic_probe: Option<Array4<f64>>,
    /// Synthetic images with their teacher labels, when requested.
    pub synthetic_grid: Option<(Array4<f64>, Vec<usize>)>,
}

enum Replay {
    None,
    Synthetic(SynthesisGenerator),
    Coreset(AuditedData),
}

impl Replay {
    fn generator_params(&self) -> usize {
        match self {
            Replay::Synthetic(g) => g.param_count(),
            _ => 0,
        }
    }
}

/// Trains task `task` (0-based): snapshot the previous model, grow heads,
/// fit a generator if the method synthesizes, run the epoch loop, update the
/// coreset, then drop the generator and the snapshot.
pub fn train_task(
    state: &mut TrainerState,
    env: &TaskEnv<'_>,
    task: usize,
    cfg: &MethodConfig,
    sched: &OptimSchedule,
    seed: u64,
) -> Result<TaskLog> {
    if task != state.next_task {
        return Err(Error::OutOfOrderTask {
            expected: state.next_task,
            given: task,
        });
    }
    if task >= env.schedule.num_tasks() {
        return Err(invalid(format!("task {task} outside a {}-task schedule", env.schedule.num_tasks())));
    }
    if state.model.heads().len() != task {
        return Err(Error::MissingSnapshot(format!(
            "task {task} needs the model trained through task {}, which has {} heads",
            task as isize - 1,
            state.model.heads().len()
        )));
    }
    cfg.validate()?;
    sched.validate()?;
    env.auditor.enter_task(task);

    let classes = TaskClasses {
        past: env.schedule.past(task),
        current: env.schedule.task(task)?.to_vec(),
    };
    let teacher = (task > 0 && cfg.method.uses_teacher()).then(|| ModelSnapshot::capture(&state.model, task - 1));
    let digest_before = teacher.as_ref().map(|t| t.model().digest());
    state
        .model
        .grow_heads(&classes.current, seed::derive(seed, "heads", &[task as u64]))?;
    let snapshot_params = teacher.as_ref().map_or(0, |t| t.model().param_count());
    let event = |state: &TrainerState, phase, replay: &Replay| MemoryEvent {
        task,
        phase,
        model_params: state.model.param_count(),
        snapshots: usize::from(teacher.is_some()),
        snapshot_params,
        generators: usize::from(matches!(replay, Replay::Synthetic(_))),
        generator_params: replay.generator_params(),
        coreset_images: state.coreset.as_ref().map_or(0, CoresetStore::len),
    };
    let mut replay = Replay::None;
    state.ledger.record(event(state, MemoryPhase::TaskStart, &replay));

    let mut synthesis_seconds = 0.0;
    let mut synthesis_final_loss = None;
    if let (Some(t), true) = (&teacher, cfg.method.uses_synthesis()) {
        let scfg = cfg.synthesis.as_ref().expect("validated");
        let start = Instant::now();
        let g = train_generator(t, scfg, seed::derive(seed, "synthesis", &[task as u64]))?;
        synthesis_seconds = start.elapsed().as_secs_f64();
        synthesis_final_loss = g.trace().last().map(|s| s.total);
        log::info!(
            "task {task}: inversion done in {synthesis_seconds:.1}s ({} params, final loss {:?})",
            g.param_count(),
            synthesis_final_loss
        );
        replay = Replay::Synthetic(g);
    } else if let (Some(c), true) = (&state.coreset, task > 0) {
        let ds = c.as_dataset(env.train.num_classes(), env.train.normalizer().cloned())?;
        replay = Replay::Coreset(AuditedData::new(ds, env.auditor.clone()));
    }
    state.ledger.record(event(state, MemoryPhase::AfterSynthesis, &replay));

    let task_data = AuditedData::new(task_subset(env.train, &classes.current)?, env.auditor.clone());
    let plan = if cfg.method == Method::Ours {
        apply_ablation(cfg)?
    } else {
        ObjectivePlan::default()
    };
    let head = teacher.as_ref().map(teacher_head_matrix).transpose()?;
    // Without augmentation the teacher sees identical real images every
    // epoch, so its outputs are computed once.
    let real_teacher = match &teacher {
        Some(t) if sched.augmentation.is_identity() => {
            let all: Vec<usize> = (0..task_data.len()).collect();
            let (x, _) = task_data.batch(&all, &sched.augmentation, &mut seed::rng(0));
            Some(teacher_outputs(t, &x)?)
        }
        _ => None,
    };
    let mut sgd = Sgd::new(sched.momentum, sched.weight_decay);
    let mut epochs = Vec::with_capacity(sched.epochs);
    let (mut step_seconds, mut steps) = (0.0, 0usize);

    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(epoch);
        let coords = [task as u64, epoch as u64];
        let mut order_rng = seed::derived_rng(seed, "epoch-order", &coords);
        let mut aug_rng = seed::derived_rng(seed, "augment", &coords);
        let mut replay_rng = seed::derived_rng(seed, "replay", &coords);
        let batches = epoch_batches(task_data.len(), sched.batch_size, &mut order_rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for positions in &batches {
            let start = Instant::now();
            let (x, y) = task_data.batch(positions, &sched.augmentation, &mut aug_rng);
            let b = y.len();
            let (batch, replay_teacher) = match &replay {
                Replay::None => (MixedBatch::real_only(x, y), None),
                Replay::Synthetic(g) => {
                    let t = teacher.as_ref().expect("synthesis implies a teacher");
                    let sb = g.sample(t, b, &mut replay_rng)?;
                    let batch = MixedBatch {
                        real_x: x,
                        real_y: y,
                        synth_x: sb.images,
                        synth_y: sb.labels,
                    };
                    (batch, Some((sb.teacher_features, sb.teacher_logits)))
                }
                Replay::Coreset(store) => {
                    let picks: Vec<usize> = if store.len() >= b {
                        rand::seq::index::sample(&mut replay_rng, store.len(), b).into_vec()
                    } else {
                        (0..b).map(|_| replay_rng.random_range(0..store.len())).collect()
                    };
                    let (cx, cy) = store.batch(&picks, &sched.augmentation, &mut aug_rng);
                    let batch = MixedBatch {
                        real_x: x,
                        real_y: y,
                        synth_x: cx,
                        synth_y: cy,
                    };
                    (batch, None)
                }
            };
            let cached = real_teacher.as_ref().map(|(f, l)| {
                (
                    f.select(Axis(0), positions),
                    l.select(Axis(0), positions),
                )
            });
            let ctx = StepContext {
                cfg,
                plan: &plan,
                classes: &classes,
                teacher: teacher.as_ref(),
                head: head.as_ref(),
            };
            let (breakdown, grads, stats) = training_step(&state.model, &ctx, &batch, cached, replay_teacher)?;
            sgd.step(&mut state.model, &grads, lr);
            state.model.absorb_bn_stats(&stats);
            step_seconds += start.elapsed().as_secs_f64();
            steps += 1;
            if !breakdown.total.is_finite() {
                return Err(invalid(format!("non-finite loss at task {task}, epoch {epoch}")));
            }
            for (name, v) in breakdown.terms {
                *sums.entry(name).or_default() += v;
            }
            total += breakdown.total;
        }
        let n = batches.len().max(1) as f64;
        let record = EpochRecord {
            task,
            epoch,
            lr,
            batches: batches.len(),
            losses: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            total: total / n,
        };
        log::debug!("task {task} epoch {epoch}: loss {:.4}", record.total);
        epochs.push(record);
    }

    if let Some(c) = state.coreset.as_mut() {
        c.update(
            &task_subset(env.train, &classes.current)?,
            seed::derive(seed, "coreset", &[task as u64]),
        )?;
    }
    let synthetic_probe = match (&replay, &teacher, env.probe_samples) {
        (Replay::Synthetic(g), Some(t), n) if n > 0 => {
            let mut rng = seed::derived_rng(seed, "probe", &[task as u64]);
            Some(g.sample(t, n, &mut rng)?.images)
        }
        _ => None,
    };
    let synthetic_grid = match (&replay, &teacher, env.grid_samples) {
        (Replay::Synthetic(g), Some(t), n) if n > 0 => {
            let mut rng = seed::derived_rng(seed, "grid", &[task as u64]);
            let b = g.sample(t, n, &mut rng)?;
            Some((b.images, b.labels))
        }
        _ => None,
    };
    let generator_params = replay.generator_params();
    drop(replay);
    let digest_after = teacher.as_ref().map(|t| t.model().digest());
    drop(teacher);
    state.ledger.record(MemoryEvent {
        task,
        phase: MemoryPhase::TaskEnd,
        model_params: state.model.param_count(),
        snapshots: 0,
        snapshot_params: 0,
        generators: 0,
        generator_params: 0,
        coreset_images: state.coreset.as_ref().map_or(0, CoresetStore::len),
    });
    state.next_task += 1;

    Ok(TaskLog {
        task,
        epochs,
        teacher_digest: digest_before.zip(digest_after),
        generator_params,
        synthesis_final_loss,
        synthesis_seconds,
        seconds_per_batch: if steps > 0 { step_seconds / steps as f64 } else { 0.0 },
        synthetic_probe,
        synthetic_grid,
    })
}

struct StepContext<'a> {
    cfg: &'a MethodConfig,
    plan: &'a ObjectivePlan,
    classes: &'a TaskClasses,
    teacher: Option<&'a ModelSnapshot>,
    head: Option<&'a Array2<f64>>,
}

type StepOutput = (LossBreakdown, BTreeMap<String, Array>, Vec<BnBatchStats>);

/// One joint forward/backward over the real and replay rows of a batch.
fn training_step(
    model: &IncrementalClassifier,
    ctx: &StepContext<'_>,
    batch: &MixedBatch,
    real_teacher: Option<(Array2<f64>, Array2<f64>)>,
    replay_teacher: Option<(Array2<f64>, Array2<f64>)>,
) -> Result<StepOutput> {
    let tape = Tape::new();
    let s = Session::new(&tape, Mode::Train, true);
    let z = model.features(&s, tape.constant(batch.images().into_dyn()))?;
    let all = ctx.classes.all();
    let (loss, breakdown) = match (ctx.cfg.method, ctx.teacher) {
        (Method::Base, _) | (_, None) | (Method::NaiveRehearsal, _) => {
            let l = ce_loss(model, &s, z, &batch.labels(), &all)?;
            let v = l.item();
            (
                l,
                LossBreakdown {
                    terms: vec![("ce".into(), v)],
                    total: v,
                },
            )
        }
        (Method::Ours, Some(t)) => {
            let (features, logits) = teacher_rows(t, batch, real_teacher.clone(), replay_teacher.clone())?;
            let view = TeacherView {
                features,
                logits,
                head: ctx.head.expect("teacher implies head").clone(),
            };
            ours_objective(model, &s, z, batch, &view, ctx.classes, &ctx.cfg.objective, ctx.plan)?
        }
        (m, Some(t)) => {
            let (_, logits) = teacher_rows(t, batch, real_teacher.clone(), replay_teacher.clone())?;
            let opts = DistillOptions {
                temperature: ctx.cfg.objective.kd_temperature,
                kd_weight: ctx.cfg.baseline_kd_weight,
                ce_on_replay: matches!(m, Method::LwfSynth | Method::LwfCoreset),
            };
            lwf_di_objective(model, &s, z, batch, &logits, ctx.classes, &opts)?
        }
    };
    let grads = tape.backward(loss);
    Ok((breakdown, s.gradients(&grads), s.take_batch_stats()))
}

/// Teacher features and logits for all rows, reusing those computed while
/// sampling synthetic rows.
fn teacher_rows(
    teacher: &ModelSnapshot,
    batch: &MixedBatch,
    real: Option<(Array2<f64>, Array2<f64>)>,
    replay: Option<(Array2<f64>, Array2<f64>)>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (rf, rl) = match real {
        Some(r) => r,
        None => teacher_outputs(teacher, &batch.real_x)?,
    };
    let (sf, sl) = match replay {
        Some(r) => r,
        None if batch.n_synth() > 0 => teacher_outputs(teacher, &batch.synth_x)?,
        None => return Ok((rf, rl)),
    };
    let cat = |a: Array2<f64>, b: Array2<f64>| concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| invalid(e.to_string()));
    Ok((cat(rf, sf)?, cat(rl, sl)?))
}
