use dfcil_core::config::ExperimentConfig;
use dfcil_core::data::ToySpec;
use dfcil_core::trainer::{Experiment, MemoryPhase, Method, RunRecord, TrainerState, TrialProgress};

fn tiny(method: Method, num_tasks: usize) -> Experiment {
    let mut cfg = ExperimentConfig::toy(method, num_tasks);
    cfg.toy = Some(ToySpec {
        num_classes: 2 * num_tasks,
        image_size: 8,
        train_per_class: 24,
        test_per_class: 8,
        ..ToySpec::default()
    });
    cfg.model.width = 4;
    cfg.optim.epochs = 2;
    cfg.optim.batch_size = 16;
    cfg.diagnostics.drift_samples = 8;
    if method.uses_synthesis() {
        let s = cfg.synthesis.as_mut().unwrap();
        s.steps = 4;
        s.batch_size = 16;
    } else {
        cfg.synthesis = None;
        cfg.inversion = None;
    }
    if !method.uses_coreset() {
        cfg.coreset = None;
    } else {
        cfg.coreset.as_mut().unwrap().capacity = 12;
    }
    cfg.experiment().unwrap()
}

fn without_timing(mut r: RunRecord) -> RunRecord {
    r.seconds_per_batch.clear();
    r.synthesis_seconds.clear();
    r
}

#[test]
fn trials_are_deterministic_per_seed() {
    let exp = tiny(Method::Ours, 3);
    let offline = [1.0; 3];
    let a = exp.run_trial(4, &offline, &mut |_, _, _| Ok(())).unwrap();
    let b = exp.run_trial(4, &offline, &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(a.state.model.digest(), b.state.model.digest());
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(without_timing(a.record.clone()), without_timing(b.record));
    let c = exp.run_trial(5, &offline, &mut |_, _, _| Ok(())).unwrap();
    assert_ne!(a.state.model.digest(), c.state.model.digest());
}

#[test]
fn record_invariants_hold() {
    let mut exp = tiny(Method::DeepInversion, 3);
    exp.optim.epochs = 6;
    let ub = exp.upper_bound(2).unwrap();
    let r = exp.run_trial(2, &ub.offline, &mut |_, _, _| Ok(())).unwrap().record;
    assert_eq!(r.omega_trajectory.len(), 3);
    assert_eq!(*r.omega_trajectory.last().unwrap(), r.omega);
    assert_eq!(r.accuracy.len(), 3);
    for (i, row) in r.accuracy.cumulative.iter().enumerate() {
        assert_eq!(row.len(), i + 1);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(r.final_accuracy, *r.accuracy.cumulative[2].last().unwrap());
    assert!(r.drift.is_some());
    assert_eq!(r.seconds_per_batch.len(), 3);
    assert_eq!(r.tasks.concat().len(), 6);
}

#[test]
fn first_task_is_method_independent() {
    let digest_after_first = |method: Method| {
        let exp = tiny(method, 2);
        let mut digest = None;
        exp.run_trial(9, &[1.0, 1.0], &mut |state, log, _| {
            if log.task == 0 {
                digest = Some(state.model.digest());
            }
            Ok(())
        })
        .unwrap();
        digest.unwrap()
    };
    let reference = digest_after_first(Method::Base);
    for m in Method::ALL {
        assert_eq!(digest_after_first(m), reference, "{m} diverges on the first task");
    }
}

#[test]
fn ours_keeps_one_snapshot_and_a_task_scoped_generator() {
    let exp = tiny(Method::Ours, 3);
    let r = exp.run_trial(1, &[1.0; 3], &mut |_, _, _| Ok(())).unwrap().record;
    let ledger = &r.memory;
    assert_eq!(ledger.peak_snapshots(), 1);
    assert_eq!(ledger.peak_generators(), 1);
    assert!(!ledger.generator_outlives_task());
    for e in &ledger.events {
        let expect_snapshot = usize::from(e.task > 0 && e.phase != MemoryPhase::TaskEnd);
        assert_eq!(e.snapshots, expect_snapshot, "{e:?}");
        assert_eq!(e.snapshot_params > 0, expect_snapshot == 1);
        assert_eq!(e.coreset_images, 0);
    }
    let after_synthesis: Vec<_> = ledger.events.iter().filter(|e| e.phase == MemoryPhase::AfterSynthesis).collect();
    assert!(after_synthesis.iter().all(|e| (e.generators == 1) == (e.task > 0)));
    let base = tiny(Method::Base, 3).run_trial(1, &[1.0; 3], &mut |_, _, _| Ok(())).unwrap().record;
    assert_eq!(base.memory.peak_snapshots(), 0);
    assert_eq!(base.memory.peak_generators(), 0);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_trial() {
    for method in [Method::Ours, Method::NaiveRehearsal] {
        let exp = tiny(method, 3);
        let dir = tempfile::tempdir().unwrap();
        let mut saved: Option<TrialProgress> = None;
        let full = exp
            .run_trial(6, &[1.0; 3], &mut |state, log, progress| {
                if log.task == 0 {
                    state.save_checkpoint(dir.path())?;
                    saved = Some(progress.clone());
                }
                Ok(())
            })
            .unwrap();
        let state = TrainerState::load_checkpoint(dir.path(), &exp.method).unwrap();
        assert_eq!(state.next_task(), 1);
        let resumed = exp
            .run_trial_from(6, &[1.0; 3], Some((state, saved.unwrap())), &mut |_, _, _| Ok(()))
            .unwrap();
        assert_eq!(resumed.state.model.digest(), full.state.model.digest(), "{method}");
        assert_eq!(resumed.record.accuracy, full.record.accuracy);
        assert_eq!(resumed.record.drift, full.record.drift);
        assert_eq!(resumed.record.past_task_reads, full.record.past_task_reads);
    }
}

#[test]
fn resume_rejects_mismatched_progress() {
    let exp = tiny(Method::Base, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut progress = None;
    exp.run_trial(1, &[1.0; 2], &mut |state, log, p| {
        if log.task == 0 {
            state.save_checkpoint(dir.path())?;
        } else {
            progress = Some(p.clone());
        }
        Ok(())
    })
    .unwrap();
    let state = TrainerState::load_checkpoint(dir.path(), &exp.method).unwrap();
    assert!(exp.run_trial_from(1, &[1.0; 2], Some((state, progress.unwrap())), &mut |_, _, _| Ok(())).is_err());
}

#[test]
fn observer_errors_abort_the_trial() {
    let exp = tiny(Method::Base, 2);
    let err = exp
        .run_trial(1, &[1.0; 2], &mut |_, _, _| Err(dfcil_core::Error::Io(std::io::Error::other("disk full"))))
        .unwrap_err();
    assert!(err.to_string().contains("disk full"), "{err}");
}
