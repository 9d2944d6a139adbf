use std::collections::BTreeSet;

use dfcil_autograd::{Array, Tape};
use dfcil_core::config::ExperimentConfig;
use dfcil_core::data::{task_subset, CoresetStore, ImageDims, LabeledDataset, Split, TaskSchedule};
use dfcil_core::losses::{
    kd_di_loss, ours_objective, task_balance_weights, MixedBatch, ObjectivePlan, ObjectiveWeights, Provenance,
    TaskClasses, TeacherView,
};
use dfcil_core::metrics::{mid_score, mmd_score, omega, AccuracyMatrix, EmbeddingRow, EmbeddingTable, MmdKernel};
use dfcil_core::model::{padded_softmax, Architecture, BatchNormStats, IncrementalClassifier, LayerStats, Mode, Session};
use dfcil_core::synthesis::{diversity_loss, stat_alignment_loss, BatchMoments};
use dfcil_core::trainer::{Method, OptimSchedule};
use ndarray::{Array1, Array2, Array4, IxDyn};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn prob_rows(rows: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..1.0, rows * k).prop_map(move |v| {
        let mut a = Array2::from_shape_vec((rows, k), v).unwrap();
        for mut r in a.rows_mut() {
            let s = r.sum() + 1e-9;
            r.mapv_inplace(|x| (x + 1e-9 / k as f64) / s);
        }
        a
    })
}

fn schedule_shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..8, 1usize..8).prop_map(|(per, n)| (per * n, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_partition_classes_reproducibly((m, n) in schedule_shape(), seed in any::<u64>()) {
        let a = TaskSchedule::build(m, n, seed).unwrap();
        let b = TaskSchedule::build(m, n, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.num_tasks(), n);
        let mut seen = BTreeSet::new();
        for t in &a.tasks {
            prop_assert_eq!(t.len(), m / n);
            for &c in t {
                prop_assert!(seen.insert(c), "class {} in two tasks", c);
            }
        }
        prop_assert_eq!(seen, (0..m).collect::<BTreeSet<_>>());
    }

    #[test]
    fn coreset_stays_legal_and_balanced(
        (m, n) in schedule_shape(),
        capacity in 1usize..40,
        seed in any::<u64>(),
    ) {
        let per_class = 12;
        let labels: Vec<usize> = (0..m).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        let pixels: Vec<f32> = (0..labels.len()).map(|i| i as f32).collect();
        let data = LabeledDataset::from_parts(pixels, labels, ImageDims::new(1, 1, 1), m, Split::Train).unwrap();
        let schedule = TaskSchedule::build(m, n, seed).unwrap();
        let mut store = CoresetStore::new(capacity).unwrap();
        for t in 0..n {
            store.update(&task_subset(&data, schedule.task(t).unwrap()).unwrap(), seed ^ t as u64).unwrap();
            prop_assert!(store.len() <= capacity);
            let done: BTreeSet<usize> = schedule.cumulative(t).unwrap().into_iter().collect();
            let counts = store.class_counts();
            prop_assert!(counts.keys().all(|c| done.contains(c)), "future class stored after task {}", t);
            let held: Vec<usize> = done.iter().map(|c| counts.get(c).copied().unwrap_or(0)).collect();
            let (lo, hi) = (held.iter().min().unwrap(), held.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "unbalanced {:?}", held);
        }
    }

    #[test]
    fn diversity_is_bounded(p in (1usize..6, 2usize..12).prop_flat_map(|(b, k)| prob_rows(b, k))) {
        let k = p.ncols() as f64;
        let t = Tape::new();
        let d = diversity_loss(t.constant(p.into_dyn())).unwrap().item();
        prop_assert!(d >= -k.ln() - 1e-12 && d <= 1e-12, "{}", d);
    }

    #[test]
    fn stat_alignment_is_nonnegative(
        mu in prop::collection::vec(-2.0f64..2.0, 3),
        sd in prop::collection::vec(0.1f64..3.0, 3),
        mu_hat in prop::collection::vec(-2.0f64..2.0, 3),
        sd_hat in prop::collection::vec(0.1f64..3.0, 3),
    ) {
        let stats = BatchNormStats {
            layers: vec![LayerStats { path: "bn".into(), mean: Array1::from(mu.clone()), std: Array1::from(sd.clone()) }],
        };
        let t = Tape::new();
        let moments = |m: &[f64], s: &[f64]| vec![BatchMoments {
            mean: t.constant(Array1::from(m.to_vec()).into_dyn()),
            std: t.constant(Array1::from(s.to_vec()).into_dyn()),
        }];
        let v = stat_alignment_loss(&stats, &moments(&mu_hat, &sd_hat)).unwrap().item();
        prop_assert!(v >= -1e-12, "{}", v);
        let same = stat_alignment_loss(&stats, &moments(&mu, &sd)).unwrap().item();
        prop_assert!(same.abs() < 1e-12);
        let differs = mu.iter().zip(&mu_hat).chain(sd.iter().zip(&sd_hat)).any(|(a, b)| (a - b).abs() > 1e-3);
        if differs {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn padded_teacher_distribution(logits in (1usize..5, 1usize..5).prop_flat_map(|(b, k)| matrix(b, k)), extra in 0usize..4, temp in 0.5f64..4.0) {
        let k = logits.ncols();
        let p = padded_softmax(&logits, k + extra, temp).unwrap();
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().skip(k).all(|&v| v == 0.0));
        }
        let t = Tape::new();
        let student = t.constant(ndarray::concatenate![ndarray::Axis(1), logits.clone(), Array2::zeros((logits.nrows(), extra))].into_dyn());
        let kd = kd_di_loss(student, &logits, temp).unwrap().item();
        prop_assert!(kd >= -1e-12, "{}", kd);
    }

    #[test]
    fn balance_weights_have_mean_one_and_equal_class_mass(half in 1usize..20, past in 1usize..50, current in 1usize..20) {
        let mut prov = vec![Provenance::Real; half];
        prov.extend(vec![Provenance::Synthetic; half]);
        let w = task_balance_weights(&prov, past, current);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
        let real_mass = w[0] * half as f64 / current as f64;
        let synth_mass = w[half] * half as f64 / past as f64;
        prop_assert!((real_mass - synth_mass).abs() < 1e-9);
    }

    #[test]
    fn mid_is_nonnegative_and_zero_at_equal_means(a in matrix(5, 3), shift in prop::collection::vec(-1.0f64..1.0, 3)) {
        prop_assume!(a.std_axis(ndarray::Axis(0), 1.0).iter().all(|&s| s > 1e-6));
        let moved = &a + &Array1::from(shift.clone());
        let v = mid_score(&a, &moved).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!(mid_score(&a, &a).unwrap().abs() < 1e-12);
        if shift.iter().any(|s| s.abs() > 1e-6) {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn mmd_is_symmetric(a in matrix(4, 2), b in matrix(6, 2), bw in 0.3f64..3.0) {
        let k = MmdKernel { bandwidth: Some(bw) };
        let ab = mmd_score(&a, &b, &k).unwrap();
        let ba = mmd_score(&b, &a, &k).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn omega_trajectory_ends_at_omega(n in 1usize..6, vals in prop::collection::vec(0.05f64..1.0, 64)) {
        let mut acc = AccuracyMatrix::new(vec![3; n]);
        let mut it = vals.iter().copied().cycle();
        for i in 0..n {
            let row: Vec<f64> = (0..=i).map(|_| it.next().unwrap()).collect();
            acc.push_row(row.clone(), row).unwrap();
        }
        let offline: Vec<f64> = (0..n).map(|_| it.next().unwrap()).collect();
        let (om, traj) = omega(&acc, &offline).unwrap();
        prop_assert_eq!(traj.len(), n);
        prop_assert_eq!(*traj.last().unwrap(), om);
        if n == 1 {
            prop_assert!((om - acc.cumulative[0][0] / offline[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_rows_reject_out_of_range(v in -1.0f64..2.0) {
        let mut acc = AccuracyMatrix::new(vec![2]);
        let ok = acc.push_row(vec![v], vec![v]).is_ok();
        prop_assert_eq!(ok, (0.0..=1.0).contains(&v));
    }

    #[test]
    fn milestone_validation(epochs in 1usize..20, milestones in prop::collection::vec(0usize..25, 0..4)) {
        let sched = OptimSchedule { epochs, milestones: milestones.clone(), ..OptimSchedule::default() };
        let legal = milestones.windows(2).all(|w| w[0] < w[1]) && milestones.iter().all(|&m| m < epochs);
        prop_assert_eq!(sched.validate().is_ok(), legal);
    }

    #[test]
    fn embedding_table_round_trips(rows in prop::collection::vec((prop::collection::vec(-1e3f64..1e3, 3), 0usize..100, "[a-z0-9-]{1,12}"), 0..6)) {
        let table = EmbeddingTable {
            dim: 3,
            rows: rows.into_iter().map(|(embedding, label, provenance)| EmbeddingRow { embedding, label, provenance }).collect(),
        };
        prop_assert_eq!(EmbeddingTable::parse(&table.to_text()).unwrap(), table);
    }
}

/// Local CE reads only the current-task logits of real rows, so neither the
/// synthetic rows' features nor the past heads can change it.
#[test]
fn local_ce_is_blind_to_replay_rows() {
    let mut model = IncrementalClassifier::new(Architecture::Convnet4 { width: 2 }, ImageDims::new(3, 8, 8), 1);
    model.grow_heads(&[0, 1], 2).unwrap();
    let teacher = dfcil_core::model::ModelSnapshot::capture(&model, 0);
    model.grow_heads(&[2, 3], 3).unwrap();
    let classes = TaskClasses {
        past: vec![0, 1],
        current: vec![2, 3],
    };
    let batch = MixedBatch {
        real_x: Array4::zeros((2, 3, 8, 8)),
        real_y: vec![3, 2],
        synth_x: Array4::zeros((2, 3, 8, 8)),
        synth_y: vec![0, 1],
    };
    let view = TeacherView::compute(&teacher, &batch.images()).unwrap();
    let term = |synth_rows: [[f64; 8]; 2]| {
        let mut z = Array::zeros(IxDyn(&[4, 8]));
        for j in 0..8 {
            z[[0, j]] = 0.1 * j as f64;
            z[[1, j]] = -0.2 * j as f64;
            z[[2, j]] = synth_rows[0][j];
            z[[3, j]] = synth_rows[1][j];
        }
        let t = Tape::new();
        let s = Session::new(&t, Mode::Train, true);
        let (_, parts) = ours_objective(
            &model,
            &s,
            t.constant(z),
            &batch,
            &view,
            &classes,
            &ObjectiveWeights::default(),
            &ObjectivePlan::default(),
        )
        .unwrap();
        parts.get("local_ce").unwrap()
    };
    let a = term([[0.0; 8], [1.0; 8]]);
    let b = term([[5.0; 8], [-3.0; 8]]);
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn presets_round_trip_through_text() {
    for method in Method::ALL {
        let cfg = ExperimentConfig::toy(method, 4);
        let name = format!("toy_{}_4task", method.id());
        let preset = ExperimentConfig::preset(&name).unwrap();
        preset.validate().unwrap();
        let back = ExperimentConfig::parse(&preset.to_toml().unwrap()).unwrap();
        assert_eq!(back, preset, "{name}");
        assert_eq!(cfg.method, preset.method);
    }
}
