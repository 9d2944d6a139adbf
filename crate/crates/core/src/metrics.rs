//! Evaluation metrics, representational diagnostics, embedding export and
//! step timing.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{task_subset, LabeledDataset, TaskSchedule};
use crate::error::{invalid, Error, Result};
use crate::model::IncrementalClassifier;

/// Accuracies after each task. Row `i` (0-based) has `i + 1` entries.
///
/// `per_task[i][n]` is the accuracy of the model trained through task `i` on
/// task `n`'s test data; `cumulative[i][n]` uses the test data of tasks
/// `0..=n` instead. Predictions always range over all classes seen by `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub task_sizes: Vec<usize>,
    pub per_task: Vec<Vec<f64>>,
    pub cumulative: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(task_sizes: Vec<usize>) -> Self {
        Self {
            task_sizes,
            per_task: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    /// Tasks evaluated so far.
    pub fn len(&self) -> usize {
        self.per_task.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_task.is_empty()
    }

    pub fn push_row(&mut self, per_task: Vec<f64>, cumulative: Vec<f64>) -> Result<()> {
        let i = self.len();
        if i >= self.task_sizes.len() {
            return Err(invalid(format!("accuracy matrix already has {i} rows")));
        }
        if per_task.len() != i + 1 || cumulative.len() != i + 1 {
            return Err(Error::Shape {
                expected: format!("{} entries in row {i}", i + 1),
                given: format!("{} and {}", per_task.len(), cumulative.len()),
            });
        }
        if let Some(v) = per_task.iter().chain(&cumulative).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("accuracy {v} outside [0, 1]")));
        }
        self.per_task.push(per_task);
        self.cumulative.push(cumulative);
        Ok(())
    }

    /// Accuracy over all classes after the last evaluated task.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.cumulative.last().and_then(|r| r.last()).copied()
    }
}

/// Fraction of `test` whose argmax over `span` logits is the true label.
pub fn task_accuracy(model: &IncrementalClassifier, test: &LabeledDataset, span: &[usize]) -> Result<f64> {
    if test.is_empty() {
        return Err(invalid("accuracy on an empty test set"));
    }
    if let Some(l) = test.labels().into_iter().find(|l| !span.contains(l)) {
        return Err(invalid(format!("test label {l} is outside the prediction span")));
    }
    let logits = model.predict_logits(&test.all_images(), span)?;
    let hits = logits
        .outer_iter()
        .zip(test.labels())
        .filter(|(row, y)| span[argmax(*row)] == *y)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One accuracy-matrix row for a model trained through task `i`.
pub fn evaluate_row(
    model: &IncrementalClassifier,
    test: &LabeledDataset,
    schedule: &TaskSchedule,
    i: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let span = schedule.cumulative(i)?;
    let mut per_task = Vec::with_capacity(i + 1);
    let mut cumulative = Vec::with_capacity(i + 1);
    for n in 0..=i {
        per_task.push(task_accuracy(model, &task_subset(test, schedule.task(n)?)?, &span)?);
        cumulative.push(task_accuracy(model, &task_subset(test, &schedule.cumulative(n)?)?, &span)?);
    }
    Ok((per_task, cumulative))
}

/// Offline-normalized average accuracy and its value after each task.
///
/// `offline[n]` is the upper-bound accuracy on the classes of tasks `0..=n`.
pub fn omega(acc: &AccuracyMatrix, offline: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n_tasks = acc.len();
    if n_tasks == 0 {
        return Err(invalid("omega of an empty accuracy matrix"));
    }
    if offline.len() < n_tasks {
        return Err(invalid(format!(
            "offline table covers {} prefixes, need {n_tasks}",
            offline.len()
        )));
    }
    if let Some(n) = offline[..n_tasks].iter().position(|&v| v == 0.0) {
        return Err(invalid(format!("offline accuracy for prefix {n} is zero")));
    }
    let mut trajectory = Vec::with_capacity(n_tasks);
    let mut running = 0.0;
    for i in 0..n_tasks {
        let seen: usize = acc.task_sizes[..=i].iter().sum();
        let inner: f64 = (0..=i)
            .map(|n| acc.task_sizes[n] as f64 / seen as f64 * acc.cumulative[i][n] / offline[n])
            .sum();
        running += inner;
        trajectory.push(running / (i + 1) as f64);
    }
    Ok((*trajectory.last().unwrap(), trajectory))
}

fn check_samples(a: &Array2<f64>, b: &Array2<f64>, min_rows: usize) -> Result<()> {
    if a.nrows() < min_rows || b.nrows() < min_rows {
        return Err(invalid(format!(
            "need at least {min_rows} samples on each side, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape {
            expected: format!("dimension {}", a.ncols()),
            given: format!("dimension {}", b.ncols()),
        });
    }
    Ok(())
}

/// Distance between sample means, each dimension scaled by the reference
/// sample's standard deviation (n − 1 normalization).
pub fn mid_score(z_ref: &Array2<f64>, z_other: &Array2<f64>) -> Result<f64> {
    check_samples(z_ref, z_other, 1)?;
    if z_ref.nrows() < 2 {
        return Err(invalid("reference sample needs two rows for a standard deviation"));
    }
    let mu_r = z_ref.mean_axis(Axis(0)).unwrap();
    let mu_o = z_other.mean_axis(Axis(0)).unwrap();
    let sd = z_ref.std_axis(Axis(0), 1.0);
    if let Some(d) = sd.iter().position(|&v| v == 0.0) {
        return Err(invalid(format!("reference standard deviation is zero in dimension {d}")));
    }
    Ok(((&mu_r - &mu_o) / &sd).mapv(|v| v * v).sum().sqrt())
}

/// RBF kernel bandwidth; `None` picks the median pairwise distance of the
/// pooled sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdKernel {
    pub bandwidth: Option<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_bandwidth(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let pooled: Vec<ArrayView1<f64>> = a.outer_iter().chain(b.outer_iter()).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased squared maximum mean discrepancy with a Gaussian RBF kernel.
/// Can be slightly negative.
pub fn mmd_score(z_a: &Array2<f64>, z_b: &Array2<f64>, kernel: &MmdKernel) -> Result<f64> {
    check_samples(z_a, z_b, 2)?;
    let sigma = match kernel.bandwidth {
        Some(s) if s.is_finite() && s > 0.0 => s,
        Some(s) => return Err(invalid(format!("kernel bandwidth must be positive, got {s}"))),
        None => median_bandwidth(z_a, z_b),
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |x: ArrayView1<f64>, y: ArrayView1<f64>| (-gamma * sq_dist(x, y)).exp();
    let within = |z: &Array2<f64>| {
        let n = z.nrows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += k(z.row(i), z.row(j));
                }
            }
        }
        s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for x in z_a.outer_iter() {
        for y in z_b.outer_iter() {
            cross += k(x, y);
        }
    }
    cross /= (z_a.nrows() * z_b.nrows()) as f64;
    Ok(within(z_a) + within(z_b) - 2.0 * cross)
}

/// How far synthetic past-task embeddings sit from real ones, relative to
/// the distance between two real tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub mid_real1_synth1: f64,
    pub mid_real1_real2: f64,
    pub mid_ratio: f64,
    pub mmd_real1_synth1: f64,
    pub mmd_real1_real2: f64,
    pub mmd_ratio: f64,
}

pub fn drift_report(
    model: &IncrementalClassifier,
    real1: &Array4<f64>,
    real2: &Array4<f64>,
    synth1: &Array4<f64>,
    kernel: &MmdKernel,
) -> Result<DriftReport> {
    let (z1, z2, zs) = (model.embed(real1)?, model.embed(real2)?, model.embed(synth1)?);
    let mid_s = mid_score(&z1, &zs)?;
    let mid_r = mid_score(&z1, &z2)?;
    let mmd_s = mmd_score(&z1, &zs, kernel)?;
    let mmd_r = mmd_score(&z1, &z2, kernel)?;
    Ok(DriftReport {
        mid_real1_synth1: mid_s,
        mid_real1_real2: mid_r,
        mid_ratio: mid_s / mid_r,
        mmd_real1_synth1: mmd_s,
        mmd_real1_real2: mmd_r,
        mmd_ratio: mmd_s / mmd_r,
    })
}

/// Images with labels and a provenance tag such as `real-task-1`.
#[derive(Debug, Clone)]
pub struct EmbeddingSource {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub embedding: Vec<f64>,
    pub label: usize,
    pub provenance: String,
}

/// Penultimate embeddings with labels and provenance, serialized as a
/// `dim=D` header followed by tab-separated rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

pub fn export_embeddings(model: &IncrementalClassifier, sources: &[EmbeddingSource]) -> Result<EmbeddingTable> {
    let mut rows = Vec::new();
    for src in sources {
        if src.labels.len() != src.images.len_of(Axis(0)) {
            return Err(invalid(format!("{}: label and image counts differ", src.provenance)));
        }
        if src.provenance.contains(['\t', '\n']) {
            return Err(invalid("provenance tags cannot contain tabs or newlines"));
        }
        let z = model.embed(&src.images)?;
        rows.extend(z.outer_iter().zip(&src.labels).map(|(r, &label)| EmbeddingRow {
            embedding: r.to_vec(),
            label,
            provenance: src.provenance.clone(),
        }));
    }
    Ok(EmbeddingTable {
        dim: model.feature_dim(),
        rows,
    })
}

impl EmbeddingTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for r in &self.rows {
            for v in &r.embedding {
                write!(out, "{v}\t").unwrap();
            }
            writeln!(out, "{}\t{}", r.label, r.provenance).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Format {
            path: "embedding table".into(),
            reason: format!("line {line}: {why}"),
        };
        let mut lines = text.lines();
        let dim: usize = lines
            .next()
            .and_then(|h| h.strip_prefix("dim="))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| bad(1, "expected a `dim=D` header"))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != dim + 2 {
                return Err(bad(i + 2, &format!("expected {} fields, found {}", dim + 2, fields.len())));
            }
            let embedding = fields[..dim]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(i + 2, &e.to_string()))?;
            let label = fields[dim].parse().map_err(|_| bad(i + 2, "bad label"))?;
            rows.push(EmbeddingRow {
                embedding,
                label,
                provenance: fields[dim + 1].to_string(),
            });
        }
        Ok(Self { dim, rows })
    }
}

/// Mean wall-clock seconds of `measured` calls to `step` after `warmup`
/// untimed calls.
pub fn batch_timing(mut step: impl FnMut() -> Result<()>, warmup: usize, measured: usize) -> Result<f64> {
    if warmup < 1 {
        return Err(invalid("batch timing needs at least one warmup step"));
    }
    if measured < 1 {
        return Err(invalid("batch timing needs at least one measured step"));
    }
    for _ in 0..warmup {
        step()?;
    }
    let start = Instant::now();
    for _ in 0..measured {
        step()?;
    }
    Ok(start.elapsed().as_secs_f64() / measured as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn omega_two_task_hand_case() {
        let mut acc = AccuracyMatrix::new(vec![5, 5]);
        acc.push_row(vec![0.8], vec![0.8]).unwrap();
        acc.push_row(vec![0.6, 0.4], vec![0.6, 0.5]).unwrap();
        let (o, traj) = omega(&acc, &[0.8, 0.8]).unwrap();
        assert!((o - 0.84375).abs() < 1e-12);
        assert_eq!(traj.len(), 2);
        assert!((traj[0] - 1.0).abs() < 1e-12);
        assert!(omega(&acc, &[0.8, 0.0]).is_err());
    }

    #[test]
    fn accuracy_rows_are_range_checked() {
        let mut acc = AccuracyMatrix::new(vec![1, 1]);
        assert!(acc.push_row(vec![1.2], vec![0.5]).is_err());
        assert!(acc.push_row(vec![0.2, 0.1], vec![0.5]).is_err());
    }

    #[test]
    fn mid_hand_case_and_zero_std() {
        // mean (0,0), unbiased std (1,2)
        let r = array![[-1.0, -2.0], [1.0, 2.0]].mapv(|v: f64| v / 2f64.sqrt());
        let o = array![[1.0, 2.0], [1.0, 2.0]];
        assert!((mid_score(&r, &o).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let flat = array![[0.0, 1.0], [0.0, 2.0]];
        let err = mid_score(&flat, &o).unwrap_err().to_string();
        assert!(err.contains("dimension 0"), "{err}");
    }

    #[test]
    fn mmd_rejects_tiny_samples() {
        let a = array![[0.0]];
        assert!(mmd_score(&a, &a, &MmdKernel::default()).is_err());
    }

    #[test]
    fn timing_rejects_degenerate_counts() {
        assert!(batch_timing(|| Ok(()), 1, 0).is_err());
        assert!(batch_timing(|| Ok(()), 0, 3).is_err());
        assert!(batch_timing(|| Ok(()), 1, 3).unwrap() >= 0.0);
    }
}
