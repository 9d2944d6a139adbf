use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use ndarray::Array4;

use crate::data::dataset::{Augmentation, LabeledDataset};
use crate::seed::Rng;

/// Counts every real training example handed to the trainer, keyed by the
/// task being trained at the time and the example's label.
#[derive(Debug, Clone, Default)]
pub struct AccessAuditor {
    inner: Arc<Mutex<AuditState>>,
}

#[derive(Debug, Default)]
struct AuditState {
    task: usize,
    reads: BTreeMap<(usize, usize), usize>,
}

impl AccessAuditor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enter_task(&self, task: usize) {
        self.inner.lock().unwrap().task = task;
    }

    pub fn record(&self, labels: &[usize]) {
        let mut st = self.inner.lock().unwrap();
        let task = st.task;
        for &l in labels {
            *st.reads.entry((task, l)).or_default() += 1;
        }
    }

    /// Reads made while training `task`, by label.
    pub fn reads_during(&self, task: usize) -> BTreeMap<usize, usize> {
        self.inner
            .lock()
            .unwrap()
            .reads
            .iter()
            .filter(|((t, _), _)| *t == task)
            .map(|((_, l), &n)| (*l, n))
            .collect()
    }

    /// Reads of `labels` made while training `task`.
    pub fn count(&self, task: usize, labels: &[usize]) -> usize {
        self.reads_during(task)
            .iter()
            .filter(|(l, _)| labels.contains(l))
            .map(|(_, &n)| n)
            .sum()
    }
}

/// A training dataset whose batch reads all pass through an auditor.
#[derive(Debug, Clone)]
pub struct AuditedData {
    data: LabeledDataset,
    auditor: AccessAuditor,
}

impl AuditedData {
    pub fn new(data: LabeledDataset, auditor: AccessAuditor) -> Self {
        Self { data, auditor }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self, positions: &[usize], aug: &Augmentation, rng: &mut Rng) -> (Array4<f64>, Vec<usize>) {
        let labels = self.data.gather_labels(positions);
        self.auditor.record(&labels);
        let mut x = self.data.gather(positions);
        aug.apply(&mut x, rng);
        (x, labels)
    }
}

/// Shuffled mini-batch positions for one epoch. A trailing batch with fewer
/// than two examples is dropped, since batch normalization needs two.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}
