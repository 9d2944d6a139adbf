use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use dfcil_autograd::{Array, Gradients, Tape, Var};
use ndarray::Array1;

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are collected for later update.
    Train,
    /// Running statistics.
    Eval,
}

/// Differentiable moments of one batch-norm layer's input.
#[derive(Debug, Clone)]
pub struct BnProbe<'t> {
    pub path: String,
    /// Per-channel mean, shape `[C]`.
    pub mean: Var<'t>,
    /// Per-channel biased variance, shape `[C]`.
    pub var: Var<'t>,
}

/// Batch moments observed by a train-mode batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub path: String,
    pub mean: Array1<f64>,
    /// Biased variance.
    pub var: Array1<f64>,
    /// Elements per channel that produced the moments.
    pub count: usize,
}

/// Binds one model's parameters onto a tape for a single forward pass.
///
/// Trainable sessions bind parameters as leaves, frozen ones as constants.
/// Parameters are bound on first use, so parts of a model that a forward
/// pass never touches never enter the graph.
pub struct Session<'t> {
    tape: &'t Tape,
    mode: Mode,
    trainable: bool,
    probe: bool,
    bound: RefCell<Vec<(String, Var<'t>)>>,
    index: RefCell<HashMap<String, usize>>,
    probes: RefCell<Vec<BnProbe<'t>>>,
    batch_stats: RefCell<Vec<BnBatchStats>>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t Tape, mode: Mode, trainable: bool) -> Self {
        Self {
            tape,
            mode,
            trainable,
            probe: false,
            bound: RefCell::default(),
            index: RefCell::default(),
            probes: RefCell::default(),
            batch_stats: RefCell::default(),
        }
    }

    /// Frozen, running-statistics session.
    pub fn frozen(tape: &'t Tape) -> Self {
        Self::new(tape, Mode::Eval, false)
    }

    /// Also capture differentiable input moments of every batch-norm layer.
    pub fn with_probes(mut self) -> Self {
        self.probe = true;
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn probing(&self) -> bool {
        self.probe
    }

    pub fn param(&self, path: &str, value: &Array) -> Var<'t> {
        if let Some(&i) = self.index.borrow().get(path) {
            return self.bound.borrow()[i].1;
        }
        let v = if self.trainable {
            self.tape.leaf(value.clone())
        } else {
            self.tape.constant(value.clone())
        };
        let mut bound = self.bound.borrow_mut();
        self.index.borrow_mut().insert(path.to_string(), bound.len());
        bound.push((path.to_string(), v));
        v
    }

    /// Parameters bound so far, in binding order.
    pub fn bound(&self) -> Vec<(String, Var<'t>)> {
        self.bound.borrow().clone()
    }

    pub fn is_bound(&self, path: &str) -> bool {
        self.index.borrow().contains_key(path)
    }

    /// Gradients of bound parameters that received one, keyed by path.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(p, v)| grads.get(*v).map(|g| (p.clone(), g.clone())))
            .collect()
    }

    pub(crate) fn push_probe(&self, probe: BnProbe<'t>) {
        self.probes.borrow_mut().push(probe);
    }

    pub(crate) fn push_batch_stats(&self, stats: BnBatchStats) {
        self.batch_stats.borrow_mut().push(stats);
    }

    pub fn take_probes(&self) -> Vec<BnProbe<'t>> {
        std::mem::take(&mut self.probes.borrow_mut())
    }

    pub fn take_batch_stats(&self) -> Vec<BnBatchStats> {
        std::mem::take(&mut self.batch_stats.borrow_mut())
    }
}
