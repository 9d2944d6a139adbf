use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dfcil_autograd::{Array, Tape, Var};
use ndarray::{Array2, Array4, Axis, Ix2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::data::ImageDims;
use crate::error::{invalid, Error, Result};
use crate::model::backbone::{Architecture, Backbone};
use crate::model::layers::{join, BatchNorm, Linear, Module, TensorKind};
use crate::model::session::{BnBatchStats, Session};
use crate::seed;

/// Rows per forward pass in the inference helpers.
const EVAL_CHUNK: usize = 256;

/// Linear head for one task's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub classes: Vec<usize>,
    pub linear: Linear,
}

/// Backbone plus one linear head per task. Head columns follow the class
/// registry, which is the concatenation of every head's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalClassifier {
    arch: Architecture,
    dims: ImageDims,
    backbone: Backbone,
    heads: Vec<TaskHead>,
    /// class id -> (head index, column).
    slots: BTreeMap<usize, (usize, usize)>,
}

impl IncrementalClassifier {
    pub fn new(arch: Architecture, dims: ImageDims, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, "backbone-init", &[]);
        Self {
            arch,
            dims,
            backbone: Backbone::new(arch, dims.channels, &mut rng),
            heads: Vec::new(),
            slots: BTreeMap::new(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dims(&self) -> ImageDims {
        self.dims
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn registry(&self) -> Vec<usize> {
        self.heads.iter().flat_map(|h| h.classes.iter().copied()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.slots.len()
    }

    pub fn is_registered(&self, class: usize) -> bool {
        self.slots.contains_key(&class)
    }

    /// Appends a head for `classes`, initialized uniformly in `±1/sqrt(D)`
    /// with zero bias. Existing parameters are untouched.
    pub fn grow_heads(&mut self, classes: &[usize], seed: u64) -> Result<()> {
        if classes.is_empty() {
            return Err(invalid("cannot grow an empty head"));
        }
        let mut seen = BTreeSet::new();
        for &c in classes {
            if !seen.insert(c) || self.slots.contains_key(&c) {
                return Err(invalid(format!("class {c} is already registered or repeated")));
            }
        }
        let idx = self.heads.len();
        let mut rng = seed::derived_rng(seed, "head-init", &[idx as u64]);
        let linear = Linear::fan_in_uniform(self.feature_dim(), classes.len(), &mut rng);
        for (col, &c) in classes.iter().enumerate() {
            self.slots.insert(c, (idx, col));
        }
        self.heads.push(TaskHead {
            classes: classes.to_vec(),
            linear,
        });
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.dims;
        if shape.len() != 4 || shape[1..] != [d.channels, d.height, d.width] {
            return Err(Error::Shape {
                expected: format!("[B, {}, {}, {}]", d.channels, d.height, d.width),
                given: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Penultimate embedding `[B, D]`.
    pub fn features<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x.shape())?;
        Ok(self.backbone.forward(s, "backbone", x))
    }

    /// Logits of head `idx` from embeddings `z`.
    pub fn head_logits<'t>(&self, s: &Session<'t>, z: Var<'t>, idx: usize) -> Var<'t> {
        self.heads[idx]
            .linear
            .forward(s, &format!("heads.{idx}"), z)
    }

    /// Logits over `classes`, in the given order. Only heads owning at least
    /// one requested class are evaluated.
    pub fn logits<'t>(&self, s: &Session<'t>, z: Var<'t>, classes: &[usize]) -> Result<Var<'t>> {
        if classes.is_empty() {
            return Err(invalid("logits over an empty class set"));
        }
        let slots: Vec<(usize, usize)> = classes
            .iter()
            .map(|c| self.slots.get(c).copied().ok_or(Error::UnregisteredClass(*c)))
            .collect::<Result<_>>()?;
        let used: BTreeSet<usize> = slots.iter().map(|s| s.0).collect();
        let mut offset = BTreeMap::new();
        let mut parts = Vec::new();
        let mut width = 0;
        for &h in &used {
            offset.insert(h, width);
            width += self.heads[h].classes.len();
            parts.push(self.head_logits(s, z, h));
        }
        let cat = if parts.len() == 1 { parts[0] } else { Var::concat(&parts, 1) };
        let cols: Vec<usize> = slots.iter().map(|(h, c)| offset[h] + c).collect();
        if cols.len() == width && cols.iter().enumerate().all(|(i, &c)| i == c) {
            Ok(cat)
        } else {
            Ok(cat.select(1, &cols))
        }
    }

    /// Logits over every registered class, in registry order.
    pub fn all_logits<'t>(&self, s: &Session<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.logits(s, z, &self.registry())
    }

    /// Inference-mode embeddings of an NCHW batch.
    pub fn embed(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(x.shape())?;
        let mut rows = Vec::new();
        for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            let tape = Tape::new();
            let s = Session::frozen(&tape);
            let z = self.features(&s, tape.constant(chunk.to_owned().into_dyn()))?;
            rows.push(to2(&z.value()));
        }
        concat_rows(rows, self.feature_dim())
    }

    /// Inference-mode logits over `classes`.
    pub fn predict_logits(&self, x: &Array4<f64>, classes: &[usize]) -> Result<Array2<f64>> {
        self.check_input(x.shape())?;
        let mut rows = Vec::new();
        for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            let tape = Tape::new();
            let s = Session::frozen(&tape);
            let z = self.features(&s, tape.constant(chunk.to_owned().into_dyn()))?;
            rows.push(to2(&self.logits(&s, z, classes)?.value()));
        }
        concat_rows(rows, classes.len())
    }

    pub fn bn_layers(&self) -> Vec<(String, &BatchNorm)> {
        self.backbone.bn_layers("backbone")
    }

    /// Folds train-mode batch moments into the running statistics.
    pub fn absorb_bn_stats(&mut self, stats: &[BnBatchStats]) {
        let by_path: BTreeMap<&str, &BnBatchStats> = stats.iter().map(|s| (s.path.as_str(), s)).collect();
        for (path, bn) in self.backbone.bn_layers_mut("backbone") {
            if let Some(st) = by_path.get(path.as_str()) {
                bn.absorb(st);
            }
        }
    }

    /// SHA-256 over every tensor, path and the class registry.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |path, a, _| {
            h.update(path.as_bytes());
            for v in a.iter() {
                h.update(v.to_le_bytes());
            }
        });
        for c in self.registry() {
            h.update((c as u64).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    /// Writes parameters keyed by path, the head layout and `task`.
    pub fn save(&self, path: &Path, task: usize) -> Result<()> {
        let heads: Vec<&Vec<usize>> = self.heads.iter().map(|h| &h.classes).collect();
        let mut c = Container::new(serde_json::to_value(CheckpointMeta {
            format: "dfcil-classifier".into(),
            version: 1,
            architecture: self.arch,
            dims: self.dims,
            heads: heads.into_iter().cloned().collect(),
            task,
        })?);
        self.visit("", &mut |p, a, _| c.push(p, a.clone()));
        c.save(path)
    }

    /// Returns the model and the task index stored with it.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let c = Container::load(path)?;
        let origin = path.display().to_string();
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.format != "dfcil-classifier" {
            return Err(Error::Format {
                path: origin,
                reason: format!("not a classifier checkpoint ({})", meta.format),
            });
        }
        let mut model = Self::new(meta.architecture, meta.dims, 0);
        for classes in &meta.heads {
            model.grow_heads(classes, 0)?;
        }
        let mut missing = None;
        model.visit_mut("", &mut |p, a, _| match c.get(&p) {
            Some(v) if v.shape() == a.shape() => a.assign(v),
            _ => missing = missing.clone().or(Some(p)),
        });
        if let Some(p) = missing {
            return Err(Error::Format {
                path: origin,
                reason: format!("tensor {p} missing or misshapen"),
            });
        }
        Ok((model, meta.task))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    architecture: Architecture,
    dims: ImageDims,
    heads: Vec<Vec<usize>>,
    task: usize,
}

impl Module for IncrementalClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.linear.visit(&join(prefix, &format!("heads.{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.linear.visit_mut(&join(prefix, &format!("heads.{i}")), f);
        }
    }
}

pub(crate) fn to2(a: &Array) -> Array2<f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-D array").to_owned()
}

fn concat_rows(rows: Vec<Array2<f64>>, width: usize) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Ok(Array2::zeros((0, width)));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::session::Mode;

    fn tiny() -> IncrementalClassifier {
        let mut m = IncrementalClassifier::new(Architecture::Convnet4 { width: 2 }, ImageDims::new(3, 8, 8), 1);
        m.grow_heads(&[4, 1], 2).unwrap();
        m
    }

    fn batch(n: usize) -> Array4<f64> {
        Array4::from_shape_fn((n, 3, 8, 8), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 / 11.0 - 0.5)
    }

    #[test]
    fn grow_preserves_existing_head() {
        let mut m = tiny();
        let before = m.heads[0].clone();
        m.grow_heads(&[0, 2], 3).unwrap();
        assert_eq!(m.heads[0], before);
        assert_eq!(m.registry(), vec![4, 1, 0, 2]);
        assert!(m.grow_heads(&[], 3).is_err());
        assert!(m.grow_heads(&[1], 3).is_err());
        assert!(m.grow_heads(&[7, 7], 3).is_err());
    }

    #[test]
    fn logits_follow_requested_order() {
        let mut m = tiny();
        m.grow_heads(&[0, 2], 3).unwrap();
        let x = batch(3);
        let all = m.predict_logits(&x, &m.registry()).unwrap();
        let some = m.predict_logits(&x, &[2, 4]).unwrap();
        assert_eq!(some.column(0), all.column(3));
        assert_eq!(some.column(1), all.column(0));
        assert!(matches!(m.predict_logits(&x, &[9]), Err(Error::UnregisteredClass(9))));
    }

    #[test]
    fn unused_heads_are_never_bound() {
        let mut m = tiny();
        m.grow_heads(&[0, 2], 3).unwrap();
        let tape = Tape::new();
        let s = Session::new(&tape, Mode::Train, true);
        let z = m.features(&s, tape.constant(batch(2).into_dyn())).unwrap();
        m.logits(&s, z, &[0, 2]).unwrap();
        assert!(!s.is_bound("heads.0.weight"));
        assert!(s.is_bound("heads.1.weight"));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = tiny();
        let err = m.embed(&Array4::zeros((1, 3, 4, 4))).unwrap_err();
        assert!(err.to_string().contains("[B, 3, 8, 8]"), "{err}");
    }

    #[test]
    fn train_step_moves_running_stats() {
        let mut m = tiny();
        let tape = Tape::new();
        let s = Session::new(&tape, Mode::Train, true);
        m.features(&s, tape.constant(batch(4).into_dyn())).unwrap();
        let stats = s.take_batch_stats();
        assert_eq!(stats.len(), m.bn_layers().len());
        let before = m.digest();
        m.absorb_bn_stats(&stats);
        assert_ne!(m.digest(), before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dfca");
        let mut m = tiny();
        m.grow_heads(&[0], 9).unwrap();
        m.save(&p, 1).unwrap();
        let (back, task) = IncrementalClassifier::load(&p).unwrap();
        assert_eq!(task, 1);
        assert_eq!(back.digest(), m.digest());
        assert_eq!(back, m);
    }

    #[test]
    fn resnet32_has_expected_depth() {
        let m = IncrementalClassifier::new(Architecture::resnet32(), ImageDims::new(3, 32, 32), 0);
        let mut convs = 0;
        m.visit("", &mut |p, _, _| {
            if p.ends_with("conv.weight") || p.ends_with("conv1.weight") || p.ends_with("conv2.weight") {
                if !p.contains("shortcut") {
                    convs += 1;
                }
            }
        });
        // 31 conv layers plus the linear head make 32 weighted layers.
        assert_eq!(convs, 31);
        assert_eq!(m.feature_dim(), 64);
    }
}
