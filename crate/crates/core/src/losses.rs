//! Incremental-learning objectives: padded-teacher distillation, local
//! cross-entropy, (importance-weighted) feature distillation and head
//! fine-tuning, and their assembly into full per-step objectives.

use dfcil_autograd::{Tape, Var};
use ndarray::{concatenate, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{padded_softmax, to2, IncrementalClassifier, ModelSnapshot, Session};
use crate::synthesis::{cross_entropy, one_hot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub lambda_kd: f64,
    pub lambda_ft: f64,
    /// Softmax temperature of the logit distillation terms.
    pub kd_temperature: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_kd: 0.1,
            lambda_ft: 1.0,
            kd_temperature: 2.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if ![self.lambda_kd, self.lambda_ft].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(invalid(format!("objective weights must be finite and >= 0: {self:?}")));
        }
        if !(self.kd_temperature.is_finite() && self.kd_temperature > 0.0) {
            return Err(invalid(format!("kd temperature must be positive, got {}", self.kd_temperature)));
        }
        Ok(())
    }
}

/// Past classes (learned before the current task) and the current task's
/// classes. The student's registry is `past` followed by `current`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskClasses {
    pub past: Vec<usize>,
    pub current: Vec<usize>,
}

impl TaskClasses {
    pub fn all(&self) -> Vec<usize> {
        [self.past.as_slice(), self.current.as_slice()].concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Real current-task examples followed by synthetic past-task examples.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub real_x: Array4<f64>,
    pub real_y: Vec<usize>,
    pub synth_x: Array4<f64>,
    pub synth_y: Vec<usize>,
}

impl MixedBatch {
    pub fn real_only(x: Array4<f64>, y: Vec<usize>) -> Self {
        let (_, c, h, w) = x.dim();
        Self {
            real_x: x,
            real_y: y,
            synth_x: Array4::zeros((0, c, h, w)),
            synth_y: Vec::new(),
        }
    }

    pub fn n_real(&self) -> usize {
        self.real_y.len()
    }

    pub fn n_synth(&self) -> usize {
        self.synth_y.len()
    }

    pub fn len(&self) -> usize {
        self.n_real() + self.n_synth()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real rows first, then synthetic rows.
    pub fn images(&self) -> Array4<f64> {
        concatenate(Axis(0), &[self.real_x.view(), self.synth_x.view()]).expect("matching image dims")
    }

    pub fn labels(&self) -> Vec<usize> {
        [self.real_y.as_slice(), self.synth_y.as_slice()].concat()
    }

    pub fn provenance(&self) -> Vec<Provenance> {
        let mut p = vec![Provenance::Real; self.n_real()];
        p.resize(self.len(), Provenance::Synthetic);
        p
    }

    /// Real labels must lie in the current task, synthetic ones in the past.
    pub fn validate(&self, classes: &TaskClasses) -> Result<()> {
        if self.real_x.len_of(Axis(0)) != self.n_real() || self.synth_x.len_of(Axis(0)) != self.n_synth() {
            return Err(invalid("mixed batch image and label counts differ"));
        }
        if let Some(&l) = self.real_y.iter().find(|l| !classes.current.contains(l)) {
            return Err(Error::LabelOutsideTask { label: l });
        }
        if let Some(&l) = self.synth_y.iter().find(|l| !classes.past.contains(l)) {
            return Err(invalid(format!("synthetic label {l} is not a past class")));
        }
        Ok(())
    }
}

/// Frozen-teacher outputs for every row of a batch.
#[derive(Debug, Clone)]
pub struct TeacherView {
    /// Penultimate features `[B, D]`.
    pub features: Array2<f64>,
    /// Logits over the teacher's classes `[B, K_old]`.
    pub logits: Array2<f64>,
    /// Concatenated past-task head weights `[D, K_old]`.
    pub head: Array2<f64>,
}

impl TeacherView {
    pub fn compute(teacher: &ModelSnapshot, images: &Array4<f64>) -> Result<Self> {
        let (features, logits) = teacher_outputs(teacher, images)?;
        Ok(Self {
            features,
            logits,
            head: teacher_head_matrix(teacher)?,
        })
    }

    pub fn rows(&self, lo: usize, hi: usize) -> Self {
        Self {
            features: self.features.slice(ndarray::s![lo..hi, ..]).to_owned(),
            logits: self.logits.slice(ndarray::s![lo..hi, ..]).to_owned(),
            head: self.head.clone(),
        }
    }
}

/// Inference-mode features and logits (over the teacher's classes) from a
/// single frozen forward pass.
pub fn teacher_outputs(teacher: &ModelSnapshot, images: &Array4<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let model = teacher.model();
    let tape = Tape::new();
    let s = Session::frozen(&tape);
    let z = model.features(&s, tape.constant(images.clone().into_dyn()))?;
    let logits = model.logits(&s, z, &teacher.classes())?;
    Ok((to2(&z.value()), to2(&logits.value())))
}

/// The teacher's linear head weights over all of its classes, `[D, K]`.
pub fn teacher_head_matrix(teacher: &ModelSnapshot) -> Result<Array2<f64>> {
    let heads = teacher.model().heads();
    if heads.is_empty() {
        return Err(Error::MissingSnapshot("teacher has no linear heads".into()));
    }
    let parts: Vec<Array2<f64>> = heads.iter().map(|h| to2(&h.linear.weight)).collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| invalid(e.to_string()))
}

fn rows_of<'t>(x: Var<'t>, lo: usize, hi: usize) -> Var<'t> {
    if lo == 0 && hi == x.shape()[0] {
        x
    } else {
        x.select(0, &(lo..hi).collect::<Vec<_>>())
    }
}

/// Mean over rows of `KL(p_teacher ‖ p_student)` with both sides tempered.
/// Teacher probabilities cover the first `K_old` student columns and are
/// zero elsewhere; zero-mass entries contribute nothing.
pub fn kd_di_loss<'t>(student_logits: Var<'t>, teacher_logits: &Array2<f64>, temperature: f64) -> Result<Var<'t>> {
    let shape = student_logits.shape();
    let (b, k) = (shape[0], shape[1]);
    if teacher_logits.nrows() != b {
        return Err(Error::Shape {
            expected: format!("{b} teacher rows"),
            given: format!("{}", teacher_logits.nrows()),
        });
    }
    let p = padded_softmax(teacher_logits, k, temperature)?;
    let entropy_term: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let tape = student_logits.tape();
    let cross = student_logits
        .scale(1.0 / temperature)
        .log_softmax()
        .mul(tape.constant(p.into_dyn()))
        .sum();
    Ok(cross.neg().add_scalar(entropy_term).scale(1.0 / b.max(1) as f64))
}

/// Cross-entropy over the current task's logits only, labels remapped to
/// local column indices.
pub fn local_ce_loss<'t>(
    student: &IncrementalClassifier,
    s: &Session<'t>,
    z: Var<'t>,
    labels: &[usize],
    current: &[usize],
) -> Result<Var<'t>> {
    let local: Vec<usize> = labels
        .iter()
        .map(|l| current.iter().position(|c| c == l).ok_or(Error::LabelOutsideTask { label: *l }))
        .collect::<Result<_>>()?;
    let logits = student.logits(s, z, current)?;
    Ok(cross_entropy(logits, &local, current.len(), labels.len().max(1)))
}

/// Cross-entropy over `classes`, labels given as class ids.
pub fn ce_loss<'t>(
    student: &IncrementalClassifier,
    s: &Session<'t>,
    z: Var<'t>,
    labels: &[usize],
    classes: &[usize],
) -> Result<Var<'t>> {
    let cols: Vec<usize> = labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).ok_or(Error::UnregisteredClass(*l)))
        .collect::<Result<_>>()?;
    let logits = student.logits(s, z, classes)?;
    Ok(cross_entropy(logits, &cols, classes.len(), labels.len().max(1)))
}

fn check_features(z: &Var<'_>, teacher: &Array2<f64>) -> Result<()> {
    let shape = z.shape();
    if shape != [teacher.nrows(), teacher.ncols()] {
        return Err(Error::Shape {
            expected: format!("[{}, {}] features", teacher.nrows(), teacher.ncols()),
            given: format!("{shape:?}"),
        });
    }
    Ok(())
}

/// Mean over rows of `‖z_s − z_t‖²`.
pub fn feature_distillation_loss<'t>(z_student: Var<'t>, z_teacher: &Array2<f64>) -> Result<Var<'t>> {
    check_features(&z_student, z_teacher)?;
    let b = z_teacher.nrows().max(1) as f64;
    let t = z_student.tape().constant(z_teacher.clone().into_dyn());
    Ok(z_student.sub(t).square().sum().scale(1.0 / b))
}

/// Mean over rows of `‖(z_s − z_t) W‖²` with `W` the frozen past-task head
/// weights `[D, K_old]`. Head biases cancel in the difference.
pub fn weighted_feature_distillation_loss<'t>(
    z_student: Var<'t>,
    z_teacher: &Array2<f64>,
    head: &Array2<f64>,
) -> Result<Var<'t>> {
    check_features(&z_student, z_teacher)?;
    if head.nrows() != z_teacher.ncols() {
        return Err(Error::Shape {
            expected: format!("[{}, K] head", z_teacher.ncols()),
            given: format!("{:?}", head.shape()),
        });
    }
    let tape = z_student.tape();
    let b = z_teacher.nrows().max(1) as f64;
    let diff = z_student.sub(tape.constant(z_teacher.clone().into_dyn()));
    Ok(diff
        .matmul(tape.constant(head.clone().into_dyn()))
        .square()
        .sum()
        .scale(1.0 / b))
}

/// Per-row task-balancing weights. Past-provenance rows get
/// `|past| / |all|`, current rows `|current| / |all|`, so every class carries
/// the same expected mass under a 1:1 real:synthetic batch; the weights are
/// then scaled to mean 1. A batch with a single provenance gets all ones.
pub fn task_balance_weights(provenance: &[Provenance], n_past_classes: usize, n_current_classes: usize) -> Vec<f64> {
    let has_real = provenance.contains(&Provenance::Real);
    let has_synth = provenance.contains(&Provenance::Synthetic);
    if !(has_real && has_synth) {
        if !provenance.is_empty() && n_past_classes > 0 {
            log::warn!("task balancing on a single-provenance batch; using uniform weights");
        }
        return vec![1.0; provenance.len()];
    }
    let total = (n_past_classes + n_current_classes) as f64;
    let raw: Vec<f64> = provenance
        .iter()
        .map(|p| match p {
            Provenance::Synthetic => n_past_classes as f64 / total,
            Provenance::Real => n_current_classes as f64 / total,
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Weighted cross-entropy over `classes` computed from detached features, so
/// only the linear heads receive gradient.
pub fn ft_ce_loss<'t>(
    student: &IncrementalClassifier,
    s: &Session<'t>,
    z: Var<'t>,
    labels: &[usize],
    classes: &[usize],
    weights: &[f64],
) -> Result<Var<'t>> {
    if weights.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} sample weights", labels.len()),
            given: format!("{}", weights.len()),
        });
    }
    let cols: Vec<usize> = labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).ok_or(Error::UnregisteredClass(*l)))
        .collect::<Result<_>>()?;
    let logits = student.logits(s, z.detach(), classes)?;
    let tape = z.tape();
    let mut target = one_hot(&cols, classes.len());
    for (mut row, &w) in target.outer_iter_mut().zip(weights) {
        row *= w;
    }
    let b = labels.len().max(1) as f64;
    Ok(logits.log_softmax().mul(tape.constant(target)).sum().scale(-1.0 / b))
}

/// Named loss contributions (already weighted) and their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    fn from_terms<'t>(terms: Vec<(&str, Var<'t>)>) -> (Var<'t>, Self) {
        let total = terms[1..].iter().fold(terms[0].1, |acc, (_, v)| acc.add(*v));
        let breakdown = Self {
            terms: terms.iter().map(|(n, v)| (n.to_string(), v.item())).collect(),
            total: total.item(),
        };
        (total, breakdown)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Which rows enter the weighted feature distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WfeatRows {
    All,
    Real,
    Synthetic,
}

/// How the proposed objective is assembled; ablations switch parts off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectivePlan {
    /// Local CE over the current heads; otherwise CE over all heads.
    pub local_ce: bool,
    pub wfeat_rows: WfeatRows,
    pub fine_tune: bool,
    pub balance: bool,
}

impl Default for ObjectivePlan {
    fn default() -> Self {
        Self {
            local_ce: true,
            wfeat_rows: WfeatRows::All,
            fine_tune: true,
            balance: true,
        }
    }
}

/// `CE_local(real) + λ_kd · wfeat(real ∪ synth) + λ_ft · FT(real ∪ synth)`.
///
/// `z` holds student features for `batch.images()` (real rows first);
/// `teacher` holds the frozen teacher's outputs for the same rows.
#[allow(clippy::too_many_arguments)]
pub fn ours_objective<'t>(
    student: &IncrementalClassifier,
    s: &Session<'t>,
    z: Var<'t>,
    batch: &MixedBatch,
    teacher: &TeacherView,
    classes: &TaskClasses,
    w: &ObjectiveWeights,
    plan: &ObjectivePlan,
) -> Result<(Var<'t>, LossBreakdown)> {
    batch.validate(classes)?;
    let (nr, n) = (batch.n_real(), batch.len());
    let z_real = rows_of(z, 0, nr);
    let mut terms = Vec::new();
    if plan.local_ce {
        terms.push(("local_ce", local_ce_loss(student, s, z_real, &batch.real_y, &classes.current)?));
    } else {
        terms.push(("ce", ce_loss(student, s, z_real, &batch.real_y, &classes.all())?));
    }
    if classes.past.is_empty() {
        return Ok(LossBreakdown::from_terms(terms));
    }
    let (lo, hi) = match plan.wfeat_rows {
        WfeatRows::All => (0, n),
        WfeatRows::Real => (0, nr),
        WfeatRows::Synthetic => (nr, n),
    };
    let tv = teacher.rows(lo, hi);
    let wfeat = if hi > lo {
        weighted_feature_distillation_loss(rows_of(z, lo, hi), &tv.features, &tv.head)?
    } else {
        s.tape().scalar(0.0)
    };
    terms.push(("wfeat", wfeat.scale(w.lambda_kd)));
    if plan.fine_tune {
        let prov = batch.provenance();
        let weights = if plan.balance {
            task_balance_weights(&prov, classes.past.len(), classes.current.len())
        } else {
            vec![1.0; n]
        };
        let ft = ft_ce_loss(student, s, z, &batch.labels(), &classes.all(), &weights)?;
        terms.push(("ft_ce", ft.scale(w.lambda_ft)));
    }
    Ok(LossBreakdown::from_terms(terms))
}

/// Knobs of the logit-distillation baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillOptions {
    pub temperature: f64,
    /// Multiplier on each distillation term.
    pub kd_weight: f64,
    /// Also apply the CE term to the replay rows, with their labels.
    pub ce_on_replay: bool,
}

/// `CE_{1:n}(real) + KD(real) + KD(replay)` with the teacher's tempered
/// softmax zero-padded to the student's classes.
///
/// Replay rows are the batch's synthetic part (generated images or stored
/// exemplars). The replay KD term is dropped when there are none.
#[allow(clippy::too_many_arguments)]
pub fn lwf_di_objective<'t>(
    student: &IncrementalClassifier,
    s: &Session<'t>,
    z: Var<'t>,
    batch: &MixedBatch,
    teacher_logits: &Array2<f64>,
    classes: &TaskClasses,
    opts: &DistillOptions,
) -> Result<(Var<'t>, LossBreakdown)> {
    batch.validate(classes)?;
    let (nr, n) = (batch.n_real(), batch.len());
    let all = classes.all();
    let ce = if opts.ce_on_replay {
        ce_loss(student, s, z, &batch.labels(), &all)?
    } else {
        ce_loss(student, s, rows_of(z, 0, nr), &batch.real_y, &all)?
    };
    let mut terms = vec![("ce", ce)];
    if classes.past.is_empty() {
        return Ok(LossBreakdown::from_terms(terms));
    }
    if teacher_logits.nrows() != n {
        return Err(Error::Shape {
            expected: format!("{n} teacher rows"),
            given: format!("{}", teacher_logits.nrows()),
        });
    }
    let logits = student.logits(s, z, &all)?;
    let real_t = teacher_logits.slice(ndarray::s![0..nr, ..]).to_owned();
    let kd = kd_di_loss(rows_of(logits, 0, nr), &real_t, opts.temperature)?;
    terms.push(("kd_real", kd.scale(opts.kd_weight)));
    if n > nr {
        let replay_t = teacher_logits.slice(ndarray::s![nr..n, ..]).to_owned();
        let kd = kd_di_loss(rows_of(logits, nr, n), &replay_t, opts.temperature)?;
        terms.push(("kd_replay", kd.scale(opts.kd_weight)));
    }
    Ok(LossBreakdown::from_terms(terms))
}
