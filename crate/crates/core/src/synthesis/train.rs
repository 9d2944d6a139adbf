use dfcil_autograd::{Array, Tape, Var};
use ndarray::{Array2, Array4, Axis, IxDyn};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{to2, BatchNormStats, Mode, Module, ModelSnapshot, Session};
use crate::optim::Adam;
use crate::seed::{self, Rng};
use crate::synthesis::generator::{Generator, GeneratorConfig};
use crate::synthesis::losses::{
    argmax, content_loss, diversity_loss, moments_from_probes, smoothness_prior_loss, stat_alignment_loss,
};

/// Weights of the inversion objective and the content temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionWeights {
    pub content: f64,
    pub diversity: f64,
    pub stat: f64,
    pub prior: f64,
    /// Softmax temperature of the content term (logits are divided by it).
    pub temperature: f64,
}

impl Default for InversionWeights {
    fn default() -> Self {
        Self {
            content: 1.0,
            diversity: 1.0,
            stat: 50.0,
            prior: 1e-3,
            temperature: 1000.0,
        }
    }
}

impl InversionWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.content, self.diversity, self.stat, self.prior];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid(format!("inversion weights must be finite and >= 0: {self:?}")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(invalid(format!("inversion temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthesisBackend {
    /// Train a noise-to-image generator.
    Generator,
    /// Optimize a fixed pool of images directly.
    DirectImages { pool_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub weights: InversionWeights,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub generator: GeneratorConfig,
    pub backend: SynthesisBackend,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            weights: InversionWeights::default(),
            steps: 5000,
            batch_size: 128,
            lr: 1e-3,
            generator: GeneratorConfig::default(),
            backend: SynthesisBackend::Generator,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.steps == 0 {
            return Err(invalid("synthesis steps must be positive"));
        }
        if self.batch_size < 2 {
            return Err(invalid("synthesis batch size must be at least 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid(format!("synthesis lr must be positive, got {}", self.lr)));
        }
        if let SynthesisBackend::DirectImages { pool_size } = self.backend {
            if pool_size < 2 {
                return Err(invalid("direct image pool needs at least 2 images"));
            }
        }
        Ok(())
    }
}

/// Inversion loss terms of one optimization step (unweighted) and the
/// weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionStep {
    pub total: f64,
    pub content: f64,
    pub diversity: f64,
    pub stat: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Network(Generator),
    Pool(Array4<f64>),
}

/// A trained image source for one task boundary. Holds no reference to the
/// teacher; drop it when the task ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisGenerator {
    source: Source,
    trace: Vec<InversionStep>,
}

/// Synthetic images with the teacher's pseudo-labels and outputs.
#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    /// `[B, C, H, W]`.
    pub images: Array4<f64>,
    /// Teacher argmax, as class ids.
    pub labels: Vec<usize>,
    /// Teacher logits over its own classes in registry order.
    pub teacher_logits: Array2<f64>,
    /// Teacher penultimate features.
    pub teacher_features: Array2<f64>,
}

impl SynthesisGenerator {
    /// Loss terms recorded at every optimization step.
    pub fn trace(&self) -> &[InversionStep] {
        &self.trace
    }

    /// Trainable parameter count (pool pixels for the direct backend).
    pub fn param_count(&self) -> usize {
        match &self.source {
            Source::Network(g) => g.param_count(),
            Source::Pool(p) => p.len(),
        }
    }

    pub fn is_network(&self) -> bool {
        matches!(self.source, Source::Network(_))
    }

    /// Fresh synthetic batch labelled by the teacher's argmax.
    pub fn sample(&self, teacher: &ModelSnapshot, batch: usize, rng: &mut Rng) -> Result<SyntheticBatch> {
        if batch == 0 {
            return Err(invalid("cannot sample an empty synthetic batch"));
        }
        let images = match &self.source {
            Source::Network(g) => {
                let tape = Tape::new();
                let s = Session::new(&tape, Mode::Train, false);
                let z = tape.constant(noise(batch, g.config().z_dim, rng));
                let x = g.forward(&s, z).value();
                x.view().into_dimensionality().unwrap().to_owned()
            }
            Source::Pool(pool) => {
                let n = pool.len_of(Axis(0));
                let picks: Vec<usize> = if batch <= n {
                    index::sample(rng, n, batch).into_vec()
                } else {
                    (0..batch).map(|_| rand::Rng::random_range(rng, 0..n)).collect()
                };
                pool.select(Axis(0), &picks)
            }
        };
        let model = teacher.model();
        let classes = teacher.classes();
        let tape = Tape::new();
        let s = Session::frozen(&tape);
        let z = model.features(&s, tape.constant(images.clone().into_dyn()))?;
        let logits = model.logits(&s, z, &classes)?;
        let teacher_logits = to2(&logits.value());
        let labels = teacher_logits
            .outer_iter()
            .map(|r| classes[argmax(r.iter().copied())])
            .collect();
        Ok(SyntheticBatch {
            images,
            labels,
            teacher_logits,
            teacher_features: to2(&z.value()),
        })
    }
}

fn noise(b: usize, z: usize, rng: &mut Rng) -> Array {
    Array::from_shape_simple_fn(IxDyn(&[b, z]), || StandardNormal.sample(rng))
}

/// Scores a synthetic batch against the frozen teacher and returns the
/// weighted inversion objective with its unweighted parts.
fn inversion_objective<'t>(
    teacher: &ModelSnapshot,
    stats: &BatchNormStats,
    w: &InversionWeights,
    x: Var<'t>,
) -> Result<(Var<'t>, InversionStep)> {
    let model = teacher.model();
    let s = Session::frozen(x.tape()).with_probes();
    let z = model.features(&s, x)?;
    let logits = model.all_logits(&s, z)?;
    let eps: Vec<f64> = model.bn_layers().iter().map(|(_, bn)| bn.eps).collect();
    let probes = s.take_probes();
    let moments = moments_from_probes(&probes, eps.first().copied().unwrap_or(1e-5));
    let (con, _) = content_loss(logits, w.temperature)?;
    let div = diversity_loss(logits.log_softmax().exp())?;
    let stat = stat_alignment_loss(stats, &moments)?;
    let prior = smoothness_prior_loss(x);
    let total = con
        .scale(w.content)
        .add(div.scale(w.diversity))
        .add(stat.scale(w.stat))
        .add(prior.scale(w.prior));
    let step = InversionStep {
        total: total.item(),
        content: con.item(),
        diversity: div.item(),
        stat: stat.item(),
        prior: prior.item(),
    };
    Ok((total, step))
}

/// Fits an image source to the frozen teacher by minimizing the weighted
/// inversion objective with Adam. Only the source's parameters change.
pub fn train_generator(teacher: &ModelSnapshot, cfg: &SynthesisConfig, seed: u64) -> Result<SynthesisGenerator> {
    cfg.validate()?;
    let stats = BatchNormStats::of_snapshot(teacher)?;
    let dims = teacher.model().input_dims();
    let mut rng = seed::derived_rng(seed, "synthesis", &[teacher.task() as u64]);
    let mut adam = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let source = match cfg.backend {
        SynthesisBackend::Generator => {
            let mut gen = Generator::new(cfg.generator, dims, &mut rng)?;
            for _ in 0..cfg.steps {
                let tape = Tape::new();
                let s = Session::new(&tape, Mode::Train, true);
                let z = tape.constant(noise(cfg.batch_size, cfg.generator.z_dim, &mut rng));
                let x = gen.forward(&s, z);
                let (loss, step) = inversion_objective(teacher, &stats, &cfg.weights, x)?;
                let grads = tape.backward(loss);
                adam.step(&mut gen, &s.gradients(&grads));
                trace.push(step);
            }
            Source::Network(gen)
        }
        SynthesisBackend::DirectImages { pool_size } => {
            let shape = [pool_size, dims.channels, dims.height, dims.width];
            let mut pool: Array4<f64> = Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
            let chunks = pool_size.div_ceil(cfg.batch_size);
            for step_idx in 0..cfg.steps {
                let c = step_idx % chunks;
                let lo = c * cfg.batch_size;
                let hi = (lo + cfg.batch_size).min(pool_size);
                let tape = Tape::new();
                let part = pool.slice(ndarray::s![lo..hi, .., .., ..]).to_owned().into_dyn();
                let x = tape.leaf(part);
                let (loss, step) = inversion_objective(teacher, &stats, &cfg.weights, x)?;
                let grads = tape.backward(loss);
                let g = grads.get(x).expect("pool chunk is a leaf").clone();
                let mut p = pool.slice(ndarray::s![lo..hi, .., .., ..]).to_owned().into_dyn();
                adam.update(&format!("pool.{c}"), &mut p, &g);
                pool.slice_mut(ndarray::s![lo..hi, .., .., ..])
                    .assign(&p.into_dimensionality::<ndarray::Ix4>().unwrap());
                trace.push(step);
            }
            Source::Pool(pool)
        }
    };
    Ok(SynthesisGenerator { source, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageDims;
    use crate::model::{Architecture, IncrementalClassifier};

    fn teacher() -> ModelSnapshot {
        let mut m = IncrementalClassifier::new(Architecture::Convnet4 { width: 2 }, ImageDims::new(3, 8, 8), 0);
        m.grow_heads(&[3, 5, 7], 0).unwrap();
        ModelSnapshot::capture(&m, 0)
    }

    fn small(backend: SynthesisBackend) -> SynthesisConfig {
        SynthesisConfig {
            steps: 3,
            batch_size: 4,
            generator: GeneratorConfig { z_dim: 8, width: 4 },
            backend,
            ..SynthesisConfig::default()
        }
    }

    #[test]
    fn samples_carry_teacher_labels() {
        let t = teacher();
        for backend in [SynthesisBackend::Generator, SynthesisBackend::DirectImages { pool_size: 6 }] {
            let g = train_generator(&t, &small(backend), 1).unwrap();
            assert_eq!(g.trace().len(), 3);
            let b = g.sample(&t, 5, &mut seed::rng(2)).unwrap();
            assert_eq!(b.images.shape(), &[5, 3, 8, 8]);
            assert!(b.labels.iter().all(|l| [3, 5, 7].contains(l)));
            assert_eq!(b.teacher_logits.dim(), (5, 3));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let t = teacher();
        let a = train_generator(&t, &small(SynthesisBackend::Generator), 4).unwrap();
        let b = train_generator(&t, &small(SynthesisBackend::Generator), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_zero_steps() {
        let cfg = SynthesisConfig {
            steps: 0,
            ..small(SynthesisBackend::Generator)
        };
        assert!(train_generator(&teacher(), &cfg, 0).is_err());
    }
}
