//! Inversion losses: label diversity, content, batch-norm statistic
//! alignment and the smoothness prior.

use dfcil_autograd::{Array, Var};
use ndarray::{Array1, IxDyn};

use crate::error::{invalid, Error, Result};
use crate::model::{BatchNormStats, BnProbe};

/// Added inside the logarithm so empty classes contribute `0 · ln 0 = 0`.
const LOG_FLOOR: f64 = 1e-300;

/// Negative entropy of the batch-mean prediction, natural log.
/// Ranges over `[-ln K, 0]`.
pub fn diversity_loss<'t>(probs: Var<'t>) -> Result<Var<'t>> {
    let p = probs.value();
    if p.ndim() != 2 || p.shape()[0] == 0 {
        return Err(invalid(format!("diversity loss needs a non-empty [B, K] batch, got {:?}", p.shape())));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(invalid("probabilities must be finite and non-negative"));
    }
    for (i, row) in p.outer_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("probability row {i} sums to {s}")));
        }
    }
    let mean = probs.mean_axes_keepdim(&[0]);
    Ok(mean.mul(mean.add_scalar(LOG_FLOOR).ln()).sum())
}

/// Cross-entropy of the `temperature`-scaled softmax against the argmax of
/// the raw logits. Returns the loss and the argmax column per row; the
/// labels carry no gradient.
pub fn content_loss<'t>(logits: Var<'t>, temperature: f64) -> Result<(Var<'t>, Vec<usize>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid(format!("content temperature must be positive, got {temperature}")));
    }
    let l = logits.value();
    if l.ndim() != 2 || l.shape()[0] == 0 {
        return Err(invalid(format!("content loss needs a non-empty [B, K] batch, got {:?}", l.shape())));
    }
    let (b, k) = (l.shape()[0], l.shape()[1]);
    let labels: Vec<usize> = l.outer_iter().map(|row| argmax(row.iter().copied())).collect();
    let loss = cross_entropy(logits.scale(1.0 / temperature), &labels, k, b);
    Ok((loss, labels))
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub(crate) fn one_hot(labels: &[usize], k: usize) -> Array {
    let mut a = Array::zeros(IxDyn(&[labels.len(), k]));
    for (i, &l) in labels.iter().enumerate() {
        a[[i, l]] = 1.0;
    }
    a
}

/// Mean cross-entropy of `[B, K]` logits against column labels.
pub(crate) fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize], k: usize, b: usize) -> Var<'t> {
    let tape = logits.tape();
    let target = tape.constant(one_hot(labels, k));
    logits.log_softmax().mul(target).sum().scale(-1.0 / b as f64)
}

/// Batch mean and standard deviation of one normalization layer's input.
#[derive(Debug, Clone)]
pub struct BatchMoments<'t> {
    pub mean: Var<'t>,
    pub std: Var<'t>,
}

/// Converts probed moments to `(μ̂, σ̂)` with `σ̂ = sqrt(var + eps)`.
pub fn moments_from_probes<'t>(probes: &[BnProbe<'t>], eps: f64) -> Vec<BatchMoments<'t>> {
    probes
        .iter()
        .map(|p| BatchMoments {
            mean: p.mean,
            std: p.var.add_scalar(eps).sqrt(),
        })
        .collect()
}

/// Mean over layers of the channel-mean Gaussian KL
/// `ln(σ̂/σ) − ½(1 − (σ² + (μ − μ̂)²)/σ̂²)`.
pub fn stat_alignment_loss<'t>(teacher: &BatchNormStats, batch: &[BatchMoments<'t>]) -> Result<Var<'t>> {
    if teacher.layers.len() != batch.len() {
        return Err(Error::Shape {
            expected: format!("{} normalization layers", teacher.layers.len()),
            given: format!("{} layers of batch statistics", batch.len()),
        });
    }
    if batch.is_empty() {
        return Err(Error::NoNormalizationLayers);
    }
    let tape = batch[0].mean.tape();
    let mut terms = Vec::with_capacity(batch.len());
    for (layer, m) in teacher.layers.iter().zip(batch) {
        let c = layer.mean.len();
        if m.mean.shape() != [c] || m.std.shape() != [c] {
            return Err(Error::Shape {
                expected: format!("[{c}] channel moments for {}", layer.path),
                given: format!("{:?}", m.mean.shape()),
            });
        }
        if layer.std.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid(format!("non-positive running std in {}", layer.path)));
        }
        if m.std.value().iter().any(|&s| !(s > 0.0)) {
            return Err(invalid(format!("non-positive batch std at {}", layer.path)));
        }
        let dyn1 = |a: &Array1<f64>| a.clone().into_dyn();
        let mu = tape.constant(dyn1(&layer.mean));
        let var = tape.constant(dyn1(&layer.std.mapv(|s| s * s)));
        let ln_sigma = tape.constant(dyn1(&layer.std.mapv(f64::ln)));
        let diff = mu.sub(m.mean).square();
        let ratio = var.add(diff).div(m.std.square());
        let kl = m.std.ln().sub(ln_sigma).add(ratio.add_scalar(-1.0).scale(0.5));
        terms.push(kl.mean());
    }
    let n = terms.len() as f64;
    let total = terms[1..].iter().fold(terms[0], |acc, t| acc.add(*t));
    Ok(total.scale(1.0 / n))
}

/// 3×3 Gaussian kernel with σ = 1, normalized to sum 1.
pub fn gaussian_kernel() -> [[f64; 3]; 3] {
    let g = [(-0.5f64).exp(), 1.0, (-0.5f64).exp()];
    let s: f64 = g.iter().sum();
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = g[i] * g[j] / (s * s);
        }
    }
    k
}

/// Batch mean of `‖x − blur(x)‖²` with reflect-padded Gaussian blur.
pub fn smoothness_prior_loss<'t>(x: Var<'t>) -> Var<'t> {
    let b = x.shape()[0].max(1);
    x.sub(x.filter3x3_reflect(gaussian_kernel()))
        .square()
        .sum()
        .scale(1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerStats;
    use dfcil_autograd::Tape;
    use ndarray::{arr1, array};

    fn c2(t: &Tape, a: ndarray::Array2<f64>) -> Var<'_> {
        t.constant(a.into_dyn())
    }

    #[test]
    fn diversity_hand_cases() {
        let t = Tape::new();
        let uniform = c2(&t, ndarray::Array2::from_elem((3, 10), 0.1));
        assert!((diversity_loss(uniform).unwrap().item() + 10f64.ln()).abs() < 1e-9);
        let onehot = c2(&t, array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(diversity_loss(onehot).unwrap().item().abs() < 1e-9);
        let pair = c2(&t, array![[0.8, 0.2], [0.2, 0.8]]);
        assert!((diversity_loss(pair).unwrap().item() + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn diversity_rejects_invalid_rows() {
        let t = Tape::new();
        assert!(diversity_loss(c2(&t, array![[1.2, -0.2]])).is_err());
        assert!(diversity_loss(c2(&t, array![[0.5, 0.4]])).is_err());
    }

    #[test]
    fn content_hand_cases() {
        let t = Tape::new();
        let (l, y) = content_loss(c2(&t, array![[2.0, 1.0]]), 1.0).unwrap();
        let expect = -(2f64.exp() / (2f64.exp() + 1f64.exp())).ln();
        assert_eq!(y, vec![0]);
        assert!((l.item() - expect).abs() < 1e-12);
        assert!((l.item() - 0.313262).abs() < 1e-6);
        let (u, _) = content_loss(c2(&t, ndarray::Array2::zeros((2, 7))), 5.0).unwrap();
        assert!((u.item() - 7f64.ln()).abs() < 1e-12);
        let (c, _) = content_loss(c2(&t, array![[100.0, 0.0, 0.0]]), 2.0).unwrap();
        assert!(c.item() < 1e-12);
        assert!(content_loss(c2(&t, array![[1.0]]), 0.0).is_err());
    }

    fn stats(mean: f64, std: f64) -> BatchNormStats {
        BatchNormStats {
            layers: vec![LayerStats {
                path: "bn".into(),
                mean: arr1(&[mean, mean]),
                std: arr1(&[std, std]),
            }],
        }
    }

    fn moments(t: &Tape, mean: f64, std: f64) -> Vec<BatchMoments<'_>> {
        vec![BatchMoments {
            mean: t.constant(arr1(&[mean, mean]).into_dyn()),
            std: t.constant(arr1(&[std, std]).into_dyn()),
        }]
    }

    #[test]
    fn stat_alignment_closed_forms() {
        let t = Tape::new();
        let same = stat_alignment_loss(&stats(0.3, 1.7), &moments(&t, 0.3, 1.7)).unwrap();
        assert!(same.item().abs() < 1e-15);
        let shifted = stat_alignment_loss(&stats(0.0, 1.0), &moments(&t, 1.0, 1.0)).unwrap();
        assert!((shifted.item() - 0.5).abs() < 1e-9);
        let wide = stat_alignment_loss(&stats(0.0, 1.0), &moments(&t, 0.0, 2.0)).unwrap();
        assert!((wide.item() - (2f64.ln() - 0.5 * 0.75)).abs() < 1e-9);
        assert!((wide.item() - 0.318147).abs() < 1e-6);
    }

    #[test]
    fn stat_alignment_errors() {
        let t = Tape::new();
        assert!(stat_alignment_loss(&stats(0.0, 1.0), &moments(&t, 0.0, 0.0)).is_err());
        assert!(stat_alignment_loss(&stats(0.0, 0.0), &moments(&t, 0.0, 1.0)).is_err());
        assert!(stat_alignment_loss(&stats(0.0, 1.0), &[]).is_err());
    }

    #[test]
    fn prior_is_zero_on_constants() {
        let t = Tape::new();
        let x = t.constant(Array::from_elem(IxDyn(&[2, 3, 5, 5]), 0.7));
        assert!(smoothness_prior_loss(x).item().abs() < 1e-24);
    }

    #[test]
    fn prior_is_positive_on_checkerboard() {
        let t = Tape::new();
        let x = t.constant(Array::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |i| ((i[2] + i[3]) % 2) as f64));
        assert!(smoothness_prior_loss(x).item() > 0.1);
    }
}
