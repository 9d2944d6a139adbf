use dfcil_autograd::{Array, Conv2dSpec, Var};
use ndarray::IxDyn;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::model::session::{BnBatchStats, BnProbe, Mode, Session};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Trained by gradient descent.
    Param,
    /// Running statistics.
    Buffer,
}

/// Enumerates named tensors. Paths are dotted and stable; checkpoints and
/// optimizer state are keyed by them.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array, TensorKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a, k| {
            if k == TensorKind::Param {
                n += a.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`.
    pub weight: Array,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// He-normal initialization scaled by fan-in.
    pub fn kaiming(out_ch: usize, in_ch: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array::from_shape_simple_fn(IxDyn(&[out_ch, in_ch, k, k]), || normal.sample(rng)),
            spec: Conv2dSpec { stride, padding },
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, path: &str, x: Var<'t>) -> Var<'t> {
        let w = s.param(&join(path, "weight"), &self.weight);
        x.conv2d(w, self.spec)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        f(join(prefix, "weight"), &self.weight, TensorKind::Param);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        f(join(prefix, "weight"), &mut self.weight, TensorKind::Param);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array,
    pub beta: Array,
    pub running_mean: Array,
    pub running_var: Array,
    /// Without affine parameters the layer only standardizes.
    pub affine: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            gamma: Array::ones(IxDyn(&[channels])),
            beta: Array::zeros(IxDyn(&[channels])),
            running_mean: Array::zeros(IxDyn(&[channels])),
            running_var: Array::ones(IxDyn(&[channels])),
            affine,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, path: &str, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let c = shape[1];
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        if s.probing() {
            let mean = x.mean_axes_keepdim(&axes);
            let var = x.sub(mean).square().mean_axes_keepdim(&axes);
            s.push_probe(BnProbe {
                path: path.to_string(),
                mean: mean.reshape(&[c]),
                var: var.reshape(&[c]),
            });
        }
        let tape = s.tape();
        let (gamma, beta) = if self.affine {
            (
                s.param(&join(path, "gamma"), &self.gamma),
                s.param(&join(path, "beta"), &self.beta),
            )
        } else {
            (tape.constant(self.gamma.clone()), tape.constant(self.beta.clone()))
        };
        match s.mode() {
            Mode::Train => {
                let o = x.batch_norm_train(gamma, beta, self.eps);
                s.push_batch_stats(BnBatchStats {
                    path: path.to_string(),
                    mean: o.mean,
                    var: o.var,
                    count: shape.iter().product::<usize>() / c,
                });
                o.out
            }
            Mode::Eval => {
                let mut bshape = vec![1; shape.len()];
                bshape[1] = c;
                let inv = tape.constant(self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt()));
                let scale = gamma.mul(inv);
                let shift = beta.sub(scale.mul(tape.constant(self.running_mean.clone())));
                x.mul(scale.reshape(&bshape)).add(shift.reshape(&bshape))
            }
        }
    }

    /// Folds batch moments into the running estimates. The running variance
    /// uses the unbiased batch variance.
    pub fn absorb(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (i, (rm, rv)) in self
            .running_mean
            .iter_mut()
            .zip(self.running_var.iter_mut())
            .enumerate()
        {
            *rm = (1.0 - m) * *rm + m * stats.mean[i];
            *rv = (1.0 - m) * *rv + m * stats.var[i] * correction;
        }
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        if self.affine {
            f(join(prefix, "gamma"), &self.gamma, TensorKind::Param);
            f(join(prefix, "beta"), &self.beta, TensorKind::Param);
        }
        f(join(prefix, "running_mean"), &self.running_mean, TensorKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, TensorKind::Buffer);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        if self.affine {
            f(join(prefix, "gamma"), &mut self.gamma, TensorKind::Param);
            f(join(prefix, "beta"), &mut self.beta, TensorKind::Param);
        }
        f(join(prefix, "running_mean"), &mut self.running_mean, TensorKind::Buffer);
        f(join(prefix, "running_var"), &mut self.running_var, TensorKind::Buffer);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`.
    pub weight: Array,
    /// `[out]`.
    pub bias: Array,
}

impl Linear {
    /// Uniform in `±1/sqrt(fan_in)` with zero bias.
    pub fn fan_in_uniform(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array::from_shape_simple_fn(IxDyn(&[input, output]), || rng.random_range(-bound..bound)),
            bias: Array::zeros(IxDyn(&[output])),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, path: &str, x: Var<'t>) -> Var<'t> {
        let w = s.param(&join(path, "weight"), &self.weight);
        let b = s.param(&join(path, "bias"), &self.bias);
        x.matmul(w).add(b.reshape(&[1, self.bias.len()]))
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        f(join(prefix, "weight"), &self.weight, TensorKind::Param);
        f(join(prefix, "bias"), &self.bias, TensorKind::Param);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        f(join(prefix, "weight"), &mut self.weight, TensorKind::Param);
        f(join(prefix, "bias"), &mut self.bias, TensorKind::Param);
    }
}

/// Global average pool `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<'t>(x: Var<'t>) -> Var<'t> {
    let s = x.shape();
    x.mean_axes_keepdim(&[2, 3]).reshape(&[s[0], s[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfcil_autograd::Tape;

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let mut bn = BatchNorm::new(2, true);
        bn.running_mean = Array::from_shape_vec(IxDyn(&[2]), vec![1.0, -1.0]).unwrap();
        bn.running_var = Array::from_shape_vec(IxDyn(&[2]), vec![4.0, 1.0]).unwrap();
        bn.eps = 0.0;
        let tape = Tape::new();
        let s = Session::frozen(&tape);
        let x = tape.constant(Array::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![3.0, 0.0]).unwrap());
        let y = bn.forward(&s, "bn", x).value();
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
    }

    #[test]
    fn absorb_applies_momentum_and_unbiased_variance() {
        let mut bn = BatchNorm::new(1, true);
        bn.absorb(&BnBatchStats {
            path: "bn".into(),
            mean: ndarray::arr1(&[2.0]),
            var: ndarray::arr1(&[1.0]),
            count: 4,
        });
        assert!((bn.running_mean[[0]] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[[0]] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-15);
    }
}
