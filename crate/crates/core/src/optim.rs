//! First-order optimizers keyed by parameter path.
//!
//! Parameters that received no gradient in a step are skipped entirely: no
//! weight decay, no momentum update.

use std::collections::{BTreeMap, HashMap};

use dfcil_autograd::Array;

use crate::model::{Module, TensorKind};

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Array>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &BTreeMap<String, Array>, lr: f64) {
        module.visit_mut("", &mut |path, p, kind| {
            if kind != TensorKind::Param {
                return;
            }
            let Some(g) = grads.get(&path) else { return };
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                d.scaled_add(self.weight_decay, p);
            }
            let v = self
                .velocity
                .entry(path)
                .and_modify(|v| {
                    *v *= self.momentum;
                    *v += &d;
                })
                .or_insert(d);
            p.scaled_add(-lr, v);
        });
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, (Array, Array, i32)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn update(&mut self, path: &str, p: &mut Array, g: &Array) {
        let (b1, b2) = (self.beta1, self.beta2);
        let (m, v, t) = self
            .state
            .entry(path.to_string())
            .or_insert_with(|| (Array::zeros(g.raw_dim()), Array::zeros(g.raw_dim()), 0));
        *t += 1;
        m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(*t);
        let c2 = 1.0 - b2.powi(*t);
        let (lr, eps) = (self.lr, self.eps);
        ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        });
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &BTreeMap<String, Array>) {
        module.visit_mut("", &mut |path, p, kind| {
            if kind == TensorKind::Param {
                if let Some(g) = grads.get(&path) {
                    self.update(&path, p, g);
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    struct One(Array);
    impl Module for One {
        fn visit(&self, _: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
            f("w".into(), &self.0, TensorKind::Param);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
            f("w".into(), &mut self.0, TensorKind::Param);
        }
    }

    fn grads(v: f64) -> BTreeMap<String, Array> {
        BTreeMap::from([("w".to_string(), Array::from_elem(IxDyn(&[1]), v))])
    }

    #[test]
    fn sgd_momentum_matches_hand_recurrence() {
        let mut m = One(Array::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut m, &grads(1.0), 0.5);
        // d = 1 + 0.1*1 = 1.1, v = 1.1, w = 1 - 0.55
        assert!((m.0[[0]] - 0.45).abs() < 1e-15);
        opt.step(&mut m, &grads(1.0), 0.5);
        // d = 1.045, v = 0.99 + 1.045 = 2.035, w = 0.45 - 1.0175
        assert!((m.0[[0]] - (0.45 - 1.0175)).abs() < 1e-12);
        opt.step(&mut m, &BTreeMap::new(), 0.5);
        assert!((m.0[[0]] - (0.45 - 1.0175)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut m = One(Array::from_elem(IxDyn(&[1]), 0.0));
        let mut opt = Adam::new(1e-3);
        opt.step(&mut m, &grads(-7.0));
        assert!((m.0[[0]] - 1e-3).abs() < 1e-9);
    }
}
