use std::sync::Arc;

use ndarray::{Array1, Array2, Array4};

use crate::error::{invalid, Error, Result};
use crate::model::classifier::IncrementalClassifier;

/// A frozen copy of the classifier taken at a task boundary. There is no
/// way to obtain a mutable reference to the wrapped model.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    model: Arc<IncrementalClassifier>,
    task: usize,
}

impl ModelSnapshot {
    /// Deep copy of `model` as it stands after task `task`.
    pub fn capture(model: &IncrementalClassifier, task: usize) -> Self {
        Self {
            model: Arc::new(model.clone()),
            task,
        }
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn model(&self) -> &IncrementalClassifier {
        &self.model
    }

    pub fn classes(&self) -> Vec<usize> {
        self.model.registry()
    }

    /// Tempered teacher softmax over its own classes, zero-extended to
    /// `total_classes` columns.
    pub fn padded_probs(&self, x: &Array4<f64>, total_classes: usize, temperature: f64) -> Result<Array2<f64>> {
        let logits = self.model.predict_logits(x, &self.classes())?;
        padded_softmax(&logits, total_classes, temperature)
    }
}

/// Row softmax of `logits / temperature`, padded with exact zeros.
pub fn padded_softmax(logits: &Array2<f64>, total_classes: usize, temperature: f64) -> Result<Array2<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let (b, k) = logits.dim();
    if total_classes < k {
        return Err(invalid(format!(
            "total_classes {total_classes} is below the teacher's {k} classes"
        )));
    }
    let mut out = Array2::zeros((b, total_classes));
    for (row, src) in out.rows_mut().into_iter().zip(logits.rows()) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = src.iter().map(|&v| ((v - m) / temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut row = row;
        for (j, v) in e.into_iter().enumerate() {
            row[j] = v / z;
        }
    }
    Ok(out)
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub path: String,
    pub mean: Array1<f64>,
    /// `sqrt(running_var)`.
    pub std: Array1<f64>,
}

/// Every batch-norm layer's running statistics, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub layers: Vec<LayerStats>,
}

impl BatchNormStats {
    pub fn extract(model: &IncrementalClassifier) -> Result<Self> {
        let layers: Vec<LayerStats> = model
            .bn_layers()
            .into_iter()
            .map(|(path, bn)| LayerStats {
                path,
                mean: bn.running_mean.iter().copied().collect(),
                std: bn.running_var.iter().map(|v| v.sqrt()).collect(),
            })
            .collect();
        if layers.is_empty() {
            return Err(Error::NoNormalizationLayers);
        }
        Ok(Self { layers })
    }

    pub fn of_snapshot(snapshot: &ModelSnapshot) -> Result<Self> {
        Self::extract(snapshot.model())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageDims;
    use crate::model::Architecture;
    use ndarray::array;

    #[test]
    fn padding_appends_exact_zeros() {
        let p = padded_softmax(&array![[1.0, 2.0, 3.0]], 6, 2.0).unwrap();
        assert_eq!(p.row(0).iter().skip(3).copied().collect::<Vec<_>>(), vec![0.0; 3]);
        assert!((p.sum() - 1.0).abs() < 1e-15);
        let plain = padded_softmax(&array![[1.0, 2.0, 3.0]], 3, 2.0).unwrap();
        assert_eq!(plain.row(0), p.row(0).slice(ndarray::s![..3]));
    }

    #[test]
    fn huge_temperature_flattens_old_classes() {
        let p = padded_softmax(&array![[5.0, -3.0, 0.0, 9.0]], 8, 1e6).unwrap();
        for j in 0..4 {
            assert!((p[[0, j]] - 0.25).abs() < 1e-5);
        }
        assert!(p.row(0).iter().skip(4).all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_temperature_and_width() {
        assert!(padded_softmax(&array![[0.0, 1.0]], 2, 0.0).is_err());
        assert!(padded_softmax(&array![[0.0, 1.0]], 1, 1.0).is_err());
    }

    #[test]
    fn fresh_model_has_unit_stats() {
        let m = IncrementalClassifier::new(Architecture::Convnet4 { width: 2 }, ImageDims::new(3, 8, 8), 0);
        let s = BatchNormStats::extract(&m).unwrap();
        assert_eq!(s.len(), 4);
        for l in &s.layers {
            assert!(l.mean.iter().all(|&v| v == 0.0));
            assert!(l.std.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn snapshot_matches_live_model() {
        let mut m = IncrementalClassifier::new(Architecture::Convnet4 { width: 2 }, ImageDims::new(3, 8, 8), 0);
        m.grow_heads(&[0, 1], 0).unwrap();
        let snap = ModelSnapshot::capture(&m, 0);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(a, b, c, d)| (a + b * c) as f64 - d as f64 * 0.3);
        assert_eq!(snap.model().embed(&x).unwrap(), m.embed(&x).unwrap());
    }
}
