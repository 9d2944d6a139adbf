//! Seeded Gaussian-blob image classes for desk-scale runs.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::dataset::{ImageDims, LabeledDataset, Split};
use crate::error::{invalid, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Blobs per class prototype.
    pub blobs: usize,
    /// Per-pixel Gaussian noise std.
    pub noise: f64,
    /// Maximum translation in pixels, each axis.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            image_size: 16,
            channels: 3,
            train_per_class: 200,
            test_per_class: 50,
            blobs: 3,
            noise: 0.5,
            max_shift: 2,
            seed: 0,
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    color: Vec<f64>,
}

fn prototypes(spec: &ToySpec) -> Vec<Vec<Blob>> {
    let s = spec.image_size as f64;
    (0..spec.num_classes)
        .map(|c| {
            let mut rng = seed::derived_rng(spec.seed, "toy-prototype", &[c as u64]);
            (0..spec.blobs)
                .map(|_| Blob {
                    cy: rng.random_range(0.2 * s..0.8 * s),
                    cx: rng.random_range(0.2 * s..0.8 * s),
                    radius: rng.random_range(0.08 * s..0.22 * s),
                    color: (0..spec.channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect()
        })
        .collect()
}

fn render(spec: &ToySpec, blobs: &[Blob], rng: &mut seed::Rng, out: &mut Vec<f32>) {
    let s = spec.image_size;
    let m = spec.max_shift as i64;
    let dy = rng.random_range(-m..=m) as f64;
    let dx = rng.random_range(-m..=m) as f64;
    let contrast = rng.random_range(0.7..1.3);
    let noise = Normal::new(0.0, spec.noise).expect("noise std is finite");
    for ch in 0..spec.channels {
        for y in 0..s {
            for x in 0..s {
                let mut v = 0.5;
                for b in blobs {
                    let d2 = (y as f64 - b.cy - dy).powi(2) + (x as f64 - b.cx - dx).powi(2);
                    v += 0.5 * contrast * b.color[ch] * (-d2 / (2.0 * b.radius * b.radius)).exp();
                }
                out.push((v + noise.sample(rng)) as f32);
            }
        }
    }
}

/// Builds the (train, test) pair. Both splits come from disjoint random
/// streams, so no example is shared.
pub fn generate(spec: &ToySpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.num_classes == 0 || spec.image_size == 0 || spec.channels == 0 || spec.blobs == 0 {
        return Err(invalid("toy dataset dimensions must be positive"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(invalid(format!("toy noise must be finite and >= 0, got {}", spec.noise)));
    }
    let protos = prototypes(spec);
    let dims = ImageDims::new(spec.channels, spec.image_size, spec.image_size);
    let make = |split: Split, per_class: usize| {
        let tag = match split {
            Split::Train => "toy-train",
            Split::Test => "toy-test",
        };
        let mut pixels = Vec::with_capacity(spec.num_classes * per_class * dims.pixels());
        let mut labels = Vec::with_capacity(spec.num_classes * per_class);
        for (c, blobs) in protos.iter().enumerate() {
            let mut rng = seed::derived_rng(spec.seed, tag, &[c as u64]);
            for _ in 0..per_class {
                render(spec, blobs, &mut rng, &mut pixels);
                labels.push(c);
            }
        }
        LabeledDataset::from_parts(pixels, labels, dims, spec.num_classes, split)
    };
    Ok((
        make(Split::Train, spec.train_per_class)?,
        make(Split::Test, spec.test_per_class)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let spec = ToySpec {
            num_classes: 4,
            train_per_class: 5,
            test_per_class: 2,
            ..ToySpec::default()
        };
        let (tr, te) = generate(&spec).unwrap();
        assert_eq!(tr.len(), 20);
        assert_eq!(te.len(), 8);
        assert_eq!(tr.class_counts(), vec![5; 4]);
        let (tr2, _) = generate(&spec).unwrap();
        assert_eq!(tr.all_images(), tr2.all_images());
        assert!(tr.all_images().iter().all(|v| v.is_finite()));
        assert_ne!(tr.raw_image(0), te.raw_image(0));
    }
}
