use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{invalid, Error, Result};
use crate::seed::Rng;

/// Image geometry. Pixel batches are laid out channel-first:
/// `[count, channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine pixel normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Inverse map back to raw pixel values.
    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Random horizontal flip plus random crop from a zero-padded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    pub flip: bool,
    pub crop_padding: usize,
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            flip: false,
            crop_padding: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_padding == 0
    }

    /// Applies the augmentation in place to an NCHW batch.
    pub fn apply(&self, batch: &mut Array4<f64>, rng: &mut Rng) {
        if self.is_identity() {
            return;
        }
        let (n, c, h, w) = batch.dim();
        let p = self.crop_padding as i64;
        for i in 0..n {
            let flip = self.flip && rng.random_bool(0.5);
            let (dy, dx) = if p > 0 {
                (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize)
            } else {
                (0, 0)
            };
            let src = batch.index_axis(ndarray::Axis(0), i).to_owned();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx0 = x as isize + dx;
                        let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                        let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                        batch[[i, ch, y, x]] = if inside {
                            src[[ch, sy as usize, sx as usize]]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Storage {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    dims: ImageDims,
    num_classes: usize,
    split: Split,
}

/// An immutable labelled image set, or a filtered view of one.
///
/// Pixels are kept once in shared storage; subsets only hold indices. The
/// normalizer is applied when batches are gathered.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    storage: Arc<Storage>,
    indices: Vec<usize>,
    normalizer: Option<Normalizer>,
}

impl LabeledDataset {
    /// `pixels` holds `labels.len()` images in channel-first order.
    pub fn from_parts(
        pixels: Vec<f32>,
        labels: Vec<usize>,
        dims: ImageDims,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if pixels.len() != labels.len() * dims.pixels() {
            return Err(Error::Shape {
                expected: format!("{} pixels ({} images of {dims:?})", labels.len() * dims.pixels(), labels.len()),
                given: format!("{} pixels", pixels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!("label {bad} >= class count {num_classes}")));
        }
        let indices = (0..labels.len()).collect();
        Ok(Self {
            storage: Arc::new(Storage {
                pixels,
                labels,
                dims,
                num_classes,
                split,
            }),
            indices,
            normalizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dims(&self) -> ImageDims {
        self.storage.dims
    }

    pub fn num_classes(&self) -> usize {
        self.storage.num_classes
    }

    pub fn split(&self) -> Split {
        self.storage.split
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.normalizer.as_ref()
    }

    pub fn label(&self, pos: usize) -> usize {
        self.storage.labels[self.indices[pos]]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.indices.iter().map(|&i| self.storage.labels[i]).collect()
    }

    /// Raw (un-normalized) pixels of the example at `pos`.
    pub fn raw_image(&self, pos: usize) -> &[f32] {
        let p = self.storage.dims.pixels();
        let i = self.indices[pos];
        &self.storage.pixels[i * p..(i + 1) * p]
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.normalizer = Some(normalizer);
        self
    }

    /// Per-channel mean and standard deviation over this view.
    pub fn fit_normalizer(&self) -> Result<Normalizer> {
        if self.is_empty() {
            return Err(invalid("cannot fit a normalizer on an empty dataset"));
        }
        let d = self.dims();
        let plane = d.height * d.width;
        let mut sum = vec![0.0f64; d.channels];
        let mut sq = vec![0.0f64; d.channels];
        for pos in 0..self.len() {
            let img = self.raw_image(pos);
            for c in 0..d.channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Normalizer { mean, std })
    }

    /// Normalized NCHW batch of the examples at `positions`.
    pub fn gather(&self, positions: &[usize]) -> Array4<f64> {
        let d = self.dims();
        let plane = d.height * d.width;
        let mut out = Array4::zeros((positions.len(), d.channels, d.height, d.width));
        let dst = out.as_slice_mut().unwrap();
        for (k, &pos) in positions.iter().enumerate() {
            let img = self.raw_image(pos);
            let row = &mut dst[k * d.pixels()..(k + 1) * d.pixels()];
            for c in 0..d.channels {
                let (m, s) = match &self.normalizer {
                    Some(nz) => (nz.mean[c], nz.std[c]),
                    None => (0.0, 1.0),
                };
                for (o, &v) in row[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .zip(&img[c * plane..(c + 1) * plane])
                {
                    *o = (f64::from(v) - m) / s;
                }
            }
        }
        out
    }

    pub fn gather_labels(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.label(p)).collect()
    }

    pub fn all_images(&self) -> Array4<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.gather(&all)
    }

    /// View restricted to `positions` (relative to this view).
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            storage: Arc::clone(&self.storage),
            indices: positions.iter().map(|&p| self.indices[p]).collect(),
            normalizer: self.normalizer.clone(),
        }
    }

    /// Positions of every example whose label is `class`.
    pub fn positions_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.label(p) == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for p in 0..self.len() {
            counts[self.label(p)] += 1;
        }
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.dims();
        let mut c = Container::new(serde_json::json!({
            "format": "dfcil-dataset",
            "version": 1,
            "dims": d,
            "num_classes": self.num_classes(),
            "split": self.split(),
        }));
        let mut px = Vec::with_capacity(self.len() * d.pixels());
        for p in 0..self.len() {
            px.extend(self.raw_image(p).iter().map(|&v| f64::from(v)));
        }
        c.push(
            "images",
            ArrayD::from_shape_vec(IxDyn(&[self.len(), d.channels, d.height, d.width]), px)
                .unwrap(),
        );
        c.push(
            "labels",
            ArrayD::from_shape_vec(
                IxDyn(&[self.len()]),
                self.labels().iter().map(|&l| l as f64).collect(),
            )
            .unwrap(),
        );
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let dims: ImageDims = serde_json::from_value(c.meta["dims"].clone())?;
        let num_classes = c.meta["num_classes"]
            .as_u64()
            .ok_or_else(|| bad("missing num_classes"))? as usize;
        let split: Split = serde_json::from_value(c.meta["split"].clone())?;
        let images = c.take("images").ok_or_else(|| bad("missing images"))?;
        let labels = c.take("labels").ok_or_else(|| bad("missing labels"))?;
        Self::from_parts(
            images.iter().map(|&v| v as f32).collect(),
            labels.iter().map(|&v| v as usize).collect(),
            dims,
            num_classes,
            split,
        )
    }
}

/// Examples of `dataset` whose labels lie in `classes`, in dataset order.
pub fn task_subset(dataset: &LabeledDataset, classes: &[usize]) -> Result<LabeledDataset> {
    if classes.is_empty() {
        return Err(invalid("task_subset needs at least one class"));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= dataset.num_classes()) {
        return Err(invalid(format!(
            "class {c} outside [0, {})",
            dataset.num_classes()
        )));
    }
    let set: BTreeSet<usize> = classes.iter().copied().collect();
    let positions: Vec<usize> = (0..dataset.len())
        .filter(|&p| set.contains(&dataset.label(p)))
        .collect();
    Ok(dataset.select(&positions))
}
