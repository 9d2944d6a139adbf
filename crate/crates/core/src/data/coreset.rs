use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::seq::{index, SliceRandom};

use crate::container::Container;
use crate::data::dataset::{ImageDims, LabeledDataset, Normalizer, Split};
use crate::error::{config, invalid, Error, Result};
use crate::seed;

/// Class-balanced exemplar memory for the replay baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetStore {
    capacity: usize,
    dims: Option<ImageDims>,
    /// Raw pixels per stored example, grouped by class.
    entries: BTreeMap<usize, Vec<Vec<f32>>>,
}

impl CoresetStore {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(config("coreset capacity must be positive"));
        }
        Ok(Self {
            capacity,
            dims: None,
            entries: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.entries.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Per-class quota for `num_classes` seen classes; the first
    /// `capacity % num_classes` classes (ascending id) get one extra slot.
    fn quotas(&self, classes: &[usize]) -> BTreeMap<usize, usize> {
        let k = classes.len();
        let (base, extra) = (self.capacity / k, self.capacity % k);
        classes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, base + usize::from(i < extra)))
            .collect()
    }

    /// Folds a completed task into the store: shrinks old classes to the new
    /// quota and samples the task's classes uniformly at random.
    pub fn update(&mut self, task_data: &LabeledDataset, seed: u64) -> Result<()> {
        if task_data.is_empty() {
            return Err(invalid("coreset update with an empty task"));
        }
        match self.dims {
            Some(d) if d != task_data.dims() => {
                return Err(Error::Shape {
                    expected: format!("{d:?}"),
                    given: format!("{:?}", task_data.dims()),
                })
            }
            _ => self.dims = Some(task_data.dims()),
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for p in 0..task_data.len() {
            by_class.entry(task_data.label(p)).or_default().push(p);
        }
        if let Some(c) = by_class.keys().find(|c| self.entries.contains_key(c)) {
            return Err(invalid(format!("class {c} is already in the coreset")));
        }
        let mut seen: Vec<usize> = self.entries.keys().chain(by_class.keys()).copied().collect();
        seen.sort_unstable();
        let quotas = self.quotas(&seen);

        for (&class, items) in self.entries.iter_mut() {
            let q = quotas[&class];
            if items.len() > q {
                let mut rng = seed::derived_rng(seed, "coreset-shrink", &[class as u64]);
                items.shuffle(&mut rng);
                items.truncate(q);
            }
        }
        for (class, positions) in by_class {
            let q = quotas[&class].min(positions.len());
            let mut rng = seed::derived_rng(seed, "coreset-sample", &[class as u64]);
            let mut picked = index::sample(&mut rng, positions.len(), q).into_vec();
            picked.sort_unstable();
            let images = picked
                .into_iter()
                .map(|i| task_data.raw_image(positions[i]).to_vec())
                .collect();
            self.entries.insert(class, images);
        }
        Ok(())
    }

    /// Stored exemplars as a dataset view with the given normalization.
    pub fn as_dataset(&self, num_classes: usize, normalizer: Option<Normalizer>) -> Result<LabeledDataset> {
        let dims = self.dims.ok_or_else(|| invalid("coreset is empty"))?;
        let mut pixels = Vec::with_capacity(self.len() * dims.pixels());
        let mut labels = Vec::with_capacity(self.len());
        for (&c, items) in &self.entries {
            for img in items {
                pixels.extend_from_slice(img);
                labels.push(c);
            }
        }
        let ds = LabeledDataset::from_parts(pixels, labels, dims, num_classes, Split::Train)?;
        Ok(match normalizer {
            Some(n) => ds.with_normalizer(n),
            None => ds,
        })
    }

    /// Writes the exemplars as one image array plus a label index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(serde_json::json!({
            "format": "dfcil-coreset",
            "version": 1,
            "capacity": self.capacity,
            "dims": self.dims,
        }));
        if let Some(d) = self.dims {
            let mut px = Vec::with_capacity(self.len() * d.pixels());
            let mut labels = Vec::with_capacity(self.len());
            for (&cls, items) in &self.entries {
                for img in items {
                    px.extend(img.iter().map(|&v| f64::from(v)));
                    labels.push(cls as f64);
                }
            }
            c.push(
                "images",
                ArrayD::from_shape_vec(IxDyn(&[labels.len(), d.channels, d.height, d.width]), px)
                    .unwrap(),
            );
            c.push("labels", ArrayD::from_shape_vec(IxDyn(&[labels.len()]), labels).unwrap());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let capacity = c.meta["capacity"].as_u64().ok_or_else(|| bad("missing capacity"))? as usize;
        let dims: Option<ImageDims> = serde_json::from_value(c.meta["dims"].clone())?;
        let mut store = Self::new(capacity)?;
        store.dims = dims;
        if let Some(d) = dims {
            let images = c.take("images").ok_or_else(|| bad("missing images"))?;
            let labels = c.take("labels").ok_or_else(|| bad("missing labels"))?;
            let flat: Vec<f32> = images.iter().map(|&v| v as f32).collect();
            for (i, &l) in labels.iter().enumerate() {
                let img = flat[i * d.pixels()..(i + 1) * d.pixels()].to_vec();
                store.entries.entry(l as usize).or_default().push(img);
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn task(classes: &[usize], per_class: usize) -> LabeledDataset {
        let dims = ImageDims::new(1, 1, 2);
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for &c in classes {
            for i in 0..per_class {
                px.extend([c as f32, i as f32]);
                labels.push(c);
            }
        }
        LabeledDataset::from_parts(px, labels, dims, 100, Split::Train).unwrap()
    }

    #[test]
    fn quota_follows_seen_class_count() {
        let mut s = CoresetStore::new(2000).unwrap();
        s.update(&task(&(0..10).collect::<Vec<_>>(), 500), 1).unwrap();
        assert!(s.class_counts().values().all(|&n| n == 200));
        for t in 1..10 {
            let cls: Vec<usize> = (t * 10..t * 10 + 10).collect();
            s.update(&task(&cls, 500), 1).unwrap();
        }
        assert_eq!(s.class_counts().len(), 100);
        assert!(s.class_counts().values().all(|&n| n == 20));
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(CoresetStore::new(0).is_err());
    }

    #[test]
    fn exemplars_come_from_their_class() {
        let mut s = CoresetStore::new(6).unwrap();
        s.update(&task(&[3, 4], 10), 5).unwrap();
        let ds = s.as_dataset(100, None).unwrap();
        for p in 0..ds.len() {
            assert_eq!(ds.raw_image(p)[0] as usize, ds.label(p));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coreset.dfca");
        let mut s = CoresetStore::new(7).unwrap();
        s.update(&task(&[1, 2, 3], 4), 2).unwrap();
        s.save(&path).unwrap();
        let back = CoresetStore::load(&path).unwrap();
        assert_eq!(back.class_counts(), s.class_counts());
        assert_eq!(back.len(), 7);
    }

    proptest! {
        #[test]
        fn size_balance_and_legality(cap in 1usize..60, per_task in 1usize..5, tasks in 1usize..5, seed in any::<u64>()) {
            let mut s = CoresetStore::new(cap).unwrap();
            for t in 0..tasks {
                let cls: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
                s.update(&task(&cls, 30), seed).unwrap();
                prop_assert!(s.len() <= cap);
                let counts: Vec<usize> = s.class_counts().values().copied().collect();
                let nonzero: Vec<usize> = counts.iter().copied().filter(|&n| n > 0).collect();
                if !nonzero.is_empty() {
                    let max = *counts.iter().max().unwrap();
                    let min = *counts.iter().min().unwrap();
                    prop_assert!(max - min <= 1);
                }
                prop_assert!(s.classes().iter().all(|&c| c < (t + 1) * per_task));
            }
        }
    }
}
