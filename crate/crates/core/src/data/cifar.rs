//! CIFAR-100 in its native binary layout: each record is a coarse label
//! byte, a fine label byte, then 3072 channel-major pixel bytes.

use std::path::{Path, PathBuf};

use crate::data::dataset::{ImageDims, LabeledDataset, Split};
use crate::error::{Error, Result};

pub const CIFAR100_CLASSES: usize = 100;
const RECORD: usize = 2 + 3072;

/// Environment variable consulted when no data root is configured.
pub const DATA_ROOT_ENV: &str = "DFCIL_DATA_ROOT";

pub fn resolve_data_root(configured: Option<&Path>) -> Option<PathBuf> {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

fn locate(root: &Path, split: Split) -> PathBuf {
    let name = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let nested = root.join("cifar-100-binary").join(name);
    if nested.exists() {
        nested
    } else {
        root.join(name)
    }
}

pub fn parse_cifar100(bytes: &[u8], split: Split, origin: &str) -> Result<LabeledDataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Format {
            path: origin.to_string(),
            reason: format!("size {} is not a positive multiple of {RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(usize::from(rec[1]));
        pixels.extend(rec[2..].iter().map(|&b| f32::from(b) / 255.0));
    }
    LabeledDataset::from_parts(pixels, labels, ImageDims::new(3, 32, 32), CIFAR100_CLASSES, split)
}

pub fn load_cifar100(root: &Path, split: Split) -> Result<LabeledDataset> {
    let path = locate(root, split);
    let bytes = std::fs::read(&path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: format!("cannot read CIFAR-100 archive: {e}"),
    })?;
    parse_cifar100(&bytes, split, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fine_labels_and_scales_pixels() {
        let mut bytes = vec![0u8; 2 * RECORD];
        bytes[1] = 42;
        bytes[2] = 255;
        bytes[RECORD] = 3;
        bytes[RECORD + 1] = 99;
        let ds = parse_cifar100(&bytes, Split::Test, "mem").unwrap();
        assert_eq!(ds.labels(), vec![42, 99]);
        assert_eq!(ds.raw_image(0)[0], 1.0);
        assert_eq!(ds.dims(), ImageDims::new(3, 32, 32));
    }

    #[test]
    fn rejects_truncated_archive() {
        assert!(parse_cifar100(&[0u8; 100], Split::Train, "mem").is_err());
    }
}
