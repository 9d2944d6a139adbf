//! Self-describing array container used for checkpoints, coresets and toy
//! datasets.
//!
//! Layout: the magic bytes `DFCA\x01\n`, a little-endian `u64` header length,
//! a JSON header `{ "meta": ..., "arrays": [{name, shape, offset}] }`, then
//! every array as contiguous little-endian `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"DFCA\x01\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.arrays.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn take(&mut self, name: &str) -> Option<ArrayD<f64>> {
        let pos = self.arrays.iter().position(|(n, _)| n == name)?;
        Some(self.arrays.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let e = Entry {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                    offset,
                };
                offset += 8 * a.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(14 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, a) in &self.arrays {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 14 || &bytes[..6] != MAGIC {
            return Err(bad("missing container magic"));
        }
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let body_start = 14 + hlen;
        if bytes.len() < body_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[14..body_start])?;
        let body = &bytes[body_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > body.len() {
                return Err(bad(&format!("array {} runs past end of file", e.name)));
            }
            let data: Vec<f64> = body[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let a = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
                .map_err(|err| bad(&err.to_string()))?;
            arrays.push((e.name, a));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| crate::error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_arrays_and_meta() {
        let mut c = Container::new(json!({"kind": "test", "n": 3}));
        c.push("a", ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f64 * 0.1));
        c.push("empty", ArrayD::zeros(IxDyn(&[0])));
        c.push("scalar", ArrayD::from_elem(IxDyn(&[]), -2.5));
        let back = Container::from_bytes(&c.to_bytes().unwrap(), "mem").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(Container::from_bytes(b"not a container at all", "mem").is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/file.bin");
        write_atomic(&path, b"hello").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"hello");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }
}
