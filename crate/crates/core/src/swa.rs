//! Checkpoint archives and uniform weight averaging.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! b"SWA1"                      magic
//! u64                          header length N in bytes
//! N bytes                      UTF-8 JSON: [{"name", "shape", "offset", "length"}, ...]
//! payload                      f32 data; offset and length are byte counts
//!                              relative to the start of the payload
//! ```
//!
//! The writer lays tensors out contiguously in archive order, so the same
//! archive always serializes to the same bytes.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{write_atomic, IoError};

pub const MAGIC: &[u8; 4] = b"SWA1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("tensor {name:?}: {detail}")]
    Length { name: String, detail: String },
    #[error("tensor {name:?}: non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: invalid shape {shape:?}")]
    Shape { name: String, shape: Vec<usize> },
    #[error("nothing to average")]
    Empty,
    #[error("archive {index} has a different set of tensors; only in one side: {names:?}")]
    NameMismatch { index: usize, names: Vec<String> },
    #[error("tensor {name:?}: shape {expected:?} in archive 0 but {got:?} in archive {index}")]
    ShapeMismatch {
        name: String,
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

impl ArchiveError {
    /// Whether the error is about the archive contents being unusable together
    /// (as opposed to a file that could not be read or decoded).
    pub fn is_mismatch(&self) -> bool {
        matches!(
            self,
            ArchiveError::Empty | ArchiveError::NameMismatch { .. } | ArchiveError::ShapeMismatch { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// An empty `shape` is a scalar holding one element.
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ArchiveError> {
        let expected = element_count(name, &shape)?;
        if data.len() != expected {
            return Err(ArchiveError::Length {
                name: name.to_owned(),
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(ArchiveError::NonFinite {
                name: name.to_owned(),
                index,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

fn element_count(name: &str, shape: &[usize]) -> Result<usize, ArchiveError> {
    let bad = || ArchiveError::Shape {
        name: name.to_owned(),
        shape: shape.to_vec(),
    };
    if shape.contains(&0) {
        return Err(bad());
    }
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(bad)
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: IndexMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ArchiveError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ArchiveError::DuplicateName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            let length = 4 * t.data.len() as u64;
            header.push(HeaderEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                length,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.entries.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(ArchiveError::Header("missing SWA1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let header_end = 12u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| ArchiveError::Header(format!("header length {header_len} exceeds file size")))?
            as usize;
        let header: Vec<HeaderEntry> = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| ArchiveError::Header(e.to_string()))?;
        let payload = &bytes[header_end..];
        let mut archive = TensorArchive::new();
        for h in header {
            let count = element_count(&h.name, &h.shape)?;
            if h.length != 4 * count as u64 {
                return Err(ArchiveError::Length {
                    name: h.name,
                    detail: format!("shape {:?} needs {} bytes, header says {}", h.shape, 4 * count, h.length),
                });
            }
            let end = h.offset.checked_add(h.length).filter(|&e| e <= payload.len() as u64);
            let Some(end) = end else {
                return Err(ArchiveError::Length {
                    name: h.name,
                    detail: format!(
                        "bytes {}..{} lie beyond the {}-byte payload",
                        h.offset,
                        h.offset.saturating_add(h.length),
                        payload.len()
                    ),
                });
            };
            let data: Vec<f32> = payload[h.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(&h.name, h.shape, data)?;
            archive.insert(h.name, tensor)?;
        }
        Ok(archive)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

pub fn read_archive(path: &Path) -> Result<TensorArchive, ArchiveError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    TensorArchive::from_bytes(&bytes)
}

pub fn write_archive(archive: &TensorArchive, path: &Path) -> Result<(), ArchiveError> {
    write_atomic(path, &archive.to_bytes())?;
    Ok(())
}

/// Elementwise mean of archives with identical tensor names and shapes.
///
/// Sums are accumulated in `f64` and rounded to `f32` once at the end, so the
/// result does not depend on archive order and averaging identical archives
/// returns them unchanged. Output order follows the first archive.
pub fn average_archives(archives: &[TensorArchive]) -> Result<TensorArchive, ArchiveError> {
    let first = archives.first().ok_or(ArchiveError::Empty)?;
    for (index, a) in archives.iter().enumerate().skip(1) {
        let mut only: Vec<String> = first
            .entries
            .keys()
            .filter(|k| !a.entries.contains_key(*k))
            .chain(a.entries.keys().filter(|k| !first.entries.contains_key(*k)))
            .cloned()
            .collect();
        if !only.is_empty() {
            only.sort();
            return Err(ArchiveError::NameMismatch { index, names: only });
        }
        for (name, t) in &first.entries {
            let other = &a.entries[name];
            if other.shape != t.shape {
                return Err(ArchiveError::ShapeMismatch {
                    name: name.clone(),
                    index,
                    expected: t.shape.clone(),
                    got: other.shape.clone(),
                });
            }
        }
    }
    let k = archives.len() as f64;
    let averaged: Vec<(String, Tensor)> = first
        .entries
        .par_iter()
        .map(|(name, t)| {
            let mut acc = vec![0.0f64; t.data.len()];
            for a in archives {
                for (s, v) in acc.iter_mut().zip(&a.entries[name].data) {
                    *s += *v as f64;
                }
            }
            let data = acc.into_iter().map(|s| (s / k) as f32).collect();
            (
                name.clone(),
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            )
        })
        .collect();
    Ok(TensorArchive {
        entries: averaged.into_iter().collect(),
    })
}
