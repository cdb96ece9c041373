//! Named f32 tensors stored as a JSON index beside a raw little-endian blob.
//!
//! The index maps each tensor name to `{shape, dtype, offset, length}` with
//! `offset` and `length` in bytes into the blob. Tensors are row-major.
//! Model checkpoints use the same format.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightManifest {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

/// `<base>.json` and `<base>.bin`.
pub fn manifest_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

impl WeightManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Load {
                tensor: name,
                message: format!("{} values for shape {shape:?}", data.len()),
            });
        }
        self.tensors.insert(name, (shape.to_vec(), data));
        Ok(())
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let data = t.to_f64_vec().into_iter().map(|v| v as f32).collect();
        self.insert(name, t.shape(), data)
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.get(name).map(|(s, _)| s)
    }

    /// The values of `name`, which must exist with exactly `shape`.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let (found, data) = self.get(name).ok_or_else(|| Error::Load {
            tensor: name.to_string(),
            message: "missing from manifest".into(),
        })?;
        if found != shape {
            return Err(Error::Load {
                tensor: name.to_string(),
                message: format!("shape {found:?}, expected {shape:?}"),
            });
        }
        Ok(data)
    }

    /// Copies `name` into an existing tensor of matching shape.
    pub fn load_into<T: Scalar>(&self, name: &str, target: &Tensor<T>) -> Result<()> {
        let data = self.require(name, target.shape())?;
        let mut dst = target.data_mut();
        for (d, &v) in dst.iter_mut().zip(data) {
            *d = T::c(f64::from(v));
        }
        Ok(())
    }

    pub fn index(&self) -> BTreeMap<String, ManifestEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, (shape, data))| {
                let length = data.len() * 4;
                let entry = ManifestEntry {
                    shape: shape.clone(),
                    dtype: "f32".into(),
                    offset,
                    length,
                };
                offset += length;
                (name.clone(), entry)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .values()
            .flat_map(|(_, d)| d.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn write(&self, index_path: &Path, blob_path: &Path) -> Result<()> {
        let index = serde_json::to_string_pretty(&self.index())?;
        std::fs::write(index_path, index).map_err(|e| Error::io(index_path, e))?;
        std::fs::write(blob_path, self.to_bytes()).map_err(|e| Error::io(blob_path, e))
    }

    pub fn read(index_path: &Path, blob_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
        let index: BTreeMap<String, ManifestEntry> = serde_json::from_str(&text)?;
        let blob = std::fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
        Self::from_parts(index, &blob)
    }

    /// Validates an index against its blob: f32 only, sizes match shapes,
    /// ranges inside the blob and pairwise disjoint.
    pub fn from_parts(index: BTreeMap<String, ManifestEntry>, blob: &[u8]) -> Result<Self> {
        let mut ranges: Vec<(usize, usize, &str)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, e) in &index {
            let load_err = |message: String| Error::Load {
                tensor: name.clone(),
                message,
            };
            if e.dtype != "f32" {
                return Err(load_err(format!("unsupported dtype {}", e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != numel * 4 {
                return Err(load_err(format!("length {} bytes for shape {:?}", e.length, e.shape)));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| load_err(format!("range {}+{} outside {}-byte blob", e.offset, e.length, blob.len())))?;
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ranges.push((e.offset, end, name));
            tensors.insert(name.clone(), (e.shape.clone(), data));
        }
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Load {
                    tensor: w[1].2.to_string(),
                    message: format!("overlaps {}", w[0].2),
                });
            }
        }
        Ok(WeightManifest { tensors })
    }
}
