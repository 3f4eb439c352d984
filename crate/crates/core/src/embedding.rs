//! Keyed, row-major matrix of unit-norm embeddings.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::vector;

/// Tolerance on row norms enforced at construction and on file read.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("row {key:?} has {got} dims, expected {expected}")]
    DimMismatch {
        key: String,
        expected: usize,
        got: usize,
    },
    #[error("row {key:?} has norm {norm}, expected unit length")]
    NormViolation { key: String, norm: f64 },
    #[error("row {0:?} contains a non-finite value")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dims: usize,
    keys: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Builds a matrix, rejecting duplicate keys, ragged rows and rows that
    /// are not unit-norm within [`UNIT_NORM_TOLERANCE`].
    pub fn from_rows<K, V>(dims: usize, rows: impl IntoIterator<Item = (K, V)>) -> Result<Self, MatrixError>
    where
        K: Into<String>,
        V: AsRef<[f32]>,
    {
        let mut keys = Vec::new();
        let mut data = Vec::new();
        for (key, row) in rows {
            let key = key.into();
            let row = row.as_ref();
            if row.len() != dims {
                return Err(MatrixError::DimMismatch {
                    key,
                    expected: dims,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
            keys.push(key);
        }
        Self::from_parts(dims, keys, data)
    }

    pub(crate) fn from_parts(dims: usize, keys: Vec<String>, data: Vec<f32>) -> Result<Self, MatrixError> {
        debug_assert_eq!(keys.len() * dims, data.len());
        let mut index = HashMap::with_capacity(keys.len());
        for (i, key) in keys.iter().enumerate() {
            if index.insert(key.clone(), i).is_some() {
                return Err(MatrixError::DuplicateKey(key.clone()));
            }
        }
        for (key, row) in keys.iter().zip(data.chunks_exact(dims.max(1))) {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(MatrixError::NonFinite(key.clone()));
            }
            let norm = vector::norm(row);
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(MatrixError::NormViolation {
                    key: key.clone(),
                    norm,
                });
            }
        }
        Ok(Self {
            dims,
            keys,
            data,
            index,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    /// Exact-string lookup; keys are never normalized.
    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.row(i))
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys.iter().map(String::as_str).zip(self.data.chunks_exact(self.dims.max(1)))
    }

    /// Groups image rows keyed `class_id/filename` by class. The class is
    /// everything before the last `/`; keys without a `/` are skipped.
    pub fn group_by_class(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, key) in self.keys.iter().enumerate() {
            if let Some((class, _)) = key.rsplit_once('/') {
                groups.entry(class.to_string()).or_default().push(i);
            }
        }
        groups
    }
}

/// Class id encoded in an image key, if any.
pub fn image_class(key: &str) -> Option<&str> {
    key.rsplit_once('/').map(|(class, _)| class)
}
