//! CDEM embedding files, dataset manifests and asset resolution.
//!
//! CDEM layout, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CDEM"
//! 4       4     version (u32, currently 1)
//! 8       4     row_count (u32)
//! 12      4     dims (u32)
//! 16      4     CRC-32 of every byte after the header
//! 20      ...   key table: row_count x (u32 byte length + UTF-8 bytes)
//! ...     ...   data: row_count x dims f32, row-major
//! ```
//!
//! Readers are fail-closed: any validation failure yields an error and no
//! matrix.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, ClassCatalog};
use crate::embedding::{image_class, EmbeddingMatrix, MatrixError};
use crate::util::write_atomic;

pub const MAGIC: &[u8; 4] = b"CDEM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("corrupt key table: {0}")]
    CorruptKeyTable(String),
    #[error("payload is {actual} bytes, header implies {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("row {key:?} has norm {norm}, expected unit length")]
    NormViolation { key: String, norm: f64 },
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("row {key:?}: {detail}")]
    DimMismatch { key: String, detail: String },
    #[error("row {0:?} contains a non-finite value")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("asset missing: {0}")]
    AssetMissing(PathBuf),
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<StoreError>,
    },
    #[error("dims inconsistent: {what} has {got}, expected {expected}")]
    DimsInconsistent {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("class coverage gap in {what}: {missing:?}")]
    ClassCoverageGap { what: String, missing: Vec<String> },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

impl From<MatrixError> for StoreError {
    fn from(e: MatrixError) -> Self {
        match e {
            MatrixError::DuplicateKey(k) => StoreError::DuplicateKey(k),
            MatrixError::NormViolation { key, norm } => StoreError::NormViolation { key, norm },
            MatrixError::NonFinite(k) => StoreError::NonFinite(k),
            MatrixError::DimMismatch { key, expected, got } => StoreError::DimMismatch {
                key,
                detail: format!("{got} dims, expected {expected}"),
            },
        }
    }
}

impl StoreError {
    /// Innermost error, unwrapping file-path context.
    pub fn root(&self) -> &StoreError {
        match self {
            StoreError::InFile { source, .. } => source.root(),
            other => other,
        }
    }

    fn in_file(self, path: &Path) -> StoreError {
        match self {
            e @ (StoreError::Io { .. } | StoreError::AssetMissing(_) | StoreError::InFile { .. }) => e,
            e => StoreError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }
}

pub fn encode(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut body = Vec::new();
    for key in matrix.keys() {
        body.extend_from_slice(&(key.len() as u32).to_le_bytes());
        body.extend_from_slice(key.as_bytes());
    }
    for x in matrix.data() {
        body.extend_from_slice(&x.to_le_bytes());
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.len() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.dims() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            StoreError::Truncated {
                offset: self.pos,
                needed: n,
            },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix, StoreError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(StoreError::VersionUnsupported(version));
    }
    let rows = cur.u32()? as usize;
    let dims = cur.u32()? as usize;
    let stored_crc = cur.u32()?;
    let body_start = cur.pos;

    // Each key costs at least 4 bytes, so a huge row_count cannot force a
    // huge allocation.
    if rows > cur.remaining() / 4 {
        return Err(StoreError::CorruptKeyTable(format!(
            "row count {rows} exceeds what {} remaining bytes can hold",
            cur.remaining()
        )));
    }
    let mut keys = Vec::with_capacity(rows);
    for i in 0..rows {
        let len = cur
            .u32()
            .map_err(|_| StoreError::CorruptKeyTable(format!("key {i} length is truncated")))?
            as usize;
        let raw = cur
            .take(len)
            .map_err(|_| StoreError::CorruptKeyTable(format!("key {i} claims {len} bytes past end of file")))?;
        let key = std::str::from_utf8(raw)
            .map_err(|e| StoreError::CorruptKeyTable(format!("key {i} is not UTF-8: {e}")))?;
        keys.push(key.to_string());
    }
    let expected = rows
        .checked_mul(dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or(StoreError::SizeMismatch {
            expected: usize::MAX,
            actual: cur.remaining(),
        })?;
    if cur.remaining() != expected {
        return Err(StoreError::SizeMismatch {
            expected,
            actual: cur.remaining(),
        });
    }
    let computed = crc32fast::hash(&bytes[body_start..]);
    if computed != stored_crc {
        return Err(StoreError::ChecksumMismatch {
            stored: stored_crc,
            computed,
        });
    }
    if dims == 0 && rows > 0 {
        return Err(StoreError::NormViolation {
            key: keys[0].clone(),
            norm: 0.0,
        });
    }
    let data: Vec<f32> = cur
        .take(expected)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(EmbeddingMatrix::from_parts(dims, keys, data)?)
}

/// Validates and writes rows as a CDEM file (temp file, then rename).
pub fn write_embeddings<K, V>(
    path: &Path,
    dims: usize,
    rows: impl IntoIterator<Item = (K, V)>,
) -> Result<EmbeddingMatrix, StoreError>
where
    K: Into<String>,
    V: AsRef<[f32]>,
{
    let matrix = EmbeddingMatrix::from_rows(dims, rows)?;
    write_matrix(path, &matrix)?;
    Ok(matrix)
}

pub fn write_matrix(path: &Path, matrix: &EmbeddingMatrix) -> Result<(), StoreError> {
    if matrix.dims() == 0 && !matrix.is_empty() {
        return Err(StoreError::DimMismatch {
            key: matrix.keys()[0].clone(),
            detail: "zero dims".into(),
        });
    }
    write_atomic(path, &encode(matrix)).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, StoreError> {
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>, StoreError> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            StoreError::AssetMissing(path.to_path_buf())
        } else {
            StoreError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddingPaths {
    pub class_prompts: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_prompts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bare_descriptors: Option<PathBuf>,
}

/// Ties a catalog to its embedding files. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub catalog: PathBuf,
    pub text_embeddings: TextEmbeddingPaths,
    /// Evaluation images, keyed `class_id/filename`.
    pub images: PathBuf,
    /// Images used to form mean image features; defaults to `images`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_images: Option<PathBuf>,
    /// Dataset whose images supply mean features during filtering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_source: Option<String>,
    /// Manifest of `mean_source`; defaults to `<mean_source>.manifest.json`
    /// next to this manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_source_manifest: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        read_json(path)
    }
}

#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    pub class_prompts: EmbeddingMatrix,
    pub class_names: Option<EmbeddingMatrix>,
    pub descriptor_prompts: Option<EmbeddingMatrix>,
    pub bare_descriptors: Option<EmbeddingMatrix>,
}

#[derive(Debug, Clone)]
pub struct MeanSource {
    pub dataset_id: String,
    pub images: EmbeddingMatrix,
}

/// Every file a manifest names, loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct AssetBundle {
    pub manifest_path: PathBuf,
    pub dataset_id: String,
    pub catalog: ClassCatalog,
    pub texts: TextEmbeddings,
    pub images: EmbeddingMatrix,
    pub support_images: Option<EmbeddingMatrix>,
    pub mean_source: Option<MeanSource>,
}

impl AssetBundle {
    pub fn dims(&self) -> usize {
        self.texts.class_prompts.dims()
    }

    /// Images that supply mean features for filtering: the foreign source
    /// when configured, else the support split, else the evaluation images.
    pub fn filter_images(&self) -> &EmbeddingMatrix {
        if let Some(src) = &self.mean_source {
            &src.images
        } else {
            self.support_images.as_ref().unwrap_or(&self.images)
        }
    }
}

fn check_dims(what: &str, m: &EmbeddingMatrix, expected: usize) -> Result<(), StoreError> {
    if m.dims() != expected && !m.is_empty() {
        return Err(StoreError::DimsInconsistent {
            what: what.to_string(),
            expected,
            got: m.dims(),
        });
    }
    Ok(())
}

fn check_image_labels(what: &str, images: &EmbeddingMatrix, catalog: &ClassCatalog) -> Result<(), StoreError> {
    let unknown: BTreeSet<String> = images
        .keys()
        .iter()
        .filter(|k| image_class(k).is_none_or(|c| catalog.position(c).is_none()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(StoreError::ClassCoverageGap {
            what: format!("{what} (image keys without a catalog class)"),
            missing: unknown.into_iter().collect(),
        });
    }
    Ok(())
}

fn load_images(base: &Path, rel: &Path) -> Result<EmbeddingMatrix, StoreError> {
    read_embeddings(&base.join(rel))
}

/// Loads every asset a manifest names and cross-checks dims and class
/// coverage.
pub fn resolve_assets(manifest_path: &Path) -> Result<AssetBundle, StoreError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let catalog: ClassCatalog = read_json(&base.join(&manifest.catalog))?;

    let t = &manifest.text_embeddings;
    let load_opt = |p: &Option<PathBuf>| p.as_ref().map(|p| read_embeddings(&base.join(p))).transpose();
    let texts = TextEmbeddings {
        class_prompts: read_embeddings(&base.join(&t.class_prompts))?,
        class_names: load_opt(&t.class_names)?,
        descriptor_prompts: load_opt(&t.descriptor_prompts)?,
        bare_descriptors: load_opt(&t.bare_descriptors)?,
    };
    let images = load_images(base, &manifest.images)?;
    let support_images = manifest
        .support_images
        .as_ref()
        .map(|p| load_images(base, p))
        .transpose()?;

    let dims = texts.class_prompts.dims();
    for (what, m) in [
        ("class_names", texts.class_names.as_ref()),
        ("descriptor_prompts", texts.descriptor_prompts.as_ref()),
        ("bare_descriptors", texts.bare_descriptors.as_ref()),
        ("images", Some(&images)),
        ("support_images", support_images.as_ref()),
    ] {
        if let Some(m) = m {
            check_dims(what, m, dims)?;
        }
    }

    let missing_prompts: Vec<String> = catalog
        .classes()
        .iter()
        .filter(|c| {
            catalog
                .render_class_prompt(&c.id)
                .map_or(true, |p| texts.class_prompts.get(&p).is_none())
        })
        .map(|c| c.id.clone())
        .collect();
    if !missing_prompts.is_empty() {
        return Err(StoreError::ClassCoverageGap {
            what: "class_prompts".into(),
            missing: missing_prompts,
        });
    }
    if let Some(names) = &texts.class_names {
        let missing: Vec<String> = catalog
            .classes()
            .iter()
            .filter(|c| names.get(&c.name).is_none())
            .map(|c| c.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(StoreError::ClassCoverageGap {
                what: "class_names".into(),
                missing,
            });
        }
    }
    check_image_labels("images", &images, &catalog)?;
    if let Some(s) = &support_images {
        check_image_labels("support_images", s, &catalog)?;
    }

    let mean_source = match &manifest.mean_source {
        None => None,
        Some(source_id) => {
            let rel = manifest
                .mean_source_manifest
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("{source_id}.manifest.json")));
            let foreign_path = base.join(rel);
            let foreign = DatasetManifest::load(&foreign_path)?;
            if &foreign.dataset_id != source_id {
                return Err(StoreError::Parse {
                    path: foreign_path,
                    detail: format!("dataset_id {:?} does not match mean_source {source_id:?}", foreign.dataset_id),
                });
            }
            let fbase = foreign_path.parent().unwrap_or(Path::new("."));
            let fcatalog: ClassCatalog = read_json(&fbase.join(&foreign.catalog))?;
            let missing: Vec<String> = catalog
                .classes()
                .iter()
                .filter(|c| fcatalog.position(&c.id).is_none())
                .map(|c| c.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(StoreError::ClassCoverageGap {
                    what: format!("mean_source {source_id}"),
                    missing,
                });
            }
            let fimages = load_images(fbase, foreign.support_images.as_ref().unwrap_or(&foreign.images))?;
            check_dims(&format!("mean_source {source_id} images"), &fimages, dims)?;
            Some(MeanSource {
                dataset_id: source_id.clone(),
                images: fimages,
            })
        }
    };

    Ok(AssetBundle {
        manifest_path: manifest_path.to_path_buf(),
        dataset_id: manifest.dataset_id,
        catalog,
        texts,
        images,
        support_images,
        mean_source,
    })
}
