//! Class universe, prompt rendering and nearest-class mining.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingMatrix;
use crate::util::round6;
use crate::vector::{self, VectorError};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "A photo of a {class}.";
pub const DEFAULT_DESCRIPTOR_TEMPLATE: &str = "A photo of a {class}, which {descriptor}.";
pub const DEFAULT_NEIGHBORS: usize = 10;

const CLASS_SLOT: &str = "{class}";
const DESCRIPTOR_SLOT: &str = "{descriptor}";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CatalogError {
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("descriptor is empty")]
    EmptyDescriptor,
    #[error("duplicate class id {0:?}")]
    DuplicateClass(String),
    #[error("class id is empty")]
    EmptyClassId,
    #[error("template {template:?} must contain {placeholder} exactly once")]
    BadTemplate {
        template: String,
        placeholder: &'static str,
    },
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("n = {n} neighbors requested but only {available} other classes exist")]
    NTooLarge { n: usize, available: usize },
    #[error(transparent)]
    Vector(#[from] VectorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: String,
    pub name: String,
}

impl ClassEntry {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
        }
    }
}

#[derive(Deserialize)]
struct CatalogFile {
    dataset_id: String,
    #[serde(default = "default_prompt")]
    prompt_template: String,
    #[serde(default = "default_descriptor")]
    descriptor_template: String,
    classes: Vec<ClassEntry>,
}

fn default_prompt() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

fn default_descriptor() -> String {
    DEFAULT_DESCRIPTOR_TEMPLATE.to_string()
}

/// Ordered class list plus the two prompt templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CatalogFile")]
pub struct ClassCatalog {
    dataset_id: String,
    prompt_template: String,
    descriptor_template: String,
    classes: Vec<ClassEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<CatalogFile> for ClassCatalog {
    type Error = CatalogError;

    fn try_from(f: CatalogFile) -> Result<Self, Self::Error> {
        ClassCatalog::with_templates(f.dataset_id, f.classes, f.prompt_template, f.descriptor_template)
    }
}

fn check_template(template: &str, slots: &[&'static str]) -> Result<(), CatalogError> {
    for &slot in slots {
        if template.matches(slot).count() != 1 {
            return Err(CatalogError::BadTemplate {
                template: template.to_string(),
                placeholder: slot,
            });
        }
    }
    Ok(())
}

impl ClassCatalog {
    pub fn new(dataset_id: impl Into<String>, classes: Vec<ClassEntry>) -> Result<Self, CatalogError> {
        Self::with_templates(dataset_id, classes, default_prompt(), default_descriptor())
    }

    pub fn with_templates(
        dataset_id: impl Into<String>,
        classes: Vec<ClassEntry>,
        prompt_template: impl Into<String>,
        descriptor_template: impl Into<String>,
    ) -> Result<Self, CatalogError> {
        let prompt_template = prompt_template.into();
        let descriptor_template = descriptor_template.into();
        check_template(&prompt_template, &[CLASS_SLOT])?;
        check_template(&descriptor_template, &[CLASS_SLOT, DESCRIPTOR_SLOT])?;
        let mut index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if c.id.is_empty() {
                return Err(CatalogError::EmptyClassId);
            }
            if index.insert(c.id.clone(), i).is_some() {
                return Err(CatalogError::DuplicateClass(c.id.clone()));
            }
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            prompt_template,
            descriptor_template,
            classes,
            index,
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn prompt_template(&self) -> &str {
        &self.prompt_template
    }

    pub fn descriptor_template(&self) -> &str {
        &self.descriptor_template
    }

    pub fn position(&self, class_id: &str) -> Option<usize> {
        self.index.get(class_id).copied()
    }

    pub fn class(&self, class_id: &str) -> Result<&ClassEntry, CatalogError> {
        self.position(class_id)
            .map(|i| &self.classes[i])
            .ok_or_else(|| CatalogError::UnknownClass(class_id.to_string()))
    }

    pub fn render_class_prompt(&self, class_id: &str) -> Result<String, CatalogError> {
        let class = self.class(class_id)?;
        Ok(self.prompt_template.replace(CLASS_SLOT, &class.name))
    }

    /// `A photo of a {class}, which {descriptor}.` with the descriptor
    /// trimmed, a leading `which ` connector dropped and exactly one
    /// trailing period.
    pub fn render_descriptor_prompt(&self, class_id: &str, descriptor: &str) -> Result<String, CatalogError> {
        let class = self.class(class_id)?;
        let body = canonical_descriptor(descriptor).ok_or(CatalogError::EmptyDescriptor)?;
        let rendered = self
            .descriptor_template
            .replace(CLASS_SLOT, &class.name)
            .replace(DESCRIPTOR_SLOT, &body);
        Ok(format!("{}.", rendered.trim_end().trim_end_matches('.')))
    }

    /// One embedding row per class, in catalog order.
    pub fn class_vectors<'m>(
        &self,
        embeddings: &'m EmbeddingMatrix,
        source: ClassText,
    ) -> Result<Vec<&'m [f32]>, CatalogError> {
        self.classes
            .iter()
            .map(|c| {
                let key = match source {
                    ClassText::Prompt => self.render_class_prompt(&c.id)?,
                    ClassText::Name => c.name.clone(),
                };
                embeddings.get(&key).ok_or(CatalogError::MissingEmbedding(key))
            })
            .collect()
    }
}

/// Canonical storage form of a descriptor: trimmed, no leading `which `, no
/// trailing period. `None` when nothing is left.
pub fn canonical_descriptor(descriptor: &str) -> Option<String> {
    let mut d = descriptor.trim();
    if d.eq_ignore_ascii_case("which") {
        return None;
    }
    if d.len() >= 6 && d.is_char_boundary(6) && d[..6].eq_ignore_ascii_case("which ") {
        d = d[6..].trim_start();
    }
    let d = d.trim_end_matches('.').trim_end();
    (!d.is_empty()).then(|| d.to_string())
}

/// Which string was embedded to represent a class when mining neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassText {
    /// The rendered class prompt, `A photo of a {class}.`
    #[default]
    Prompt,
    /// The bare display name.
    Name,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

/// Per class, the `n` most similar other classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub n: usize,
    pub neighbors: BTreeMap<String, Vec<Neighbor>>,
}

impl SimilarityMap {
    pub fn neighbors_of(&self, class_id: &str) -> Option<&[Neighbor]> {
        self.neighbors.get(class_id).map(Vec::as_slice)
    }

    /// Copy with scores rounded to 6 decimals, the serialized precision.
    pub fn rounded(&self) -> Self {
        let neighbors = self
            .neighbors
            .iter()
            .map(|(k, v)| {
                let v = v
                    .iter()
                    .map(|nb| Neighbor {
                        id: nb.id.clone(),
                        score: round6(nb.score),
                    })
                    .collect();
                (k.clone(), v)
            })
            .collect();
        Self { n: self.n, neighbors }
    }
}

/// Pairwise cosine over class text embeddings; each class gets its `n`
/// highest-scoring other classes, ties broken by catalog index.
pub fn build_similarity_map(
    catalog: &ClassCatalog,
    embeddings: &EmbeddingMatrix,
    source: ClassText,
    n: usize,
) -> Result<SimilarityMap, CatalogError> {
    let available = catalog.len().saturating_sub(1);
    if n == 0 || n > available {
        return Err(CatalogError::NTooLarge { n, available });
    }
    let vectors = catalog.class_vectors(embeddings, source)?;
    let rows: Result<Vec<(String, Vec<Neighbor>)>, CatalogError> = (0..vectors.len())
        .into_par_iter()
        .map(|i| {
            let mut scores = Vec::with_capacity(vectors.len());
            for (j, other) in vectors.iter().enumerate() {
                // the target is pushed below every real score
                scores.push(if i == j {
                    f64::NEG_INFINITY
                } else {
                    vector::cosine(vectors[i], other)?
                });
            }
            let list = vector::top_k(&scores, n)
                .into_iter()
                .map(|s| Neighbor {
                    id: catalog.classes[s.index].id.clone(),
                    score: s.score,
                })
                .collect();
            Ok((catalog.classes[i].id.clone(), list))
        })
        .collect();
    Ok(SimilarityMap {
        n,
        neighbors: rows?.into_iter().collect(),
    })
}
