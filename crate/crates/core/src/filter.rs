//! Few-shot descriptor filtering.
//!
//! Per class: average a few image embeddings into a mean feature, set the
//! lower bound to `min(cos(mean, class prompt), cap)`, drop descriptors
//! scoring under it, keep the top `k` of the rest, and fall back to the
//! class prompt when nothing survives.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::catalog::{CatalogError, ClassCatalog};
use crate::embedding::EmbeddingMatrix;
use crate::store::TextEmbeddings;
use crate::util::{mix_seed, rng, round6};
use crate::vector::{self, VectorError};

pub const DEFAULT_BOUND_CAP: f64 = 0.3;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("class {0:?} has no images to form a mean feature")]
    EmptyClassImages(String),
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("{0} embeddings are not available")]
    MissingTextSource(&'static str),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("filtering failed for every class; first error: {0}")]
    NoClassSucceeded(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// How many images form the mean feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shots {
    All,
    Count(usize),
}

impl Shots {
    pub fn resolve(self, available: usize) -> usize {
        match self {
            Shots::All => available,
            Shots::Count(n) => n.min(available),
        }
    }
}

impl std::fmt::Display for Shots {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shots::All => f.write_str("all"),
            Shots::Count(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for Shots {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Shots::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Shots::Count(n)),
            _ => Err(format!("shots must be a positive integer or \"all\", got {s:?}")),
        }
    }
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Shots::All => s.serialize_str("all"),
            Shots::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) if n >= 1 => Ok(Shots::Count(n as usize)),
            Raw::N(_) => Err(serde::de::Error::custom("shots must be >= 1")),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Which text embedding represents a descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// The rendered `A photo of a {class}, which {descriptor}.`
    #[default]
    DescriptorPrompt,
    /// The descriptor text alone.
    BareDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub k: usize,
    pub bound_cap: f64,
    pub shots: Shots,
    pub rng_seed: u64,
    pub text_mode: TextMode,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            bound_cap: DEFAULT_BOUND_CAP,
            shots: Shots::All,
            rng_seed: 0,
            text_mode: TextMode::DescriptorPrompt,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.k == 0 {
            return Err(FilterError::InvalidPolicy("k must be >= 1".into()));
        }
        if !self.bound_cap.is_finite() {
            return Err(FilterError::InvalidPolicy("bound_cap must be finite".into()));
        }
        if self.shots == Shots::Count(0) {
            return Err(FilterError::InvalidPolicy("shots must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    BelowBound,
    BeyondK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kept {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discarded {
    pub text: String,
    pub score: f64,
    pub reason: DiscardReason,
}

/// Result of filtering one class. `kept` is sorted by score (ties by input
/// order); `discarded` is in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    #[serde(skip)]
    pub class_id: String,
    pub lower_bound: f64,
    pub fell_back: bool,
    pub kept: Vec<Kept>,
    pub discarded: Vec<Discarded>,
}

impl FilterOutcome {
    pub fn kept_texts(&self) -> Vec<String> {
        self.kept.iter().map(|k| k.text.clone()).collect()
    }

    fn rounded(&self) -> Self {
        Self {
            class_id: self.class_id.clone(),
            lower_bound: round6(self.lower_bound),
            fell_back: self.fell_back,
            kept: self
                .kept
                .iter()
                .map(|k| Kept {
                    text: k.text.clone(),
                    score: round6(k.score),
                })
                .collect(),
            discarded: self
                .discarded
                .iter()
                .map(|d| Discarded {
                    text: d.text.clone(),
                    score: round6(d.score),
                    reason: d.reason,
                })
                .collect(),
        }
    }
}

/// Uniformly samples `shots` rows without replacement (all rows when there
/// are fewer) and returns their normalized mean.
pub fn few_shot_mean<R: AsRef<[f32]>>(images: &[R], shots: Shots, seed: u64) -> Result<Vec<f32>, FilterError> {
    if images.is_empty() {
        return Err(FilterError::EmptyClassImages(String::new()));
    }
    let take = shots.resolve(images.len());
    let mut picked = if take == images.len() {
        (0..take).collect::<Vec<_>>()
    } else {
        index::sample(&mut rng(seed), images.len(), take).into_vec()
    };
    picked.sort_unstable();
    let rows: Vec<&[f32]> = picked.iter().map(|&i| images[i].as_ref()).collect();
    Ok(vector::mean_vector(&rows)?)
}

pub fn compute_lower_bound(mean_img: &[f32], class_prompt: &[f32], bound_cap: f64) -> Result<f64, FilterError> {
    Ok(vector::cosine(mean_img, class_prompt)?.min(bound_cap))
}

pub fn filter_class(
    class_id: &str,
    descriptors: &[(String, &[f32])],
    mean_img: &[f32],
    class_prompt: &[f32],
    policy: &FilterPolicy,
) -> Result<FilterOutcome, FilterError> {
    let lower_bound = compute_lower_bound(mean_img, class_prompt, policy.bound_cap)?;
    let scores = descriptors
        .iter()
        .map(|(_, emb)| vector::cosine(mean_img, emb))
        .collect::<Result<Vec<f64>, _>>()?;

    let survivors: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= lower_bound).collect();
    let survivor_scores: Vec<f64> = survivors.iter().map(|&i| scores[i]).collect();
    let ranked = vector::top_k(&survivor_scores, policy.k);

    let mut keep_flags = vec![false; scores.len()];
    let kept: Vec<Kept> = ranked
        .iter()
        .map(|s| {
            let i = survivors[s.index];
            keep_flags[i] = true;
            Kept {
                text: descriptors[i].0.clone(),
                score: scores[i],
            }
        })
        .collect();
    let discarded = (0..scores.len())
        .filter(|&i| !keep_flags[i])
        .map(|i| Discarded {
            text: descriptors[i].0.clone(),
            score: scores[i],
            reason: if scores[i] < lower_bound {
                DiscardReason::BelowBound
            } else {
                DiscardReason::BeyondK
            },
        })
        .collect();
    Ok(FilterOutcome {
        class_id: class_id.to_string(),
        lower_bound,
        fell_back: kept.is_empty(),
        kept,
        discarded,
    })
}

/// Embedding of a descriptor under the chosen text mode.
pub fn descriptor_vector<'t>(
    texts: &'t TextEmbeddings,
    catalog: &ClassCatalog,
    class_id: &str,
    descriptor: &str,
    mode: TextMode,
) -> Result<&'t [f32], FilterError> {
    let (matrix, key) = match mode {
        TextMode::DescriptorPrompt => (
            texts
                .descriptor_prompts
                .as_ref()
                .ok_or(FilterError::MissingTextSource("descriptor_prompts"))?,
            catalog.render_descriptor_prompt(class_id, descriptor)?,
        ),
        TextMode::BareDescriptor => (
            texts
                .bare_descriptors
                .as_ref()
                .ok_or(FilterError::MissingTextSource("bare_descriptors"))?,
            descriptor.trim().to_string(),
        ),
    };
    matrix.get(&key).ok_or(FilterError::MissingEmbedding(key))
}

/// Seed used for one class's few-shot draw.
pub fn class_seed(policy_seed: u64, class_index: usize) -> u64 {
    mix_seed(policy_seed, class_index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub policy: FilterPolicy,
    pub outcomes: BTreeMap<String, FilterOutcome>,
    pub errors: BTreeMap<String, String>,
}

impl FilterRun {
    pub fn to_bundle(&self) -> FilterBundle {
        FilterBundle {
            policy: self.policy.clone(),
            outcomes: self.outcomes.iter().map(|(k, v)| (k.clone(), v.rounded())).collect(),
        }
    }

    /// Kept descriptors per class; empty on fallback.
    pub fn kept_by_class(&self) -> BTreeMap<String, Vec<String>> {
        self.outcomes.iter().map(|(k, v)| (k.clone(), v.kept_texts())).collect()
    }
}

/// Serialized form of a filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBundle {
    pub policy: FilterPolicy,
    pub outcomes: BTreeMap<String, FilterOutcome>,
}

impl FilterBundle {
    pub fn kept_by_class(&self) -> BTreeMap<String, Vec<String>> {
        self.outcomes.iter().map(|(k, v)| (k.clone(), v.kept_texts())).collect()
    }
}

fn filter_one(
    catalog: &ClassCatalog,
    class_index: usize,
    descriptors: &[String],
    texts: &TextEmbeddings,
    by_class: &BTreeMap<String, Vec<usize>>,
    images: &EmbeddingMatrix,
    policy: &FilterPolicy,
) -> Result<FilterOutcome, FilterError> {
    let class_id = &catalog.classes()[class_index].id;
    let prompt_key = catalog.render_class_prompt(class_id)?;
    let prompt = texts
        .class_prompts
        .get(&prompt_key)
        .ok_or(FilterError::MissingEmbedding(prompt_key))?;
    let rows: Vec<&[f32]> = by_class
        .get(class_id)
        .map(|ix| ix.iter().map(|&i| images.row(i)).collect())
        .unwrap_or_default();
    if rows.is_empty() {
        if descriptors.is_empty() {
            return Ok(FilterOutcome {
                class_id: class_id.clone(),
                lower_bound: policy.bound_cap,
                fell_back: true,
                kept: Vec::new(),
                discarded: Vec::new(),
            });
        }
        return Err(FilterError::EmptyClassImages(class_id.clone()));
    }
    let mean = few_shot_mean(&rows, policy.shots, class_seed(policy.rng_seed, class_index))?;
    let embs = descriptors
        .iter()
        .map(|d| Ok((d.clone(), descriptor_vector(texts, catalog, class_id, d, policy.text_mode)?)))
        .collect::<Result<Vec<_>, FilterError>>()?;
    filter_class(class_id, &embs, &mean, prompt, policy)
}

/// Filters every catalog class. Mean features come from `images` (the
/// dataset's own or a foreign mean source). Per-class failures are
/// collected; the run fails only if no class succeeds.
pub fn filter_dataset(
    catalog: &ClassCatalog,
    descriptors: &BTreeMap<String, Vec<String>>,
    texts: &TextEmbeddings,
    images: &EmbeddingMatrix,
    policy: &FilterPolicy,
) -> Result<FilterRun, FilterError> {
    policy.validate()?;
    let by_class = images.group_by_class();
    let results: Vec<(String, Result<FilterOutcome, FilterError>)> = (0..catalog.len())
        .into_par_iter()
        .map(|ci| {
            let class_id = catalog.classes()[ci].id.clone();
            let texts_for_class = descriptors.get(&class_id).cloned().unwrap_or_default();
            let r = filter_one(catalog, ci, &texts_for_class, texts, &by_class, images, policy);
            (class_id, r)
        })
        .collect();
    let mut outcomes = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for (class_id, r) in results {
        match r {
            Ok(o) => {
                outcomes.insert(class_id, o);
            }
            Err(e) => {
                log::warn!("filtering class {class_id:?} failed: {e}");
                errors.insert(class_id, e.to_string());
            }
        }
    }
    if outcomes.is_empty() && !errors.is_empty() {
        let first = errors.iter().next().map(|(k, v)| format!("{k}: {v}")).unwrap_or_default();
        return Err(FilterError::NoClassSucceeded(first));
    }
    Ok(FilterRun {
        policy: policy.clone(),
        outcomes,
        errors,
    })
}
