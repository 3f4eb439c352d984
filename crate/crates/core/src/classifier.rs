//! Prompt and descriptor-ensemble classification.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, ClassCatalog};
use crate::embedding::EmbeddingMatrix;
use crate::filter::{descriptor_vector, FilterError, TextMode};
use crate::store::TextEmbeddings;
use crate::util::{rng, round6};
use crate::vector::{self, VectorError};

/// Number of classes written per prediction record.
pub const RECORD_TOP: usize = 5;
/// Number of classes whose traces are written per prediction record.
pub const RECORD_TRACE: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifyError {
    #[error("class {0:?} has no bank entries")]
    EmptyEntries(String),
    #[error("bank has no classes")]
    EmptyBank,
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("{0} embeddings are not available")]
    MissingTextSource(&'static str),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

impl From<FilterError> for ClassifyError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::MissingEmbedding(k) => ClassifyError::MissingEmbedding(k),
            FilterError::MissingTextSource(w) => ClassifyError::MissingTextSource(w),
            FilterError::Catalog(c) => ClassifyError::Catalog(c),
            FilterError::Vector(v) => ClassifyError::Vector(v),
            other => ClassifyError::MissingEmbedding(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    Plain,
    DescriptorEnsemble,
    DescriptorOnly,
}

impl std::fmt::Display for BankMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BankMode::Plain => "plain",
            BankMode::DescriptorEnsemble => "descriptor_ensemble",
            BankMode::DescriptorOnly => "descriptor_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub label: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankClass {
    pub class_id: String,
    pub entries: Vec<BankEntry>,
}

/// Text anchors per class, in catalog order. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextBank {
    mode: BankMode,
    dims: usize,
    classes: Vec<BankClass>,
    excluded: Vec<String>,
}

impl ClassTextBank {
    /// Builds a bank from explicit entries. Every class needs at least one
    /// entry and all embeddings must share dims.
    pub fn new(mode: BankMode, classes: Vec<BankClass>, excluded: Vec<String>) -> Result<Self, ClassifyError> {
        let first = classes.first().ok_or(ClassifyError::EmptyBank)?;
        let dims = first
            .entries
            .first()
            .ok_or_else(|| ClassifyError::EmptyEntries(first.class_id.clone()))?
            .embedding
            .len();
        for c in &classes {
            if c.entries.is_empty() {
                return Err(ClassifyError::EmptyEntries(c.class_id.clone()));
            }
            for e in &c.entries {
                if e.embedding.len() != dims {
                    return Err(VectorError::DimMismatch {
                        left: dims,
                        right: e.embedding.len(),
                    }
                    .into());
                }
            }
        }
        Ok(Self {
            mode,
            dims,
            classes,
            excluded,
        })
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> &[BankClass] {
        &self.classes
    }

    pub fn class(&self, class_id: &str) -> Option<&BankClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    /// Classes left out of the candidate set (descriptor-only mode).
    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }
}

/// Mean of dot products between `img` and each entry, accumulated in f64.
pub fn score_class<R: AsRef<[f32]>>(img: &[f32], entries: &[R]) -> Result<f64, ClassifyError> {
    if entries.is_empty() {
        return Err(ClassifyError::EmptyEntries(String::new()));
    }
    let mut sum = 0.0f64;
    for e in entries {
        sum += vector::dot(img, e.as_ref())?;
    }
    Ok(sum / entries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorScore {
    pub descriptor: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_key: String,
    /// Every bank class, best first; ties keep catalog order.
    pub ranked: Vec<ClassScore>,
    /// Per-entry scores in bank order, when requested.
    pub per_descriptor: Option<BTreeMap<String, Vec<DescriptorScore>>>,
}

impl Prediction {
    pub fn top1(&self) -> &str {
        &self.ranked[0].class_id
    }

    pub fn rank_of(&self, class_id: &str) -> Option<usize> {
        self.ranked.iter().position(|c| c.class_id == class_id)
    }
}

pub fn classify(image_key: &str, img: &[f32], bank: &ClassTextBank, explain: bool) -> Result<Prediction, ClassifyError> {
    if img.len() != bank.dims {
        return Err(VectorError::DimMismatch {
            left: img.len(),
            right: bank.dims,
        }
        .into());
    }
    let mut scores = Vec::with_capacity(bank.classes.len());
    let mut traces = explain.then(BTreeMap::new);
    for class in &bank.classes {
        let dots = class
            .entries
            .iter()
            .map(|e| vector::dot(img, &e.embedding))
            .collect::<Result<Vec<f64>, _>>()?;
        scores.push(dots.iter().sum::<f64>() / dots.len() as f64);
        if let Some(t) = traces.as_mut() {
            let rows = class
                .entries
                .iter()
                .zip(&dots)
                .map(|(e, &score)| DescriptorScore {
                    descriptor: e.label.clone(),
                    score,
                })
                .collect();
            t.insert(class.class_id.clone(), rows);
        }
    }
    let ranked = vector::top_k(&scores, scores.len())
        .into_iter()
        .map(|s| ClassScore {
            class_id: bank.classes[s.index].class_id.clone(),
            score: s.score,
        })
        .collect();
    Ok(Prediction {
        image_key: image_key.to_string(),
        ranked,
        per_descriptor: traces,
    })
}

/// Classifies every row of `images` in parallel; output follows row order.
pub fn classify_all(images: &EmbeddingMatrix, bank: &ClassTextBank, explain: bool) -> Result<Vec<Prediction>, ClassifyError> {
    (0..images.len())
        .into_par_iter()
        .map(|i| classify(&images.keys()[i], images.row(i), bank, explain))
        .collect()
}

/// Builds the bank for `mode`. `descriptors` maps class id to its descriptor
/// texts (kept descriptors after filtering, or a full set). Classes absent
/// from the map count as having none.
pub fn build_bank(
    catalog: &ClassCatalog,
    descriptors: &BTreeMap<String, Vec<String>>,
    texts: &TextEmbeddings,
    mode: BankMode,
) -> Result<ClassTextBank, ClassifyError> {
    let mut classes = Vec::with_capacity(catalog.len());
    let mut excluded = Vec::new();
    for class in catalog.classes() {
        let prompt_key = catalog.render_class_prompt(&class.id)?;
        let prompt_entry = || -> Result<BankEntry, ClassifyError> {
            let emb = texts
                .class_prompts
                .get(&prompt_key)
                .ok_or_else(|| ClassifyError::MissingEmbedding(prompt_key.clone()))?;
            Ok(BankEntry {
                label: prompt_key.clone(),
                embedding: emb.to_vec(),
            })
        };
        let ds = descriptors.get(&class.id).map(Vec::as_slice).unwrap_or(&[]);
        let entries = match mode {
            BankMode::Plain => vec![prompt_entry()?],
            BankMode::DescriptorEnsemble if ds.is_empty() => vec![prompt_entry()?],
            BankMode::DescriptorEnsemble => ds
                .iter()
                .map(|d| {
                    let emb = descriptor_vector(texts, catalog, &class.id, d, TextMode::DescriptorPrompt)?;
                    Ok(BankEntry {
                        label: catalog.render_descriptor_prompt(&class.id, d)?,
                        embedding: emb.to_vec(),
                    })
                })
                .collect::<Result<Vec<_>, ClassifyError>>()?,
            BankMode::DescriptorOnly if ds.is_empty() => {
                log::warn!("class {:?} has no descriptors; left out of the descriptor-only bank", class.id);
                excluded.push(class.id.clone());
                continue;
            }
            BankMode::DescriptorOnly => ds
                .iter()
                .map(|d| {
                    let emb = descriptor_vector(texts, catalog, &class.id, d, TextMode::BareDescriptor)?;
                    Ok(BankEntry {
                        label: d.trim().to_string(),
                        embedding: emb.to_vec(),
                    })
                })
                .collect::<Result<Vec<_>, ClassifyError>>()?,
        };
        classes.push(BankClass {
            class_id: class.id.clone(),
            entries,
        });
    }
    ClassTextBank::new(mode, classes, excluded)
}

/// Uniform sample of `min(k, len)` descriptors without replacement, kept in
/// original order.
pub fn random_select_k(descriptors: &[String], k: usize, seed: u64) -> Vec<String> {
    if k >= descriptors.len() {
        return descriptors.to_vec();
    }
    let mut picked = index::sample(&mut rng(seed), descriptors.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| descriptors[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub class: String,
    pub score: f64,
}

/// One line of a prediction stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_key: String,
    pub top: Vec<TopEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<BTreeMap<String, Vec<DescriptorScore>>>,
}

impl PredictionRecord {
    /// Top-5 classes, and traces for the top-2 when the prediction has them.
    /// Scores are rounded for output.
    pub fn from_prediction(p: &Prediction, truth: Option<&str>) -> Self {
        let top = p
            .ranked
            .iter()
            .take(RECORD_TOP)
            .map(|c| TopEntry {
                class: c.class_id.clone(),
                score: round6(c.score),
            })
            .collect();
        let trace = p.per_descriptor.as_ref().map(|all| {
            p.ranked
                .iter()
                .take(RECORD_TRACE)
                .filter_map(|c| {
                    all.get(&c.class_id).map(|rows| {
                        let rows = rows
                            .iter()
                            .map(|r| DescriptorScore {
                                descriptor: r.descriptor.clone(),
                                score: round6(r.score),
                            })
                            .collect();
                        (c.class_id.clone(), rows)
                    })
                })
                .collect()
        });
        Self {
            image_key: p.image_key.clone(),
            top,
            truth: truth.map(str::to_string),
            trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ClassEntry;
    use crate::vector::l2_normalize;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_unit(r: &mut impl Rng, dims: usize) -> Vec<f32> {
        l2_normalize(&(0..dims).map(|_| r.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap()
    }

    fn bank_of(mode: BankMode, per_class: Vec<Vec<Vec<f32>>>) -> ClassTextBank {
        let classes = per_class
            .into_iter()
            .enumerate()
            .map(|(i, es)| BankClass {
                class_id: format!("c{i}"),
                entries: es
                    .into_iter()
                    .enumerate()
                    .map(|(j, e)| BankEntry {
                        label: format!("c{i}-{j}"),
                        embedding: e,
                    })
                    .collect(),
            })
            .collect();
        ClassTextBank::new(mode, classes, Vec::new()).unwrap()
    }

    #[test]
    fn score_class_examples() {
        let mut r = rng(3);
        let img = random_unit(&mut r, 32);
        let e = random_unit(&mut r, 32);
        let single = score_class(&img, &[e.clone()]).unwrap();
        assert!((single - vector::cosine(&img, &e).unwrap()).abs() < 1e-6);
        assert_eq!(score_class(&img, &[e.clone(), e.clone()]).unwrap(), single);
        let seven: Vec<Vec<f32>> = (0..7).map(|_| random_unit(&mut r, 32)).collect();
        let oracle: f64 = seven
            .iter()
            .map(|v| v.iter().zip(&img).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>())
            .sum::<f64>()
            / 7.0;
        assert!((score_class(&img, &seven).unwrap() - oracle).abs() < 1e-6);
        assert!(matches!(
            score_class::<Vec<f32>>(&img, &[]),
            Err(ClassifyError::EmptyEntries(_))
        ));
    }

    #[test]
    fn self_match_ranks_first() {
        let a = vec![1.0f32, 0.0, 0.0];
        let b = vec![0.0f32, 1.0, 0.0];
        let bank = bank_of(BankMode::Plain, vec![vec![a.clone()], vec![b]]);
        let p = classify("x", &a, &bank, false).unwrap();
        assert_eq!(p.top1(), "c0");
        assert!((p.ranked[0].score - 1.0).abs() < 1e-6);
        assert!(matches!(
            classify("x", &[1.0, 0.0], &bank, false),
            Err(ClassifyError::Vector(VectorError::DimMismatch { .. }))
        ));
    }

    #[test]
    fn plain_matches_argmax_oracle() {
        let mut r = rng(11);
        let prompts: Vec<Vec<f32>> = (0..30).map(|_| random_unit(&mut r, 48)).collect();
        let bank = bank_of(BankMode::Plain, prompts.iter().map(|p| vec![p.clone()]).collect());
        for _ in 0..200 {
            let img = random_unit(&mut r, 48);
            let p = classify("x", &img, &bank, false).unwrap();
            // independent oracle: full sort of f64 dot products
            let mut order: Vec<(f64, usize)> = prompts
                .iter()
                .enumerate()
                .map(|(i, q)| (q.iter().zip(&img).map(|(a, b)| *a as f64 * *b as f64).sum(), i))
                .collect();
            order.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let got: Vec<String> = p.ranked.iter().map(|c| c.class_id.clone()).collect();
            let want: Vec<String> = order.iter().map(|(_, i)| format!("c{i}")).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn ties_follow_catalog_order() {
        let e = vec![0.0f32, 1.0];
        let bank = bank_of(BankMode::Plain, vec![vec![e.clone()], vec![e.clone()], vec![e.clone()]]);
        let p = classify("x", &[1.0, 0.0], &bank, false).unwrap();
        let ids: Vec<&str> = p.ranked.iter().map(|c| c.class_id.as_str()).collect();
        assert_eq!(ids, ["c0", "c1", "c2"]);
    }

    #[test]
    fn explain_trace_matches_scores() {
        let mut r = rng(4);
        let per_class: Vec<Vec<Vec<f32>>> = (0..4)
            .map(|i| (0..=i).map(|_| random_unit(&mut r, 16)).collect())
            .collect();
        let bank = bank_of(BankMode::DescriptorEnsemble, per_class);
        let img = random_unit(&mut r, 16);
        let p = classify("x", &img, &bank, true).unwrap();
        let plain = classify("x", &img, &bank, false).unwrap();
        assert_eq!(p.ranked, plain.ranked);
        let traces = p.per_descriptor.as_ref().unwrap();
        for c in &p.ranked {
            let rows = &traces[&c.class_id];
            let mean = rows.iter().map(|r| r.score).sum::<f64>() / rows.len() as f64;
            assert_eq!(mean, c.score);
        }
        let rec = PredictionRecord::from_prediction(&p, Some("c1"));
        assert_eq!(rec.top.len(), 4);
        assert_eq!(rec.trace.as_ref().unwrap().len(), 2);
        assert!(rec.trace.as_ref().unwrap().contains_key(p.top1()));
    }

    fn toy_assets() -> (ClassCatalog, TextEmbeddings) {
        let cat = ClassCatalog::new(
            "toy",
            vec![
                ClassEntry::new("a", "Alpha"),
                ClassEntry::new("b", "Beta"),
            ],
        )
        .unwrap();
        let u = |i: usize| {
            let mut v = vec![0.0f32; 4];
            v[i] = 1.0;
            v
        };
        let prompts = EmbeddingMatrix::from_rows(4, [("A photo of a Alpha.", u(0)), ("A photo of a Beta.", u(1))]).unwrap();
        let dp = EmbeddingMatrix::from_rows(
            4,
            [
                ("A photo of a Alpha, which has golden fur.", u(2)),
                ("A photo of a Alpha, which is tall.", u(3)),
                ("A photo of a Alpha, which has a tail.", u(0)),
            ],
        )
        .unwrap();
        let bare = EmbeddingMatrix::from_rows(4, [("has golden fur", u(2)), ("is tall", u(3))]).unwrap();
        (
            cat,
            TextEmbeddings {
                class_prompts: prompts,
                class_names: None,
                descriptor_prompts: Some(dp),
                bare_descriptors: Some(bare),
            },
        )
    }

    #[test]
    fn build_bank_modes() {
        let (cat, texts) = toy_assets();
        let mut ds = BTreeMap::new();
        ds.insert(
            "a".to_string(),
            vec!["has golden fur".to_string(), "is tall".into(), "has a tail".into()],
        );
        let plain = build_bank(&cat, &ds, &texts, BankMode::Plain).unwrap();
        assert!(plain.classes().iter().all(|c| c.entries.len() == 1));

        let ens = build_bank(&cat, &ds, &texts, BankMode::DescriptorEnsemble).unwrap();
        let a = ens.class("a").unwrap();
        assert_eq!(a.entries.len(), 3);
        assert_eq!(a.entries[0].label, "A photo of a Alpha, which has golden fur.");
        // b has no descriptors: falls back to exactly its class prompt
        let b = ens.class("b").unwrap();
        assert_eq!(b.entries.len(), 1);
        assert_eq!(b.entries[0].label, "A photo of a Beta.");

        let mut only = BTreeMap::new();
        only.insert("a".to_string(), vec!["has golden fur".to_string()]);
        let bank = build_bank(&cat, &only, &texts, BankMode::DescriptorOnly).unwrap();
        assert_eq!(bank.classes().len(), 1);
        assert_eq!(bank.class("a").unwrap().entries[0].label, "has golden fur");
        assert_eq!(bank.excluded(), ["b"]);

        let mut missing = BTreeMap::new();
        missing.insert("b".to_string(), vec!["is green".to_string()]);
        assert_eq!(
            build_bank(&cat, &missing, &texts, BankMode::DescriptorEnsemble),
            Err(ClassifyError::MissingEmbedding("A photo of a Beta, which is green.".into()))
        );
    }

    #[test]
    fn random_select_k_contract() {
        let ds: Vec<String> = (0..20).map(|i| format!("d{i}")).collect();
        assert_eq!(random_select_k(&ds[..3], 5, 0), &ds[..3]);
        let subsets: Vec<Vec<String>> = (0..5).map(|s| random_select_k(&ds, 5, s)).collect();
        for s in &subsets {
            assert_eq!(s.len(), 5);
            let pos: Vec<usize> = s.iter().map(|x| ds.iter().position(|d| d == x).unwrap()).collect();
            assert!(pos.windows(2).all(|w| w[0] < w[1]));
        }
        let distinct: std::collections::BTreeSet<_> = subsets.iter().collect();
        assert!(distinct.len() >= 4);
    }

    #[test]
    fn random_select_k_is_uniform() {
        let ds: Vec<String> = (0..20).map(|i| format!("d{i}")).collect();
        let mut counts = vec![0usize; 20];
        let trials = 10_000u64;
        for i in 0..trials {
            for d in random_select_k(&ds, 5, crate::util::mix_seed(17, i)) {
                counts[d[1..].parse::<usize>().unwrap()] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.25).abs() < 0.01, "{freq}");
        }
    }

    proptest! {
        #[test]
        fn ranking_invariants(seed in any::<u64>(), n_classes in 1usize..12, alpha in 0.01f32..100.0) {
            let mut r = rng(seed);
            let per_class: Vec<Vec<Vec<f32>>> = (0..n_classes)
                .map(|_| { let m = r.random_range(1..5); (0..m).map(|_| random_unit(&mut r, 8)).collect() })
                .collect();
            let bank = bank_of(BankMode::DescriptorEnsemble, per_class.clone());
            let img = random_unit(&mut r, 8);
            let p = classify("x", &img, &bank, false).unwrap();
            prop_assert_eq!(p.ranked.len(), n_classes);
            prop_assert!(p.ranked.iter().all(|c| c.score.is_finite()));
            let top5: Vec<&str> = p.ranked.iter().take(5).map(|c| c.class_id.as_str()).collect();
            prop_assert!(top5.contains(&p.top1()));

            // positive scaling leaves the order unchanged
            let scaled: Vec<f32> = img.iter().map(|x| x * alpha).collect();
            let ps = classify("x", &scaled, &bank, false).unwrap();
            let order = |p: &Prediction| p.ranked.iter().map(|c| c.class_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(order(&p), order(&ps));

            // permuting entries within a class keeps its score
            let mut rev = per_class.clone();
            for es in &mut rev { es.reverse(); }
            for (es, er) in per_class.iter().zip(&rev) {
                let a = score_class(&img, es).unwrap();
                let b = score_class(&img, er).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn singleton_ensemble_equals_plain(seed in any::<u64>(), n_classes in 1usize..20) {
            let mut r = rng(seed);
            let prompts: Vec<Vec<f32>> = (0..n_classes).map(|_| random_unit(&mut r, 12)).collect();
            let plain = bank_of(BankMode::Plain, prompts.iter().map(|p| vec![p.clone()]).collect());
            let ens = bank_of(BankMode::DescriptorEnsemble, prompts.iter().map(|p| vec![p.clone()]).collect());
            let img = random_unit(&mut r, 12);
            prop_assert_eq!(classify("x", &img, &plain, false).unwrap().ranked, classify("x", &img, &ens, false).unwrap().ranked);
        }

        #[test]
        fn batch_equals_independent_calls(seed in any::<u64>()) {
            let mut r = rng(seed);
            let bank = bank_of(BankMode::Plain, (0..5).map(|_| vec![random_unit(&mut r, 6)]).collect());
            let rows: Vec<(String, Vec<f32>)> = (0..20).map(|i| (format!("c0/{i}"), random_unit(&mut r, 6))).collect();
            let m = EmbeddingMatrix::from_rows(6, rows.clone()).unwrap();
            let batch = classify_all(&m, &bank, true).unwrap();
            for ((k, v), p) in rows.iter().zip(&batch) {
                prop_assert_eq!(&classify(k, v, &bank, true).unwrap(), p);
            }
        }
    }
}
