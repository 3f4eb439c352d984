//! Comparative descriptor generation.
//!
//! For each class and each of its similar classes, two in-context examples
//! are drawn from a fixed pool of ten, a contrastive question is sent to the
//! LLM, and the answer is parsed into descriptor lines. Lines from all
//! comparisons are merged into one [`DescriptorSet`] with provenance.

pub mod cache;
pub mod llm;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{canonical_descriptor, CatalogError, ClassCatalog, SimilarityMap};
use crate::util::{mix_seed, rng, Clock};
pub use cache::{CacheRecord, ResponseCache};
pub use llm::{
    call_llm, ChatMessage, HttpTransport, LlmError, LlmRequest, OfflineTransport, ReplayEntry, ReplayTransport,
    RetryPolicy, Role, Transport, TransportFailure,
};

pub const POOL_SIZE: usize = 10;
pub const MAX_DESCRIPTOR_CHARS: usize = 200;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

const PREAMBLE_PREFIX: &str = "there are several useful visual features to tell the photo is a";

static BUNDLED_POOL: &str = include_str!("../../assets/incontext_pool.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenError {
    #[error("in-context pool must hold exactly {POOL_SIZE} examples, got {0}")]
    PoolSizeMismatch(usize),
    #[error("invalid in-context example: {0}")]
    InvalidExample(String),
    #[error("target and similar class are the same: {0:?}")]
    SameClass(String),
    #[error("no descriptor survived parsing")]
    EmptyParse,
    #[error("class {0:?} has no entry in the similarity map")]
    NoNeighbors(String),
    #[error("every comparison failed for class {class_id:?}: {first}")]
    AllComparisonsFailed { class_id: String, first: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InContextExample {
    pub target_class: String,
    pub similar_class: String,
    pub answer_lines: Vec<String>,
}

impl InContextExample {
    fn validate(&self) -> Result<(), GenError> {
        if self.answer_lines.is_empty() || self.answer_lines.iter().any(|l| l.trim().is_empty()) {
            return Err(GenError::InvalidExample(format!(
                "{} vs {}: answer lines must be nonempty",
                self.target_class, self.similar_class
            )));
        }
        Ok(())
    }
}

/// The ten question/answer sets shipped with the crate.
pub fn bundled_pool() -> Vec<InContextExample> {
    serde_json::from_str(BUNDLED_POOL).expect("bundled in-context pool parses")
}

/// Two distinct examples, uniform over the 45 unordered pairs.
pub fn sample_incontext(pool: &[InContextExample], seed: u64) -> Result<[InContextExample; 2], GenError> {
    if pool.len() != POOL_SIZE {
        return Err(GenError::PoolSizeMismatch(pool.len()));
    }
    let picked = index::sample(&mut rng(seed), POOL_SIZE, 2);
    Ok([pool[picked.index(0)].clone(), pool[picked.index(1)].clone()])
}

pub fn question(target: &str, similar: &str) -> String {
    format!("What are useful features for distinguishing a {target} from a {similar} in the photo?")
}

pub fn answer_preamble(target: &str, similar: &str) -> String {
    format!("There are several useful visual features to tell the photo is a {target}, not a {similar}.")
}

fn render_answer(example: &InContextExample) -> String {
    let mut out = answer_preamble(&example.target_class, &example.similar_class);
    for line in &example.answer_lines {
        out.push_str("\n- ");
        out.push_str(line.trim());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Case-insensitive, trimmed exact-match dedup when merging comparisons.
    pub dedup: bool,
    pub max_in_flight: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-4o".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            dedup: true,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

/// Two rendered example exchanges followed by the live question.
pub fn build_query(
    target: &str,
    similar: &str,
    examples: &[InContextExample; 2],
    config: &GenerationConfig,
) -> Result<LlmRequest, GenError> {
    if target == similar {
        return Err(GenError::SameClass(target.to_string()));
    }
    let mut messages = Vec::with_capacity(5);
    for ex in examples {
        ex.validate()?;
        messages.push(ChatMessage::user(question(&ex.target_class, &ex.similar_class)));
        messages.push(ChatMessage::assistant(render_answer(ex)));
    }
    messages.push(ChatMessage::user(question(target, similar)));
    Ok(LlmRequest {
        model: config.model_id.clone(),
        messages,
        temperature: config.temperature,
        max_tokens: config.max_tokens,
    })
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim_start();
    for marker in ['-', '*', '•'] {
        if let Some(rest) = line.strip_prefix(marker) {
            return strip_number(rest.trim_start());
        }
    }
    strip_number(line)
}

fn strip_number(line: &str) -> &str {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return rest;
            }
        }
    }
    line
}

/// Splits an LLM answer into descriptor lines, in order. Duplicates are kept;
/// they are merged later.
pub fn parse_response(text: &str) -> Result<Vec<String>, GenError> {
    let out: Vec<String> = text
        .lines()
        .filter_map(|line| canonical_descriptor(strip_list_marker(line)))
        .filter(|d| d.chars().count() <= MAX_DESCRIPTOR_CHARS)
        .filter(|d| !d.to_lowercase().starts_with(PREAMBLE_PREFIX))
        .collect();
    if out.is_empty() {
        Err(GenError::EmptyParse)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub text: String,
    /// Similar class whose comparison produced this descriptor.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub model_id: String,
    pub timestamp: String,
    /// Comparisons that contributed a parsed answer.
    pub n_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub class_id: String,
    pub generation_meta: GenerationMeta,
    pub descriptors: Vec<Descriptor>,
}

impl DescriptorSet {
    pub fn texts(&self) -> Vec<String> {
        self.descriptors.iter().map(|d| d.text.clone()).collect()
    }

    /// True when every provenance points at a neighbor of the class.
    pub fn provenance_valid(&self, map: &SimilarityMap) -> bool {
        let Some(neighbors) = map.neighbors_of(&self.class_id) else {
            return self.descriptors.is_empty();
        };
        self.descriptors
            .iter()
            .all(|d| neighbors.iter().any(|n| n.id == d.source))
    }
}

/// One descriptor set per class of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorBundle {
    pub dataset_id: String,
    pub sets: Vec<DescriptorSet>,
}

impl DescriptorBundle {
    pub fn get(&self, class_id: &str) -> Option<&DescriptorSet> {
        self.sets.iter().find(|s| s.class_id == class_id)
    }

    /// Descriptor texts per class.
    pub fn lists(&self) -> BTreeMap<String, Vec<String>> {
        self.sets.iter().map(|s| (s.class_id.clone(), s.texts())).collect()
    }
}

fn dedup_key(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Merges per-comparison lists in order; with `dedup`, the first occurrence
/// of each case-insensitive trimmed text wins.
pub fn merge_descriptors(lists: &[(String, Vec<String>)], dedup: bool) -> Vec<Descriptor> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (source, lines) in lists {
        for line in lines {
            if dedup && !seen.insert(dedup_key(line)) {
                continue;
            }
            out.push(Descriptor {
                text: line.clone(),
                source: source.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonFailure {
    pub similar_class: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub set: DescriptorSet,
    pub failures: Vec<ComparisonFailure>,
}

impl Generated {
    /// Some comparisons failed but at least one succeeded.
    pub fn partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Drives generation for a dataset. LLM calls for one class run in parallel,
/// bounded by `config.max_in_flight`.
pub struct Generator {
    pool: Vec<InContextExample>,
    config: GenerationConfig,
    retry: RetryPolicy,
    cache: Arc<ResponseCache>,
    transport: Arc<dyn Transport>,
    clock: Clock,
    workers: rayon::ThreadPool,
}

impl Generator {
    pub fn new(
        pool: Vec<InContextExample>,
        config: GenerationConfig,
        retry: RetryPolicy,
        cache: Arc<ResponseCache>,
        transport: Arc<dyn Transport>,
        clock: Clock,
    ) -> Result<Self, GenError> {
        if pool.len() != POOL_SIZE {
            return Err(GenError::PoolSizeMismatch(pool.len()));
        }
        for ex in &pool {
            ex.validate()?;
        }
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(config.max_in_flight.max(1))
            .build()
            .expect("thread pool");
        Ok(Self {
            pool,
            config,
            retry,
            cache,
            transport,
            clock,
            workers,
        })
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    /// Seed for the in-context draw of one comparison.
    pub fn comparison_seed(seed: u64, class_index: usize, neighbor_index: usize) -> u64 {
        mix_seed(mix_seed(seed, class_index as u64), neighbor_index as u64)
    }

    /// The request sent for one (class, neighbor) comparison.
    pub fn request_for(
        &self,
        catalog: &ClassCatalog,
        class_id: &str,
        similar_id: &str,
        neighbor_index: usize,
        seed: u64,
    ) -> Result<LlmRequest, GenError> {
        let class_index = catalog
            .position(class_id)
            .ok_or_else(|| CatalogError::UnknownClass(class_id.to_string()))?;
        let target = catalog.class(class_id)?;
        let similar = catalog.class(similar_id)?;
        let examples = sample_incontext(&self.pool, Self::comparison_seed(seed, class_index, neighbor_index))?;
        build_query(&target.name, &similar.name, &examples, &self.config)
    }

    pub fn generate_for_class(
        &self,
        class_id: &str,
        map: &SimilarityMap,
        catalog: &ClassCatalog,
        seed: u64,
    ) -> Result<Generated, GenError> {
        let neighbors = map
            .neighbors_of(class_id)
            .ok_or_else(|| GenError::NoNeighbors(class_id.to_string()))?;
        let results: Vec<(String, Result<Vec<String>, GenError>)> = self.workers.install(|| {
            neighbors
                .par_iter()
                .enumerate()
                .map(|(j, nb)| {
                    let lines = self.request_for(catalog, class_id, &nb.id, j, seed).and_then(|req| {
                        let text = call_llm(&req, &self.cache, self.transport.as_ref(), &self.retry, self.clock)?;
                        parse_response(&text)
                    });
                    (nb.id.clone(), lines)
                })
                .collect()
        });
        let mut lists = Vec::new();
        let mut failures = Vec::new();
        for (similar, res) in results {
            match res {
                Ok(lines) => lists.push((similar, lines)),
                Err(e) => failures.push(ComparisonFailure {
                    similar_class: similar,
                    error: e.to_string(),
                }),
            }
        }
        if lists.is_empty() && !failures.is_empty() {
            return Err(GenError::AllComparisonsFailed {
                class_id: class_id.to_string(),
                first: failures[0].error.clone(),
            });
        }
        Ok(Generated {
            set: DescriptorSet {
                class_id: class_id.to_string(),
                generation_meta: GenerationMeta {
                    model_id: self.config.model_id.clone(),
                    timestamp: self.clock.timestamp(),
                    n_used: lists.len(),
                },
                descriptors: merge_descriptors(&lists, self.config.dedup),
            },
            failures,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ClassEntry, Neighbor};
    use std::collections::{BTreeMap, HashMap};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    fn pool() -> Vec<InContextExample> {
        bundled_pool()
    }

    #[test]
    fn bundled_pool_has_ten_valid_examples() {
        let p = pool();
        assert_eq!(p.len(), POOL_SIZE);
        assert!(p.iter().all(|e| e.validate().is_ok()));
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        let p = pool();
        for seed in 0..200 {
            let a = sample_incontext(&p, seed).unwrap();
            let b = sample_incontext(&p, seed).unwrap();
            assert_eq!(a, b);
            assert_ne!(a[0], a[1]);
        }
        assert_eq!(sample_incontext(&p[..9], 0), Err(GenError::PoolSizeMismatch(9)));
    }

    #[test]
    fn sampling_is_uniform_over_pairs() {
        let p = pool();
        let names: HashMap<String, usize> = p.iter().enumerate().map(|(i, e)| (e.target_class.clone(), i)).collect();
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        let trials = 10_000;
        for seed in 0..trials {
            let [a, b] = sample_incontext(&p, seed).unwrap();
            let (i, j) = (names[&a.target_class], names[&b.target_class]);
            *counts.entry((i.min(j), i.max(j))).or_default() += 1;
        }
        assert_eq!(counts.len(), 45);
        for (&pair, &c) in &counts {
            let f = c as f64 / trials as f64;
            assert!((f - 1.0 / 45.0).abs() <= 0.01, "{pair:?}: {f}");
        }
        // chi-square over 44 degrees of freedom; 99.9th percentile is ~78.7
        let expected = trials as f64 / 45.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 78.7, "chi2 = {chi2}");
    }

    #[test]
    fn query_shape() {
        let p = pool();
        let ex = [p[0].clone(), p[1].clone()];
        let cfg = GenerationConfig::default();
        let req = build_query("Golden Retriever", "Labrador Retriever", &ex, &cfg).unwrap();
        assert_eq!(req.messages.len(), 5);
        let last = req.messages.last().unwrap();
        assert_eq!(last.role, Role::User);
        assert_eq!(
            last.content,
            "What are useful features for distinguishing a Golden Retriever from a Labrador Retriever in the photo?"
        );
        let roles: Vec<Role> = req.messages.iter().map(|m| m.role).collect();
        assert_eq!(roles, [Role::User, Role::Assistant, Role::User, Role::Assistant, Role::User]);
        assert!(req.messages[1].content.starts_with(
            "There are several useful visual features to tell the photo is a Golden Retriever, not a Labrador Retriever."
        ));
        assert_eq!(req.temperature, 0.7);
        assert_eq!(req.max_tokens, 512);
        assert_eq!(build_query("oak", "oak", &ex, &cfg), Err(GenError::SameClass("oak".into())));
    }

    #[test]
    fn example_with_three_lines_renders_three_bullets() {
        let ex = InContextExample {
            target_class: "A".into(),
            similar_class: "B".into(),
            answer_lines: vec!["x".into(), "y".into(), "z".into()],
        };
        let req = build_query("C", "D", &[ex.clone(), pool()[3].clone()], &GenerationConfig::default()).unwrap();
        let bullets = req.messages[1].content.lines().filter(|l| l.starts_with("- ")).count();
        assert_eq!(bullets, 3);
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_response("- has golden fur\n- has a broader head").unwrap(),
            ["has golden fur", "has a broader head"]
        );
        assert_eq!(parse_response("1. longer coat\n2. longer coat").unwrap(), ["longer coat", "longer coat"]);
        assert_eq!(parse_response(""), Err(GenError::EmptyParse));
        let text = format!(
            "There are several useful visual features to tell the photo is a Cat, not a Dog.\n\n* which has whiskers.\n• 3) pointed ears\n- {}",
            "x".repeat(201)
        );
        assert_eq!(parse_response(&text).unwrap(), ["has whiskers", "pointed ears"]);
        // sentence-style answers pass through
        assert_eq!(parse_response("Has a striped tail.").unwrap(), ["Has a striped tail"]);
        assert_eq!(parse_response("- 1.5x longer ears").unwrap(), ["1.5x longer ears"]);
    }

    #[test]
    fn merge_dedups_and_keeps_first_source() {
        let lists = vec![
            ("n1".to_string(), vec!["has golden fur".to_string()]),
            ("n2".to_string(), vec!["Has Golden Fur ".to_string(), "is larger".to_string()]),
        ];
        let merged = merge_descriptors(&lists, true);
        assert_eq!(
            merged,
            vec![
                Descriptor {
                    text: "has golden fur".into(),
                    source: "n1".into()
                },
                Descriptor {
                    text: "is larger".into(),
                    source: "n2".into()
                },
            ]
        );
        assert_eq!(merge_descriptors(&lists, false).len(), 3);
    }

    struct ByQuestion {
        answers: HashMap<String, Result<String, TransportFailure>>,
        calls: AtomicUsize,
    }

    impl Transport for ByQuestion {
        fn complete(&self, r: &LlmRequest) -> Result<String, TransportFailure> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.answers
                .get(r.question())
                .cloned()
                .unwrap_or(Err(TransportFailure::Rejected("unknown".into())))
        }
    }

    fn setup() -> (ClassCatalog, SimilarityMap) {
        let cat = ClassCatalog::new(
            "d",
            ["gold", "lab", "poodle"]
                .iter()
                .map(|s| ClassEntry {
                    id: s.to_string(),
                    name: s.to_uppercase(),
                })
                .collect(),
        )
        .unwrap();
        let mut neighbors = BTreeMap::new();
        neighbors.insert(
            "gold".to_string(),
            vec![
                Neighbor {
                    id: "lab".into(),
                    score: 0.9,
                },
                Neighbor {
                    id: "poodle".into(),
                    score: 0.5,
                },
            ],
        );
        (cat, SimilarityMap { n: 2, neighbors })
    }

    fn generator(t: Arc<dyn Transport>) -> Generator {
        Generator::new(
            pool(),
            GenerationConfig::default(),
            RetryPolicy {
                max_retries: 3,
                base_delay: Duration::ZERO,
            },
            Arc::new(ResponseCache::in_memory()),
            t,
            Clock::Fixed(1_700_000_000),
        )
        .unwrap()
    }

    #[test]
    fn generation_merges_with_provenance() {
        let (cat, map) = setup();
        let t = Arc::new(ByQuestion {
            answers: [
                (question("GOLD", "LAB"), Ok("- has golden fur".to_string())),
                (question("GOLD", "POODLE"), Ok("- has golden fur\n- is larger".to_string())),
            ]
            .into_iter()
            .collect(),
            calls: AtomicUsize::new(0),
        });
        let g = generator(t).generate_for_class("gold", &map, &cat, 0).unwrap();
        assert!(!g.partial());
        assert_eq!(g.set.descriptors.len(), 2);
        assert_eq!(g.set.descriptors[0].source, "lab");
        assert_eq!(g.set.descriptors[1].source, "poodle");
        assert_eq!(g.set.generation_meta.n_used, 2);
        assert!(g.set.provenance_valid(&map));
    }

    #[test]
    fn partial_and_total_failure() {
        let (cat, map) = setup();
        let t = Arc::new(ByQuestion {
            answers: [(question("GOLD", "LAB"), Ok("- has golden fur".to_string()))].into_iter().collect(),
            calls: AtomicUsize::new(0),
        });
        let g = generator(t).generate_for_class("gold", &map, &cat, 0).unwrap();
        assert!(g.partial());
        assert_eq!(g.failures[0].similar_class, "poodle");
        assert_eq!(g.set.generation_meta.n_used, 1);

        let t = Arc::new(ByQuestion {
            answers: HashMap::new(),
            calls: AtomicUsize::new(0),
        });
        match generator(t).generate_for_class("gold", &map, &cat, 0) {
            Err(GenError::AllComparisonsFailed { class_id, .. }) => assert_eq!(class_id, "gold"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_generation_is_byte_identical() {
        let (cat, map) = setup();
        let replay = ReplayTransport::new([
            ReplayEntry {
                question: question("GOLD", "LAB"),
                response: "There are several useful visual features to tell the photo is a GOLD, not a LAB.\n- has golden fur\n- has feathered tail".into(),
            },
            ReplayEntry {
                question: question("GOLD", "POODLE"),
                response: "1. has straight fur\n2. Has golden fur".into(),
            },
        ]);
        let run = || {
            let g = generator(Arc::new(replay.clone())).generate_for_class("gold", &map, &cat, 7).unwrap();
            serde_json::to_vec(&g.set).unwrap()
        };
        let first = run();
        assert_eq!(first, run());
        let set: DescriptorSet = serde_json::from_slice(&first).unwrap();
        assert_eq!(set.texts(), ["has golden fur", "has feathered tail", "has straight fur"]);
    }
}
