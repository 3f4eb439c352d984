//! Accuracy metrics, experiment protocols, reports and explanations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::ClassCatalog;
use crate::classifier::{self, BankMode, ClassifyError, DescriptorScore, Prediction};
use crate::embedding::{image_class, EmbeddingMatrix};
use crate::filter::{self, FilterError, FilterPolicy, Shots};
use crate::store::AssetBundle;
use crate::util::{mix_seed, round6, write_atomic, Clock};

pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_SHOT_GRID: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const DEFAULT_TOP_M: usize = 2;
const TOP5: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no label for image {0:?}")]
    MissingLabel(String),
    #[error("required asset missing: {0}")]
    AssetMissing(String),
    #[error("prediction for {0:?} carries no per-descriptor trace")]
    TraceMissing(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Baseline,
    Descriptors,
    DescriptorOnly,
    EqualCountRandom,
    EqualCountFiltered,
    FewShotSweep,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::Baseline,
        Protocol::Descriptors,
        Protocol::DescriptorOnly,
        Protocol::EqualCountRandom,
        Protocol::EqualCountFiltered,
        Protocol::FewShotSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Baseline => "baseline",
            Protocol::Descriptors => "descriptors",
            Protocol::DescriptorOnly => "descriptor_only",
            Protocol::EqualCountRandom => "equal_count_random",
            Protocol::EqualCountFiltered => "equal_count_filtered",
            Protocol::FewShotSweep => "few_shot_sweep",
        }
    }

    /// Whether runs draw random numbers, and so repeat over seeds.
    pub fn is_randomized(self) -> bool {
        matches!(
            self,
            Protocol::EqualCountRandom | Protocol::EqualCountFiltered | Protocol::FewShotSweep
        )
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown protocol {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub protocol: Protocol,
    pub repeats: usize,
    /// First seed; repeats use `seed..seed + repeats`.
    pub seed: u64,
    pub shot_grid: Vec<usize>,
    /// Descriptor count for the equal-count protocols.
    pub k: usize,
    /// Neighbor count used to generate the descriptors, recorded only.
    pub n: usize,
    /// Filtering settings; `k`, `shots` and `rng_seed` are overridden where
    /// the protocol sets them.
    pub policy: FilterPolicy,
}

impl ExperimentPlan {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            repeats: if protocol.is_randomized() { DEFAULT_REPEATS } else { 1 },
            seed: 0,
            shot_grid: DEFAULT_SHOT_GRID.to_vec(),
            k: 5,
            n: crate::catalog::DEFAULT_NEIGHBORS,
            policy: FilterPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.repeats == 0 {
            return Err(EvalError::InvalidPlan("repeats must be >= 1".into()));
        }
        if self.shot_grid.is_empty() || self.shot_grid.contains(&0) || self.shot_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidPlan("shot grid must be positive and strictly increasing".into()));
        }
        if self.k == 0 {
            return Err(EvalError::InvalidPlan("k must be >= 1".into()));
        }
        self.policy.validate()?;
        Ok(())
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub support: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub per_class: BTreeMap<String, ClassAccuracy>,
}

/// Labels from `class_id/filename` keys.
pub fn labels_from_keys(images: &EmbeddingMatrix) -> BTreeMap<String, String> {
    images
        .keys()
        .iter()
        .filter_map(|k| image_class(k).map(|c| (k.clone(), c.to_string())))
        .collect()
}

/// Top-1 and top-5 accuracy; per-class top-1 keyed by true class.
pub fn accuracy(predictions: &[Prediction], labels: &BTreeMap<String, String>) -> Result<Accuracy, EvalError> {
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in predictions {
        let label = labels
            .get(&p.image_key)
            .ok_or_else(|| EvalError::MissingLabel(p.image_key.clone()))?;
        let rank = p.rank_of(label);
        let top1 = rank == Some(0);
        hit1 += usize::from(top1);
        hit5 += usize::from(rank.is_some_and(|r| r < TOP5));
        let e = per.entry(label.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(top1);
    }
    let n = predictions.len().max(1) as f64;
    Ok(Accuracy {
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
        per_class: per
            .into_iter()
            .map(|(c, (support, hits))| {
                (
                    c,
                    ClassAccuracy {
                        support,
                        top1: hits as f64 / support as f64,
                    },
                )
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset_id: String,
    pub protocol: Protocol,
    /// Row label, e.g. `plain` or `descriptor_ensemble_filtered`.
    pub mode: String,
    pub policy: Option<FilterPolicy>,
    pub shots: Option<Shots>,
    pub k: Option<usize>,
    pub top1: f64,
    pub top5: f64,
    pub per_class: BTreeMap<String, ClassAccuracy>,
    pub per_seed: Vec<SeedResult>,
    pub seeds_used: Vec<u64>,
    /// Set when the row could not run, e.g. more shots than images.
    pub skipped: bool,
    pub excluded_classes: Vec<String>,
    pub runtime_s: f64,
}

/// What a protocol run consumes. Descriptor maps hold texts per class:
/// `descriptors` the full sets, `filtered` the kept sets of a filter run.
#[derive(Clone, Copy)]
pub struct ProtocolInputs<'a> {
    pub assets: &'a AssetBundle,
    pub descriptors: Option<&'a BTreeMap<String, Vec<String>>>,
    pub filtered: Option<&'a BTreeMap<String, Vec<String>>>,
}

struct Row {
    mode: String,
    policy: Option<FilterPolicy>,
    shots: Option<Shots>,
    k: Option<usize>,
}

impl Row {
    fn new(mode: &str) -> Self {
        Self {
            mode: mode.to_string(),
            policy: None,
            shots: None,
            k: None,
        }
    }
}

fn evaluate(
    assets: &AssetBundle,
    labels: &BTreeMap<String, String>,
    descriptors: &BTreeMap<String, Vec<String>>,
    mode: BankMode,
) -> Result<(Accuracy, Vec<String>), EvalError> {
    let bank = classifier::build_bank(&assets.catalog, descriptors, &assets.texts, mode)?;
    let preds = classifier::classify_all(&assets.images, &bank, false)?;
    Ok((accuracy(&preds, labels)?, bank.excluded().to_vec()))
}

/// Averages per-seed accuracies into one report.
fn combine(
    assets: &AssetBundle,
    protocol: Protocol,
    row: Row,
    runs: Vec<(Option<u64>, Accuracy)>,
    excluded: Vec<String>,
    runtime_s: f64,
) -> EvaluationReport {
    let n = runs.len() as f64;
    let top1 = runs.iter().map(|(_, a)| a.top1).sum::<f64>() / n;
    let top5 = runs.iter().map(|(_, a)| a.top5).sum::<f64>() / n;
    let mut per_class: BTreeMap<String, ClassAccuracy> = BTreeMap::new();
    for (_, a) in &runs {
        for (c, ca) in &a.per_class {
            let e = per_class.entry(c.clone()).or_insert(ClassAccuracy {
                support: ca.support,
                top1: 0.0,
            });
            e.top1 += ca.top1 / n;
        }
    }
    let seeds_used: Vec<u64> = runs.iter().filter_map(|(s, _)| *s).collect();
    let per_seed = runs
        .iter()
        .filter_map(|(s, a)| {
            s.map(|seed| SeedResult {
                seed,
                top1: a.top1,
                top5: a.top5,
            })
        })
        .collect();
    EvaluationReport {
        dataset_id: assets.dataset_id.clone(),
        protocol,
        mode: row.mode,
        policy: row.policy,
        shots: row.shots,
        k: row.k,
        top1,
        top5,
        per_class,
        per_seed,
        seeds_used,
        skipped: false,
        excluded_classes: excluded,
        runtime_s,
    }
}

fn skipped(assets: &AssetBundle, protocol: Protocol, row: Row) -> EvaluationReport {
    EvaluationReport {
        dataset_id: assets.dataset_id.clone(),
        protocol,
        mode: row.mode,
        policy: row.policy,
        shots: row.shots,
        k: row.k,
        top1: 0.0,
        top5: 0.0,
        per_class: BTreeMap::new(),
        per_seed: Vec::new(),
        seeds_used: Vec::new(),
        skipped: true,
        excluded_classes: Vec::new(),
        runtime_s: 0.0,
    }
}

fn need<'a>(m: Option<&'a BTreeMap<String, Vec<String>>>, what: &str) -> Result<&'a BTreeMap<String, Vec<String>>, EvalError> {
    m.ok_or_else(|| EvalError::AssetMissing(what.to_string()))
}

fn filtered_kept(
    assets: &AssetBundle,
    descriptors: &BTreeMap<String, Vec<String>>,
    policy: &FilterPolicy,
) -> Result<BTreeMap<String, Vec<String>>, EvalError> {
    let run = filter::filter_dataset(&assets.catalog, descriptors, &assets.texts, assets.filter_images(), policy)?;
    Ok(run.kept_by_class())
}

/// Smallest per-class image count among the images used for filtering.
pub fn min_class_support(assets: &AssetBundle) -> usize {
    let groups = assets.filter_images().group_by_class();
    assets
        .catalog
        .classes()
        .iter()
        .map(|c| groups.get(&c.id).map_or(0, Vec::len))
        .min()
        .unwrap_or(0)
}

/// Runs one protocol and returns its report rows.
pub fn run_protocol(plan: &ExperimentPlan, inputs: ProtocolInputs<'_>, clock: Clock) -> Result<Vec<EvaluationReport>, EvalError> {
    plan.validate()?;
    let assets = inputs.assets;
    let labels = labels_from_keys(&assets.images);
    let empty = BTreeMap::new();
    let p = plan.protocol;
    let mut out = Vec::new();
    match p {
        Protocol::Baseline => {
            let sw = clock.stopwatch();
            let (acc, _) = evaluate(assets, &labels, &empty, BankMode::Plain)?;
            out.push(combine(assets, p, Row::new("plain"), vec![(None, acc)], Vec::new(), sw.elapsed_s()));
        }
        Protocol::Descriptors => {
            if inputs.descriptors.is_none() && inputs.filtered.is_none() {
                return Err(EvalError::AssetMissing("descriptor sets or filter outcomes".into()));
            }
            let sw = clock.stopwatch();
            let (acc, _) = evaluate(assets, &labels, &empty, BankMode::Plain)?;
            out.push(combine(assets, p, Row::new("plain"), vec![(None, acc)], Vec::new(), sw.elapsed_s()));
            if let Some(ds) = inputs.descriptors {
                let sw = clock.stopwatch();
                let (acc, _) = evaluate(assets, &labels, ds, BankMode::DescriptorEnsemble)?;
                let row = Row::new("descriptor_ensemble");
                out.push(combine(assets, p, row, vec![(None, acc)], Vec::new(), sw.elapsed_s()));
            }
            if let Some(kept) = inputs.filtered {
                let sw = clock.stopwatch();
                let (acc, _) = evaluate(assets, &labels, kept, BankMode::DescriptorEnsemble)?;
                let row = Row::new("descriptor_ensemble_filtered");
                out.push(combine(assets, p, row, vec![(None, acc)], Vec::new(), sw.elapsed_s()));
            }
        }
        Protocol::DescriptorOnly => {
            let source = inputs
                .filtered
                .or(inputs.descriptors)
                .ok_or_else(|| EvalError::AssetMissing("descriptor sets or filter outcomes".into()))?;
            let sw = clock.stopwatch();
            let (acc, excluded) = evaluate(assets, &labels, source, BankMode::DescriptorOnly)?;
            out.push(combine(assets, p, Row::new("descriptor_only"), vec![(None, acc)], excluded, sw.elapsed_s()));
        }
        Protocol::EqualCountRandom => {
            let ds = need(inputs.descriptors, "descriptor sets")?;
            let sw = clock.stopwatch();
            let mut runs = Vec::new();
            for seed in plan.seeds() {
                let picked: BTreeMap<String, Vec<String>> = assets
                    .catalog
                    .classes()
                    .iter()
                    .enumerate()
                    .map(|(ci, c)| {
                        let all = ds.get(&c.id).map(Vec::as_slice).unwrap_or(&[]);
                        (c.id.clone(), classifier::random_select_k(all, plan.k, mix_seed(seed, ci as u64)))
                    })
                    .collect();
                let (acc, _) = evaluate(assets, &labels, &picked, BankMode::DescriptorEnsemble)?;
                runs.push((Some(seed), acc));
            }
            let row = Row {
                k: Some(plan.k),
                ..Row::new("random_k")
            };
            out.push(combine(assets, p, row, runs, Vec::new(), sw.elapsed_s()));
        }
        Protocol::EqualCountFiltered => {
            let ds = need(inputs.descriptors, "descriptor sets")?;
            let sw = clock.stopwatch();
            let mut runs = Vec::new();
            let mut policy = FilterPolicy {
                k: plan.k,
                ..plan.policy.clone()
            };
            for seed in plan.seeds() {
                policy.rng_seed = seed;
                let kept = filtered_kept(assets, ds, &policy)?;
                let (acc, _) = evaluate(assets, &labels, &kept, BankMode::DescriptorEnsemble)?;
                runs.push((Some(seed), acc));
            }
            let row = Row {
                shots: Some(policy.shots),
                k: Some(plan.k),
                policy: Some(FilterPolicy {
                    rng_seed: plan.seed,
                    ..policy
                }),
                ..Row::new("filtered_k")
            };
            out.push(combine(assets, p, row, runs, Vec::new(), sw.elapsed_s()));
        }
        Protocol::FewShotSweep => {
            let ds = need(inputs.descriptors, "descriptor sets")?;
            let available = min_class_support(assets);
            for &shots in &plan.shot_grid {
                let mut policy = FilterPolicy {
                    shots: Shots::Count(shots),
                    ..plan.policy.clone()
                };
                let row = Row {
                    shots: Some(policy.shots),
                    k: Some(policy.k),
                    policy: Some(FilterPolicy {
                        rng_seed: plan.seed,
                        ..policy.clone()
                    }),
                    ..Row::new("filtered")
                };
                if shots > available {
                    log::info!("skipping {shots}-shot row: only {available} images in the smallest class");
                    out.push(skipped(assets, p, row));
                    continue;
                }
                let sw = clock.stopwatch();
                let mut runs = Vec::new();
                for seed in plan.seeds() {
                    policy.rng_seed = seed;
                    let kept = filtered_kept(assets, ds, &policy)?;
                    let (acc, _) = evaluate(assets, &labels, &kept, BankMode::DescriptorEnsemble)?;
                    runs.push((Some(seed), acc));
                }
                out.push(combine(assets, p, row, runs, Vec::new(), sw.elapsed_s()));
            }
        }
    }
    Ok(out)
}

/// One protocol's reports plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub dataset_id: String,
    pub protocol: Protocol,
    pub config: Option<Value>,
    pub reports: Vec<EvaluationReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

/// Rounds every non-integer number in `v` to 6 decimals.
pub fn round_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|x| serde_json::Number::from_f64(round6(x)))
            .map_or(Value::Null, Value::Number),
        Value::Array(a) => Value::Array(a.into_iter().map(round_floats).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_floats(v))).collect()),
        other => other,
    }
}

/// Deterministic JSON: sorted keys, 6-decimal floats, trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = round_floats(serde_json::to_value(value).expect("serializable"));
    let mut out = serde_json::to_vec_pretty(&v).expect("serializable");
    out.push(b'\n');
    out
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

pub fn report_markdown(doc: &ReportDocument) -> String {
    let mut s = format!("# {} / {}\n\n", doc.dataset_id, doc.protocol);
    s.push_str("| mode | shots | k | top-1 | top-5 | seeds |\n| --- | --- | --- | --- | --- | --- |\n");
    let dash = || "-".to_string();
    for r in &doc.reports {
        let shots = r.shots.map_or_else(dash, |x| x.to_string());
        let k = r.k.map_or_else(dash, |x| x.to_string());
        let (t1, t5, seeds) = if r.skipped {
            (dash(), dash(), "skipped".to_string())
        } else {
            let seeds = if r.seeds_used.is_empty() {
                dash()
            } else {
                r.seeds_used.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
            };
            (pct(r.top1), pct(r.top5), seeds)
        };
        s.push_str(&format!("| {} | {shots} | {k} | {t1} | {t5} | {seeds} |\n", r.mode));
    }
    if doc.reports.iter().any(|r| r.per_seed.len() > 1) {
        s.push_str("\n## Per seed\n\n| mode | shots | seed | top-1 | top-5 |\n| --- | --- | --- | --- | --- |\n");
        for r in doc.reports.iter().filter(|r| r.per_seed.len() > 1) {
            let shots = r.shots.map_or_else(dash, |x| x.to_string());
            for ps in &r.per_seed {
                s.push_str(&format!(
                    "| {} | {shots} | {} | {} | {} |\n",
                    r.mode,
                    ps.seed,
                    pct(ps.top1),
                    pct(ps.top5)
                ));
            }
        }
    }
    for r in doc.reports.iter().filter(|r| !r.per_class.is_empty()) {
        let shots = r.shots.map(|x| format!(", {x} shots")).unwrap_or_default();
        s.push_str(&format!(
            "\n## Per class: {}{shots}\n\n| class | support | top-1 |\n| --- | --- | --- |\n",
            r.mode
        ));
        for (c, ca) in &r.per_class {
            s.push_str(&format!("| {c} | {} | {} |\n", ca.support, pct(ca.top1)));
        }
    }
    if let Some(cfg) = &doc.config {
        let json = String::from_utf8(to_canonical_json(cfg)).expect("utf-8");
        s.push_str(&format!("\n## Config\n\n```json\n{json}```\n"));
    }
    s
}

pub fn render_report(doc: &ReportDocument, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => to_canonical_json(doc),
        ReportFormat::Markdown => report_markdown(doc).into_bytes(),
    }
}

/// Writes `<dataset>_<protocol>_<timestamp>.<ext>` under `out_dir`.
pub fn emit_report(doc: &ReportDocument, format: ReportFormat, out_dir: &Path, clock: Clock) -> Result<PathBuf, EvalError> {
    let name = format!(
        "{}_{}_{}.{}",
        crate::util::file_safe(&doc.dataset_id),
        doc.protocol,
        clock.file_stamp(),
        format.extension()
    );
    let path = out_dir.join(name);
    write_atomic(&path, &render_report(doc, format)).map_err(|source| EvalError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedClass {
    pub class_id: String,
    pub name: String,
    /// Mean of the rows; the class score used for ranking.
    pub score: f64,
    /// Rows sorted by score, ties in bank order.
    pub rows: Vec<DescriptorScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_key: String,
    pub decision: String,
    pub truth: Option<String>,
    pub classes: Vec<ExplainedClass>,
}

/// Per-descriptor breakdown of the top `top_m` classes of a prediction made
/// with `explain = true`.
pub fn explain(prediction: &Prediction, catalog: &ClassCatalog, top_m: usize) -> Result<Explanation, EvalError> {
    let traces = prediction
        .per_descriptor
        .as_ref()
        .ok_or_else(|| EvalError::TraceMissing(prediction.image_key.clone()))?;
    let mut classes = Vec::new();
    for c in prediction.ranked.iter().take(top_m) {
        let rows = traces
            .get(&c.class_id)
            .ok_or_else(|| EvalError::TraceMissing(prediction.image_key.clone()))?;
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let rows = crate::vector::top_k(&scores, scores.len())
            .into_iter()
            .map(|s| rows[s.index].clone())
            .collect();
        let name = catalog.class(&c.class_id).map_or_else(|_| c.class_id.clone(), |e| e.name.clone());
        classes.push(ExplainedClass {
            class_id: c.class_id.clone(),
            name,
            score: c.score,
            rows,
        });
    }
    Ok(Explanation {
        image_key: prediction.image_key.clone(),
        decision: prediction.top1().to_string(),
        truth: image_class(&prediction.image_key).map(str::to_string),
        classes,
    })
}

pub fn explanation_markdown(e: &Explanation) -> String {
    let mut s = format!("# {}\n\nDecision: **{}**", e.image_key, e.decision);
    if let Some(t) = &e.truth {
        s.push_str(&format!(" (label: {t})"));
    }
    s.push('\n');
    for c in &e.classes {
        s.push_str(&format!(
            "\n## {} ({})\n\nMean score: {:.6}\n\n| descriptor | score |\n| --- | --- |\n",
            c.name, c.class_id, c.score
        ));
        for r in &c.rows {
            s.push_str(&format!("| {} | {:.6} |\n", r.descriptor.replace('|', "\\|"), r.score));
        }
    }
    s
}
