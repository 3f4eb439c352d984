//! Subcommands of the `compdesc` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use compdesc_core::catalog::{self, CatalogError, ClassText, SimilarityMap};
use compdesc_core::classifier::{self, BankMode, ClassifyError, PredictionRecord};
use compdesc_core::descriptor::{
    self, DescriptorBundle, DescriptorSet, Generator, HttpTransport, OfflineTransport, ReplayTransport, ResponseCache,
    RetryPolicy, Transport,
};
use compdesc_core::embedding::image_class;
use compdesc_core::eval::{self, EvalError, ExperimentPlan, Explanation, Protocol, ProtocolInputs, ReportDocument, ReportFormat};
use compdesc_core::filter::{self, DiscardReason, FilterBundle, FilterError, Shots, TextMode};
use compdesc_core::descriptor::llm::ENV_TOKEN;
use compdesc_core::fixture::{Fixture, FixtureSpec};
use compdesc_core::store::{self, AssetBundle, StoreError};
use compdesc_core::util::{file_safe, write_atomic};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use config::RunConfig;

// Like println!, but a closed stdout (e.g. piped into `head`) is not fatal.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

/// A precondition or usage problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn is_usage_store(e: &StoreError) -> bool {
    match e.root() {
        StoreError::AssetMissing(_) => true,
        StoreError::Io { source, .. } => source.kind() == ErrorKind::NotFound,
        StoreError::Catalog(c) => is_usage_catalog(c),
        _ => false,
    }
}

fn is_usage_catalog(e: &CatalogError) -> bool {
    matches!(e, CatalogError::NTooLarge { .. })
}

fn is_usage_filter(e: &FilterError) -> bool {
    matches!(e, FilterError::MissingTextSource(_) | FilterError::InvalidPolicy(_))
}

fn is_usage_classify(e: &ClassifyError) -> bool {
    matches!(e, ClassifyError::MissingTextSource(_))
}

/// 2 for usage and precondition errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let usage = if cause.is::<UsageError>() {
            true
        } else if let Some(e) = cause.downcast_ref::<StoreError>() {
            is_usage_store(e)
        } else if let Some(e) = cause.downcast_ref::<CatalogError>() {
            is_usage_catalog(e)
        } else if let Some(e) = cause.downcast_ref::<FilterError>() {
            is_usage_filter(e)
        } else if let Some(e) = cause.downcast_ref::<ClassifyError>() {
            is_usage_classify(e)
        } else if let Some(e) = cause.downcast_ref::<EvalError>() {
            match e {
                EvalError::AssetMissing(_) | EvalError::InvalidPlan(_) => true,
                EvalError::Filter(f) => is_usage_filter(f),
                EvalError::Classify(c) => is_usage_classify(c),
                _ => false,
            }
        } else {
            false
        };
        if usage {
            return 2;
        }
    }
    1
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unrecognized value {s:?}"))
}

#[derive(Parser, Debug)]
#[command(name = "compdesc", version, about = "Comparative descriptor pipeline for zero-shot image classification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// JSON config file, or any emitted artifact (its embedded config is used)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset manifest
    #[arg(short = 'm', long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Base RNG seed [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for classification and filtering [default: available cores]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Pin all timestamps to this Unix time [default: $SOURCE_DATE_EPOCH, else wall clock]
    #[arg(long, global = true, value_name = "UNIX_SECONDS")]
    pub fixed_clock: Option<i64>,
}

impl GlobalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.manifest, self.manifest.clone());
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        set(&mut cfg.jobs, self.jobs);
        set(&mut cfg.fixed_clock, self.fixed_clock);
    }
}

fn set<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn assign<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mine the most similar classes of every class
    Similar(SimilarArgs),
    /// Ask the LLM for comparative descriptors (resumable)
    Generate(GenerateArgs),
    /// Filter descriptors against few-shot mean image features
    Filter(FilterArgs),
    /// Classify every image and write ranked predictions as JSON lines
    Classify(ClassifyArgs),
    /// Run an evaluation protocol and write json and markdown reports
    Eval(EvalArgs),
    /// Per-descriptor breakdown of one image's top classes
    Explain(ExplainArgs),
    /// Write a synthetic dataset (manifest, embeddings, replay transcript)
    Fixture(FixtureArgs),
}

#[derive(Args, Debug)]
pub struct SimilarArgs {
    /// Neighbors per class [default: 10]
    #[arg(short = 'n', long = "n")]
    pub n: Option<usize>,
    /// Class text to compare: prompt or name [default: prompt]
    #[arg(long, value_parser = parse_enum::<ClassText>)]
    pub class_text: Option<ClassText>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Similarity map [default: <out>/<dataset>_similar.json]
    #[arg(long, value_name = "FILE")]
    pub similar: Option<PathBuf>,
    /// Chat-completions endpoint [default: $COMPDESC_LLM_URL]
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model id [default: gpt-4o]
    #[arg(long)]
    pub model: Option<String>,
    /// Sampling temperature [default: 0.7]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Completion token limit [default: 512]
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Concurrent LLM requests [default: 4]
    #[arg(long)]
    pub jobs_llm: Option<usize>,
    /// Retries on transient failures [default: 3]
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Request timeout in seconds [default: 60]
    #[arg(long)]
    pub timeout: Option<u64>,
    /// Keep duplicate descriptors across comparisons
    #[arg(long)]
    pub no_dedup: bool,
    /// Response cache [default: $COMPDESC_CACHE, else <out>/llm_cache.jsonl]
    #[arg(long, value_name = "FILE")]
    pub cache: Option<PathBuf>,
    /// Never touch the network; every request must hit the cache
    #[arg(long)]
    pub offline: bool,
    /// Answer requests from a recorded JSON-lines transcript
    #[arg(long, value_name = "FILE")]
    pub replay: Option<PathBuf>,
    /// Regenerate classes that already have output files
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PolicyArgs {
    /// Descriptors kept per class [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Images per class in the mean feature, a count or "all" [default: all]
    #[arg(long)]
    pub shots: Option<Shots>,
    /// Cap on the per-class lower bound [default: 0.3]
    #[arg(long)]
    pub bound_cap: Option<f64>,
    /// Descriptor text: descriptor_prompt or bare_descriptor [default: descriptor_prompt]
    #[arg(long, value_parser = parse_enum::<TextMode>)]
    pub text_mode: Option<TextMode>,
}

impl PolicyArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        assign(&mut cfg.k, self.k);
        assign(&mut cfg.shots, self.shots);
        assign(&mut cfg.bound_cap, self.bound_cap);
        assign(&mut cfg.text_mode, self.text_mode);
    }
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// Descriptor bundle [default: <out>/<dataset>_descriptors.json]
    #[arg(long, value_name = "FILE")]
    pub descriptors: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Args, Debug)]
pub struct BankArgs {
    /// Descriptor bundle (full sets)
    #[arg(long, value_name = "FILE")]
    pub descriptors: Option<PathBuf>,
    /// Filter bundle (kept sets); preferred over --descriptors
    #[arg(long, value_name = "FILE")]
    pub filtered: Option<PathBuf>,
    /// plain, descriptor_ensemble or descriptor_only [default: descriptor_ensemble]
    #[arg(long, value_parser = parse_enum::<BankMode>)]
    pub mode: Option<BankMode>,
}

impl BankArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.descriptors, self.descriptors.clone());
        set(&mut cfg.filtered, self.filtered.clone());
        assign(&mut cfg.mode, self.mode);
    }
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub bank: BankArgs,
    /// Record per-descriptor scores of the top classes
    #[arg(long)]
    pub explain: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// baseline, descriptors, descriptor_only, equal_count_random,
    /// equal_count_filtered or few_shot_sweep [default: baseline]
    #[arg(long)]
    pub protocol: Option<Protocol>,
    /// Descriptor bundle (full sets)
    #[arg(long, value_name = "FILE")]
    pub descriptors: Option<PathBuf>,
    /// Filter bundle (kept sets)
    #[arg(long, value_name = "FILE")]
    pub filtered: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Seeds for randomized protocols [default: 5 when randomized, else 1]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Shot values of the sweep [default: 1,2,4,8,16,32,64]
    #[arg(long, value_delimiter = ',')]
    pub shot_grid: Option<Vec<usize>>,
    /// Neighbor count behind the descriptors, recorded only [default: 10]
    #[arg(short = 'n', long = "n")]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Image key, `class_id/filename`
    pub image_key: String,
    #[command(flatten)]
    pub bank: BankArgs,
}

#[derive(Args, Debug)]
pub struct FixtureArgs {
    /// Dataset id [default: synthetic]
    #[arg(long)]
    pub dataset: Option<String>,
    /// Number of classes [default: 20]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Embedding dimensions [default: 64]
    #[arg(long)]
    pub dims: Option<usize>,
    /// Evaluation images per class [default: 32]
    #[arg(long)]
    pub images_per_class: Option<usize>,
}

impl Command {
    fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Command::Similar(a) => {
                assign(&mut cfg.n, a.n);
                assign(&mut cfg.class_text, a.class_text);
            }
            Command::Generate(a) => {
                set(&mut cfg.similar, a.similar.clone());
                set(&mut cfg.llm.endpoint, a.endpoint.clone());
                assign(&mut cfg.llm.model, a.model.clone());
                assign(&mut cfg.llm.temperature, a.temperature);
                assign(&mut cfg.llm.max_tokens, a.max_tokens);
                assign(&mut cfg.llm.jobs, a.jobs_llm);
                assign(&mut cfg.llm.max_retries, a.max_retries);
                assign(&mut cfg.llm.timeout_s, a.timeout);
                if a.no_dedup {
                    cfg.llm.dedup = false;
                }
                set(&mut cfg.cache, a.cache.clone());
                cfg.offline |= a.offline;
                set(&mut cfg.replay, a.replay.clone());
                cfg.force |= a.force;
            }
            Command::Filter(a) => {
                set(&mut cfg.descriptors, a.descriptors.clone());
                a.policy.apply(cfg);
            }
            Command::Classify(a) => {
                a.bank.apply(cfg);
                cfg.explain |= a.explain;
            }
            Command::Eval(a) => {
                assign(&mut cfg.protocol, a.protocol);
                set(&mut cfg.descriptors, a.descriptors.clone());
                set(&mut cfg.filtered, a.filtered.clone());
                a.policy.apply(cfg);
                set(&mut cfg.repeats, a.repeats);
                assign(&mut cfg.shot_grid, a.shot_grid.clone());
                assign(&mut cfg.n, a.n);
            }
            Command::Explain(a) => a.bank.apply(cfg),
            Command::Fixture(_) => {}
        }
    }
}

/// Effective config: defaults, then `--config`, then flags, then environment
/// for values still unset.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    cli.global.apply(&mut cfg);
    cli.command.apply(&mut cfg);
    cfg.resolve_env().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(command: &Command, cfg: &RunConfig) -> anyhow::Result<()> {
    match command {
        Command::Similar(_) => cmd_similar(cfg).map(|_| ()),
        Command::Generate(_) => cmd_generate(cfg).map(|_| ()),
        Command::Filter(_) => cmd_filter(cfg).map(|_| ()),
        Command::Classify(_) => cmd_classify(cfg).map(|_| ()),
        Command::Eval(_) => cmd_eval(cfg).map(|_| ()),
        Command::Explain(a) => cmd_explain(cfg, &a.image_key).map(|_| ()),
        Command::Fixture(a) => cmd_fixture(cfg, a).map(|_| ()),
    }
}

// ---- artifacts ----

pub fn similar_path(cfg: &RunConfig, dataset_id: &str) -> PathBuf {
    cfg.out.join(format!("{}_similar.json", file_safe(dataset_id)))
}

pub fn descriptors_path(cfg: &RunConfig, dataset_id: &str) -> PathBuf {
    cfg.out.join(format!("{}_descriptors.json", file_safe(dataset_id)))
}

pub fn class_descriptors_path(cfg: &RunConfig, dataset_id: &str, class_id: &str) -> PathBuf {
    cfg.out
        .join("descriptors")
        .join(file_safe(dataset_id))
        .join(format!("{}.json", file_safe(class_id)))
}

pub fn filtered_path(cfg: &RunConfig, dataset_id: &str) -> PathBuf {
    cfg.out.join(format!("{}_filtered.json", file_safe(dataset_id)))
}

pub fn predictions_path(cfg: &RunConfig, dataset_id: &str) -> PathBuf {
    cfg.out
        .join(format!("{}_{}_predictions.jsonl", file_safe(dataset_id), cfg.mode))
}

pub fn explanation_path(cfg: &RunConfig, dataset_id: &str, image_key: &str) -> PathBuf {
    cfg.out
        .join("explain")
        .join(format!("{}_{}.json", file_safe(dataset_id), file_safe(image_key)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarFile {
    pub dataset_id: String,
    pub class_text: ClassText,
    #[serde(flatten)]
    pub map: SimilarityMap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterFile {
    pub dataset_id: String,
    #[serde(flatten)]
    pub bundle: FilterBundle,
    /// Classes whose filtering failed, with the error.
    #[serde(default)]
    pub errors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainFile {
    pub dataset_id: String,
    pub mode: BankMode,
    #[serde(flatten)]
    pub explanation: Explanation,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> anyhow::Error + '_ {
    move |e| anyhow!(e).context(format!("writing {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_atomic(path, bytes).map_err(io_err(path))
}

/// Writes `body` as canonical JSON with the effective config under `config`.
pub fn write_artifact<T: Serialize>(path: &Path, cfg: &RunConfig, body: &T) -> anyhow::Result<()> {
    let mut v = serde_json::to_value(body)?;
    let obj = v.as_object_mut().context("artifact body must be a JSON object")?;
    obj.insert("config".into(), cfg.to_value());
    write_bytes(path, &eval::to_canonical_json(&v))
}

/// Reads an artifact, ignoring its embedded config.
pub fn read_artifact<T: DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == ErrorKind::NotFound => {
            return Err(usage(format!("{what} not found: {}", path.display())))
        }
        Err(e) => return Err(anyhow!(e).context(format!("reading {}", path.display()))),
    };
    let mut v: Value = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(o) = v.as_object_mut() {
        o.remove("config");
    }
    serde_json::from_value(v).with_context(|| format!("{what} {}", path.display()))
}

fn config_block(cfg: &RunConfig) -> String {
    let json = String::from_utf8(eval::to_canonical_json(&cfg.to_value())).expect("utf-8");
    format!("\n## Config\n\n```json\n{json}```\n")
}

fn load_assets(cfg: &RunConfig) -> anyhow::Result<AssetBundle> {
    let m = cfg.manifest.as_ref().ok_or_else(|| usage("a dataset manifest is required (--manifest)"))?;
    let assets = store::resolve_assets(m).with_context(|| format!("loading dataset {}", m.display()))?;
    log::info!(
        "{}: {} classes, {} images, {} dims",
        assets.dataset_id,
        assets.catalog.len(),
        assets.images.len(),
        assets.dims()
    );
    Ok(assets)
}

fn check_dataset(what: &str, found: &str, assets: &AssetBundle) -> anyhow::Result<()> {
    if found != assets.dataset_id {
        return Err(usage(format!(
            "{what} belongs to dataset {found:?}, manifest is {:?}",
            assets.dataset_id
        )));
    }
    Ok(())
}

fn load_descriptor_lists(path: &Path, assets: &AssetBundle) -> anyhow::Result<BTreeMap<String, Vec<String>>> {
    let b: DescriptorBundle = read_artifact(path, "descriptor bundle")?;
    check_dataset("descriptor bundle", &b.dataset_id, assets)?;
    Ok(b.lists())
}

fn load_kept_lists(path: &Path, assets: &AssetBundle) -> anyhow::Result<BTreeMap<String, Vec<String>>> {
    let f: FilterFile = read_artifact(path, "filter bundle")?;
    check_dataset("filter bundle", &f.dataset_id, assets)?;
    Ok(f.bundle.kept_by_class())
}

/// Descriptor texts for a bank: kept sets if given, else full sets, else none.
fn bank_descriptors(cfg: &RunConfig, assets: &AssetBundle) -> anyhow::Result<BTreeMap<String, Vec<String>>> {
    if let Some(p) = &cfg.filtered {
        load_kept_lists(p, assets)
    } else if let Some(p) = &cfg.descriptors {
        load_descriptor_lists(p, assets)
    } else {
        if cfg.mode != BankMode::Plain {
            log::warn!("no descriptors given; every class uses its class prompt");
        }
        Ok(BTreeMap::new())
    }
}

// ---- commands ----

pub fn cmd_similar(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let assets = load_assets(cfg)?;
    let source = match cfg.class_text {
        ClassText::Prompt => &assets.texts.class_prompts,
        ClassText::Name => assets
            .texts
            .class_names
            .as_ref()
            .ok_or_else(|| usage("class-name embeddings are not in the manifest"))?,
    };
    let map = catalog::build_similarity_map(&assets.catalog, source, cfg.class_text, cfg.n)?.rounded();
    for class in assets.catalog.classes().iter() {
        let preview: Vec<String> = map
            .neighbors_of(&class.id)
            .unwrap_or(&[])
            .iter()
            .take(3)
            .map(|nb| format!("{} ({:.3})", nb.id, nb.score))
            .collect();
        say!("{}: {}", class.id, preview.join(", "));
    }
    let path = similar_path(cfg, &assets.dataset_id);
    let file = SimilarFile {
        dataset_id: assets.dataset_id.clone(),
        class_text: cfg.class_text,
        map,
    };
    write_artifact(&path, cfg, &file)?;
    say!("wrote {}", path.display());
    Ok(path)
}

fn transport(cfg: &RunConfig) -> anyhow::Result<Arc<dyn Transport>> {
    if let Some(p) = &cfg.replay {
        if !p.exists() {
            return Err(usage(format!("replay transcript not found: {}", p.display())));
        }
        let t = ReplayTransport::load(p).with_context(|| format!("loading {}", p.display()))?;
        return Ok(Arc::new(t));
    }
    if cfg.offline {
        return Ok(Arc::new(OfflineTransport));
    }
    match (&cfg.llm.endpoint, std::env::var(ENV_TOKEN)) {
        (Some(url), Ok(token)) => {
            let t = HttpTransport::new(url.clone(), token, Duration::from_secs(cfg.llm.timeout_s))
                .map_err(|e| anyhow!("{e}"))?;
            Ok(Arc::new(t))
        }
        (Some(_), Err(_)) => {
            log::warn!("{ENV_TOKEN} is not set; answering from the cache only");
            Ok(Arc::new(OfflineTransport))
        }
        (None, _) => {
            log::info!("no LLM endpoint configured; answering from the cache only");
            Ok(Arc::new(OfflineTransport))
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let assets = load_assets(cfg)?;
    let ds = assets.dataset_id.clone();
    let sim_path = cfg.similar.clone().unwrap_or_else(|| similar_path(cfg, &ds));
    let cfg = &RunConfig {
        similar: Some(sim_path.clone()),
        ..cfg.clone()
    };
    let sim: SimilarFile = read_artifact(&sim_path, "similarity map")?;
    check_dataset("similarity map", &sim.dataset_id, &assets)?;

    let cache_path = cfg.cache_path();
    if let Some(dir) = cache_path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let cache = ResponseCache::open(&cache_path).with_context(|| format!("opening cache {}", cache_path.display()))?;
    let retry = RetryPolicy {
        max_retries: cfg.llm.max_retries,
        ..RetryPolicy::default()
    };
    let generator = Generator::new(
        descriptor::bundled_pool(),
        cfg.generation(),
        retry,
        Arc::new(cache),
        transport(cfg)?,
        cfg.clock(),
    )?;

    let mut sets = Vec::new();
    let (mut generated, mut reused) = (0usize, 0usize);
    let mut failed = Vec::new();
    for class in assets.catalog.classes() {
        let path = class_descriptors_path(cfg, &ds, &class.id);
        if path.exists() && !cfg.force {
            let set: DescriptorSet = read_artifact(&path, "descriptor set")?;
            sets.push(set);
            reused += 1;
            continue;
        }
        match generator.generate_for_class(&class.id, &sim.map, &assets.catalog, cfg.seed) {
            Ok(g) => {
                for f in &g.failures {
                    log::warn!("{} vs {}: {}", class.id, f.similar_class, f.error);
                }
                write_artifact(&path, cfg, &g.set)?;
                say!(
                    "{}: {} descriptors from {} comparisons",
                    class.id,
                    g.set.descriptors.len(),
                    g.set.generation_meta.n_used
                );
                sets.push(g.set);
                generated += 1;
            }
            Err(e) => {
                log::warn!("{}: {e}", class.id);
                failed.push((class.id.clone(), e.to_string()));
            }
        }
    }
    say!(
        "generated {generated}, reused {reused}, failed {} of {} classes",
        failed.len(),
        assets.catalog.len()
    );
    for (c, e) in &failed {
        say!("  failed {c}: {e}");
    }
    if generated + reused == 0 {
        bail!("no class succeeded");
    }
    let path = descriptors_path(cfg, &ds);
    write_artifact(&path, cfg, &DescriptorBundle { dataset_id: ds, sets })?;
    say!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_filter(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let assets = load_assets(cfg)?;
    let ds = assets.dataset_id.clone();
    let policy = cfg.policy();
    policy.validate()?;
    let desc_path = cfg.descriptors.clone().unwrap_or_else(|| descriptors_path(cfg, &ds));
    let cfg = &RunConfig {
        descriptors: Some(desc_path.clone()),
        ..cfg.clone()
    };
    let lists = load_descriptor_lists(&desc_path, &assets)?;
    if let Some(src) = &assets.mean_source {
        say!("mean features from {}", src.dataset_id);
    }
    let run = filter::filter_dataset(&assets.catalog, &lists, &assets.texts, assets.filter_images(), &policy)?;

    let kept: usize = run.outcomes.values().map(|o| o.kept.len()).sum();
    let count = |r: DiscardReason| -> usize {
        run.outcomes
            .values()
            .flat_map(|o| &o.discarded)
            .filter(|d| d.reason == r)
            .count()
    };
    let fell_back = run.outcomes.values().filter(|o| o.fell_back).count();
    say!(
        "policy: k={} shots={} cap={} seed={}",
        policy.k, policy.shots, policy.bound_cap, policy.rng_seed
    );
    say!(
        "kept {kept}, below bound {}, beyond k {}, fallback classes {fell_back}",
        count(DiscardReason::BelowBound),
        count(DiscardReason::BeyondK)
    );
    for (c, e) in &run.errors {
        say!("  failed {c}: {e}");
    }
    let path = filtered_path(cfg, &ds);
    let file = FilterFile {
        dataset_id: ds,
        bundle: run.to_bundle(),
        errors: run.errors.clone(),
    };
    write_artifact(&path, cfg, &file)?;
    say!("wrote {}", path.display());
    Ok(path)
}

fn round_json(v: &impl Serialize) -> Value {
    eval::round_floats(serde_json::to_value(v).expect("serializable"))
}

pub fn cmd_classify(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let assets = load_assets(cfg)?;
    let ds = assets.dataset_id.clone();
    let lists = bank_descriptors(cfg, &assets)?;
    let bank = classifier::build_bank(&assets.catalog, &lists, &assets.texts, cfg.mode)?;
    let preds = classifier::classify_all(&assets.images, &bank, cfg.explain)?;

    let mut lines = String::new();
    for p in &preds {
        let rec = PredictionRecord::from_prediction(p, image_class(&p.image_key));
        lines.push_str(&serde_json::to_string(&round_json(&rec))?);
        lines.push('\n');
    }
    let path = predictions_path(cfg, &ds);
    write_bytes(&path, lines.as_bytes())?;
    let sidecar = path.with_extension("config.json");
    write_artifact(&sidecar, cfg, &serde_json::json!({ "dataset_id": ds, "predictions": path.file_name().and_then(|s| s.to_str()) }))?;

    let labels = eval::labels_from_keys(&assets.images);
    if let Ok(acc) = eval::accuracy(&preds, &labels) {
        say!("{}: top-1 {:.2}, top-5 {:.2}", cfg.mode, acc.top1 * 100.0, acc.top5 * 100.0);
    }
    if !bank.excluded().is_empty() {
        say!("excluded classes: {}", bank.excluded().join(", "));
    }
    say!("wrote {}", path.display());
    Ok(path)
}

/// Writes the json and markdown reports and returns their paths.
pub fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let assets = load_assets(cfg)?;
    let mut plan = ExperimentPlan::new(cfg.protocol);
    if let Some(r) = cfg.repeats {
        plan.repeats = r;
    }
    plan.seed = cfg.seed;
    plan.shot_grid = cfg.shot_grid.clone();
    plan.k = cfg.k;
    plan.n = cfg.n;
    plan.policy = cfg.policy();
    plan.validate()?;

    let descriptors = cfg.descriptors.as_ref().map(|p| load_descriptor_lists(p, &assets)).transpose()?;
    let filtered = cfg.filtered.as_ref().map(|p| load_kept_lists(p, &assets)).transpose()?;
    let inputs = ProtocolInputs {
        assets: &assets,
        descriptors: descriptors.as_ref(),
        filtered: filtered.as_ref(),
    };
    let clock = cfg.clock();
    let reports = eval::run_protocol(&plan, inputs, clock)?;
    let doc = ReportDocument {
        dataset_id: assets.dataset_id.clone(),
        protocol: cfg.protocol,
        config: Some(cfg.to_value()),
        reports,
    };
    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let mut paths = Vec::new();
    for format in [ReportFormat::Json, ReportFormat::Markdown] {
        paths.push(eval::emit_report(&doc, format, &cfg.out, clock)?);
    }
    let md = eval::report_markdown(&doc);
    say!("{}", md.split("\n## ").next().unwrap_or_default().trim_end());
    for p in &paths {
        say!("wrote {}", p.display());
    }
    Ok(paths)
}

pub fn cmd_explain(cfg: &RunConfig, image_key: &str) -> anyhow::Result<PathBuf> {
    let assets = load_assets(cfg)?;
    let img = assets
        .images
        .get(image_key)
        .ok_or_else(|| usage(format!("unknown image key {image_key:?}")))?;
    let lists = bank_descriptors(cfg, &assets)?;
    let bank = classifier::build_bank(&assets.catalog, &lists, &assets.texts, cfg.mode)?;
    let pred = classifier::classify(image_key, img, &bank, true)?;
    let explanation = eval::explain(&pred, &assets.catalog, eval::DEFAULT_TOP_M)?;
    let md = eval::explanation_markdown(&explanation);
    say!("{}", md.trim_end());

    let path = explanation_path(cfg, &assets.dataset_id, image_key);
    write_bytes(&path.with_extension("md"), (md + &config_block(cfg)).as_bytes())?;
    let file = ExplainFile {
        dataset_id: assets.dataset_id.clone(),
        mode: cfg.mode,
        explanation,
    };
    write_artifact(&path, cfg, &file)?;
    say!("wrote {}", path.display());
    Ok(path)
}

/// Writes a synthetic dataset into `--out`; returns the manifest path.
pub fn cmd_fixture(cfg: &RunConfig, args: &FixtureArgs) -> anyhow::Result<PathBuf> {
    let mut spec = FixtureSpec {
        seed: cfg.seed,
        ..FixtureSpec::default()
    };
    assign(&mut spec.dataset_id, args.dataset.clone());
    assign(&mut spec.classes, args.classes);
    assign(&mut spec.dims, args.dims);
    assign(&mut spec.images_per_class, args.images_per_class);
    if spec.classes < 2 || spec.dims < spec.variation_dims + 2 {
        return Err(usage(format!(
            "fixture needs at least 2 classes and {} dims (got {} classes, {} dims)",
            spec.variation_dims + 2,
            spec.classes,
            spec.dims
        )));
    }
    let manifest = Fixture::build(&spec).write_to(&cfg.out)?;
    say!("wrote {}", manifest.display());
    Ok(manifest)
}
