//! Experiment orchestration: sweeps methods over a corpus, persists one
//! prediction per (method, item), and scores from what was persisted.

use crate::corpus::{load_corpus, Corpus, CorpusError, ConnectionSet, FurnitureItem};
use crate::metrics::{
    aggregate, render_bucket_table, render_category_table, render_error_table, render_k_table, render_main_table,
    render_scope_table, scope_difference, score_item, AggregateReport, ItemInfo, ItemMetrics, MetricsError,
};
use crate::planner::{
    build_prompt, complete, parse_prediction, ParseTier, PlannerError, PredictionMethod, PredictionOutcome,
    ProviderError, ProviderSpec, DEFAULT_RAG_K,
};
use crate::retrieval::{load_embeddings, RetrievalContext, RetrievalError, RetrievalScope};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("config references unset environment variable {0}")]
    UnsetVar(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{item}: {source}")]
    Prompt {
        item: String,
        #[source]
        source: PlannerError,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("prediction file {path}: {message}")]
    Prediction { path: PathBuf, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn default_k_values() -> Vec<usize> {
    vec![1, 3, 5]
}

fn default_in_flight() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus_root: PathBuf,
    pub methods: Vec<PredictionMethod>,
    pub provider: ProviderSpec,
    #[serde(default)]
    pub embeddings_path: Option<PathBuf>,
    /// Per-category text-query vectors; without them the target's own cover
    /// embedding is the query.
    #[serde(default)]
    pub queries_path: Option<PathBuf>,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub retrieval_scope: RetrievalScope,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.methods.is_empty() {
            return bad("no methods listed".into());
        }
        let needs_embeddings = self.methods.iter().any(|m| matches!(m, PredictionMethod::RagImages { .. }));
        if needs_embeddings && self.embeddings_path.is_none() {
            return bad("rag_images methods need embeddings_path".into());
        }
        if let Some(k) = self.k_values.iter().find(|k| !(1..=10).contains(*k)) {
            return bad(format!("k value {k} outside [1, 10]"));
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        self.provider.validate()?;
        Ok(())
    }

    /// Reads a JSON config, substituting `${VAR}` from the environment and
    /// resolving relative paths against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&interpolate_env(&text)?).map_err(|e| HarnessError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.corpus_root);
        resolve(&mut config.output_dir);
        config.embeddings_path.as_mut().map(resolve);
        config.queries_path.as_mut().map(resolve);
        match &mut config.provider {
            ProviderSpec::Replay { cache_dir } => resolve(cache_dir),
            ProviderSpec::Http(h) => {
                h.record_dir.as_mut().map(resolve);
            }
            _ => {}
        }
        config.validate()?;
        Ok(config)
    }
}

/// Replaces every `${NAME}` with the variable's value; unset variables are errors.
pub fn interpolate_env(text: &str) -> Result<String> {
    let re = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("regex");
    let mut missing = None;
    let out = re.replace_all(text, |c: &regex::Captures| match std::env::var(&c[1]) {
        Ok(v) => v,
        Err(_) => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(var) => Err(HarnessError::UnsetVar(var)),
        None => Ok(out.into_owned()),
    }
}

/// Builds the retrieval context a config asks for.
pub fn retrieval_context(config: &ExperimentConfig, corpus: &Corpus) -> Result<RetrievalContext> {
    let mut ctx = RetrievalContext::new(corpus).with_scope(config.retrieval_scope);
    if let Some(p) = &config.embeddings_path {
        ctx = ctx.with_embeddings(load_embeddings(p)?);
    }
    if let Some(p) = &config.queries_path {
        ctx = ctx.with_queries(load_embeddings(p)?);
    }
    Ok(ctx)
}

/// One persisted prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    pub method: PredictionMethod,
    /// Retrieved item ids, in rank order.
    pub retrieved: Vec<String>,
    pub outcome: PredictionOutcome,
    /// Provider failure, if any; the outcome is then an empty prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_error: Option<String>,
}

fn failed_outcome() -> PredictionOutcome {
    PredictionOutcome {
        raw_text: String::new(),
        parsed: ConnectionSet::new(),
        parse_tier: ParseTier::Failed,
        rejected: Vec::new(),
    }
}

/// Checks that would make every call fail, so they abort before the sweep.
pub fn preflight(provider: &ProviderSpec) -> Result<()> {
    provider.validate()?;
    if let ProviderSpec::Http(h) = provider {
        if std::env::var_os(&h.auth_env).is_none() {
            return Err(ProviderError::MissingAuth(h.auth_env.clone()).into());
        }
    }
    Ok(())
}

/// Retrieve, build the prompt, complete, parse. Provider failures become
/// empty predictions; retrieval and prompt errors are hard errors.
pub fn predict_item(
    item: &FurnitureItem,
    method: PredictionMethod,
    corpus: &Corpus,
    ctx: &RetrievalContext,
    provider: &ProviderSpec,
) -> Result<PredictionRecord> {
    let retrieved = ctx.retrieve_for(method, item, corpus)?;
    let bundle = build_prompt(item, method, retrieved.as_ref(), corpus)
        .map_err(|source| HarnessError::Prompt { item: item.id.clone(), source })?;
    let (outcome, provider_error) = match complete(provider, &bundle, item) {
        Ok(raw) => (parse_prediction(&raw, item.part_count), None),
        Err(e) => (failed_outcome(), Some(e.to_string())),
    };
    Ok(PredictionRecord {
        item_id: item.id.clone(),
        method,
        retrieved: retrieved.map(|r| r.ids().map(str::to_string).collect()).unwrap_or_default(),
        outcome,
        provider_error,
    })
}

pub fn prediction_path(predictions_dir: &Path, method: PredictionMethod, item_id: &str) -> PathBuf {
    predictions_dir.join(method.slug()).join(format!("{item_id}.json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = path.with_extension(format!("json.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepStats {
    pub predicted: usize,
    pub skipped: usize,
    pub provider_failures: usize,
}

/// Predicts every (method, item) pair whose file does not exist yet.
/// Items run with up to `max_in_flight` concurrent provider calls.
pub fn sweep(
    corpus: &Corpus,
    ctx: &RetrievalContext,
    provider: &ProviderSpec,
    methods: &[PredictionMethod],
    predictions_dir: &Path,
    max_in_flight: usize,
) -> Result<SweepStats> {
    preflight(provider)?;
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let jobs: Vec<(PredictionMethod, &FurnitureItem)> =
        methods.iter().flat_map(|&m| corpus.items().iter().map(move |it| (m, it))).collect();
    let stats = Mutex::new(SweepStats::default());
    let first_error: Mutex<Option<HarnessError>> = Mutex::new(None);
    let next = AtomicUsize::new(0);

    let worker = || loop {
        if first_error.lock().expect("lock").is_some() {
            return;
        }
        let Some(&(method, item)) = jobs.get(next.fetch_add(1, Ordering::Relaxed)) else { return };
        let path = prediction_path(predictions_dir, method, &item.id);
        if path.exists() {
            stats.lock().expect("lock").skipped += 1;
            continue;
        }
        let result = predict_item(item, method, corpus, ctx, provider).and_then(|record| {
            let failed = record.provider_error.is_some();
            write_atomic(&path, &serde_json::to_vec_pretty(&record).expect("record json"))?;
            Ok(failed)
        });
        match result {
            Ok(failed) => {
                let mut s = stats.lock().expect("lock");
                s.predicted += 1;
                s.provider_failures += failed as usize;
            }
            Err(e) => {
                first_error.lock().expect("lock").get_or_insert(e);
            }
        }
    };

    let threads = max_in_flight.clamp(1, jobs.len().max(1));
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    match first_error.into_inner().expect("lock") {
        Some(e) => Err(e),
        None => Ok(stats.into_inner().expect("lock")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub item: ItemInfo,
    pub metrics: ItemMetrics,
    pub parse_tier: ParseTier,
    pub provider_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: PredictionMethod,
    pub report: AggregateReport,
    pub provider_failures: usize,
    pub parse_tiers: BTreeMap<ParseTier, usize>,
    pub items: Vec<ItemScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub methods: Vec<MethodReport>,
}

impl EvaluationReport {
    pub fn get(&self, method: PredictionMethod) -> Option<&AggregateReport> {
        self.methods.iter().find(|m| m.method == method).map(|m| &m.report)
    }

    pub fn rows(&self) -> Vec<(PredictionMethod, AggregateReport)> {
        self.methods.iter().map(|m| (m.method, m.report.clone())).collect()
    }

    /// Method table, then the breakdown tables for the full-manual run (or
    /// the first method when that run is absent).
    pub fn render_text(&self) -> String {
        let mut out = render_main_table(&self.rows());
        let detail = self
            .methods
            .iter()
            .find(|m| m.method == PredictionMethod::FullManual)
            .or_else(|| self.methods.first());
        if let Some(d) = detail {
            for (title, table) in [
                ("by part count", render_bucket_table(&d.report)),
                ("by category", render_category_table(&d.report)),
                ("connection counts", render_error_table(&d.report.micro)),
            ] {
                out.push_str(&format!("\n{} {title}\n{table}", d.method.label()));
            }
        }
        let failures: usize = self.methods.iter().map(|m| m.provider_failures).sum();
        if failures > 0 {
            out.push_str(&format!("\n{failures} provider failures scored as empty predictions\n"));
        }
        out
    }
}

fn read_record(path: &Path) -> Result<PredictionRecord> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Prediction { path: path.to_path_buf(), message: e.to_string() })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

/// Scores every persisted prediction under `predictions_dir`. Deterministic:
/// methods in report order, items by id.
pub fn evaluate(corpus: &Corpus, predictions_dir: &Path) -> Result<EvaluationReport> {
    let mut by_method: BTreeMap<PredictionMethod, Vec<(PredictionRecord, &FurnitureItem)>> = BTreeMap::new();
    for dir in sorted_entries(predictions_dir)?.into_iter().filter(|p| p.is_dir()) {
        for path in sorted_entries(&dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let record = read_record(&path)?;
            let item = corpus.get(&record.item_id).ok_or_else(|| HarnessError::Prediction {
                path: path.clone(),
                message: format!("item {} is not in the corpus", record.item_id),
            })?;
            if let Some(c) = record.outcome.parsed.first_out_of_range(item.part_count) {
                return Err(HarnessError::Prediction {
                    path,
                    message: format!("connection ({}, {}) out of range", c.a(), c.b()),
                });
            }
            by_method.entry(record.method).or_default().push((record, item));
        }
    }
    let mut methods = Vec::new();
    for (method, mut records) in by_method {
        records.sort_by(|a, b| a.1.id.cmp(&b.1.id));
        let mut parse_tiers = BTreeMap::new();
        let items: Vec<ItemScore> = records
            .iter()
            .map(|(r, item)| {
                *parse_tiers.entry(r.outcome.parse_tier).or_insert(0) += 1;
                ItemScore {
                    item: ItemInfo::from(*item),
                    metrics: score_item(&r.outcome.parsed, &item.ground_truth),
                    parse_tier: r.outcome.parse_tier,
                    provider_error: r.provider_error.is_some(),
                }
            })
            .collect();
        let pairs: Vec<_> = items.iter().map(|s| (s.item.clone(), s.metrics)).collect();
        methods.push(MethodReport {
            method,
            report: aggregate(&pairs)?,
            provider_failures: items.iter().filter(|s| s.provider_error).count(),
            parse_tiers,
            items,
        });
    }
    Ok(EvaluationReport { methods })
}

pub fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(report).expect("report json"))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, report.render_text()).map_err(io_err(&txt))
}

/// Runs every configured method over the corpus and scores the result.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let corpus = load_corpus(&config.corpus_root)?;
    let ctx = retrieval_context(config, &corpus)?;
    let predictions = config.output_dir.join("predictions");
    sweep(&corpus, &ctx, &config.provider, &config.methods, &predictions, config.max_in_flight)?;
    let report = evaluate(&corpus, &predictions)?;
    write_report(&report, &config.output_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KAblation {
    pub rows: Vec<(usize, AggregateReport)>,
}

impl KAblation {
    pub fn render_text(&self) -> String {
        render_k_table(&self.rows)
    }
}

/// One example-retrieval run per configured k, same provider throughout.
pub fn run_k_ablation(config: &ExperimentConfig) -> Result<KAblation> {
    let mut config = config.clone();
    config.methods = config.k_values.iter().map(|&k| PredictionMethod::RagImages { k }).collect();
    config.validate()?;
    let corpus = load_corpus(&config.corpus_root)?;
    let ctx = retrieval_context(&config, &corpus)?;
    let predictions = config.output_dir.join("k_ablation").join(config.retrieval_scope.slug());
    sweep(&corpus, &ctx, &config.provider, &config.methods, &predictions, config.max_in_flight)?;
    let report = evaluate(&corpus, &predictions)?;
    let rows = config
        .k_values
        .iter()
        .map(|&k| {
            let r = report.get(PredictionMethod::RagImages { k }).cloned().expect("every k was swept");
            (k, r)
        })
        .collect();
    Ok(KAblation { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeAblation {
    pub k: usize,
    pub within: AggregateReport,
    pub cross: AggregateReport,
    /// Cross-category minus within-category (F1, exact-match rate).
    pub difference: (f64, f64),
}

impl ScopeAblation {
    pub fn render_text(&self) -> String {
        render_scope_table(&self.within, &self.cross)
    }
}

/// Example retrieval with and without the category filter. Uses the first
/// configured example-retrieval k, or the default.
pub fn run_scope_ablation(config: &ExperimentConfig) -> Result<ScopeAblation> {
    let k = config
        .methods
        .iter()
        .find_map(|m| match m {
            PredictionMethod::RagImages { k } => Some(*k),
            _ => None,
        })
        .unwrap_or(DEFAULT_RAG_K);
    let method = PredictionMethod::RagImages { k };
    let mut config = config.clone();
    config.methods = vec![method];
    config.validate()?;
    let corpus = load_corpus(&config.corpus_root)?;
    let mut reports = Vec::new();
    for scope in [RetrievalScope::WithinCategory, RetrievalScope::CrossCategory] {
        config.retrieval_scope = scope;
        let ctx = retrieval_context(&config, &corpus)?;
        let predictions = config.output_dir.join("scope_ablation").join(scope.slug());
        sweep(&corpus, &ctx, &config.provider, &[method], &predictions, config.max_in_flight)?;
        reports.push(evaluate(&corpus, &predictions)?.get(method).cloned().expect("method was swept"));
    }
    let cross = reports.pop().expect("two scopes");
    let within = reports.pop().expect("two scopes");
    Ok(ScopeAblation { k, difference: scope_difference(&within, &cross), within, cross })
}
