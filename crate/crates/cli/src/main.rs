use anyhow::{bail, Context, Result};
use assembly_core::corpus::{compute_stats, load_corpus, Corpus};
use assembly_core::harness::{
    evaluate, retrieval_context, run_experiment, run_k_ablation, run_scope_ablation, sweep, write_report,
    ExperimentConfig,
};
use assembly_core::partviz::{render_item_overview, DEFAULT_CELL_PX};
use assembly_core::planner::{PredictionMethod, ProviderSpec};
use assembly_core::retrieval::{build_bm25, load_embeddings, Bm25Index, RetrievalContext, RetrievalScope};
use assembly_core::simulator::{run_rra_loop, EpisodeConfig, ProviderSource};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs;
use std::path::{Path, PathBuf};

/// Retrieval-augmented assembly planning over a corpus of furniture manuals.
#[derive(Parser)]
#[command(name = "asmrag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and render missing parts overviews.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        /// Re-render every overview, not just missing ones.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = DEFAULT_CELL_PX)]
        cell_px: u32,
    },
    /// Print corpus statistics.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Build the BM25 index and write it as JSON.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a retrieval query.
    Retrieve {
        #[command(subcommand)]
        kind: RetrieveKind,
    },
    /// Predict connections for every (method, item) in a config, skipping
    /// predictions already on disk.
    Predict {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score persisted predictions.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the example-count or retrieval-scope ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: AblationKind,
    },
    /// Drive the simulated robot for one item.
    Simulate(SimulateArgs),
    /// Predict, evaluate and write report.json / report.txt for a config.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum RetrieveKind {
    /// Exact manual lookup by "category name".
    Bm25 {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Prebuilt index from `index`; used instead of --corpus.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Similar items by cover-page embedding distance.
    Knn {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        item: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Scope::Within)]
        scope: Scope,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Within,
    Cross,
}

impl From<Scope> for RetrievalScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Within => RetrievalScope::WithinCategory,
            Scope::Cross => RetrievalScope::CrossCategory,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    K,
    Scope,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    item: String,
    /// `oracle`, `noisy:drop=..,add=..,seed=..`, `replay:<dir>`,
    /// `http://host/path?model=..&auth=ENV`, or `@spec.json`.
    #[arg(long, default_value = "oracle")]
    provider: String,
    #[arg(long, default_value = "full_manual")]
    method: PredictionMethod,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum planner replies; defaults to twice the part count plus five.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Write the episode as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write one PPM frame per tick into this directory.
    #[arg(long)]
    frames: Option<PathBuf>,
}

fn parse_provider(s: &str) -> Result<ProviderSpec> {
    let spec = match s.strip_prefix('@') {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading provider spec {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing provider spec {path}"))?
        }
        None => s.parse()?,
    };
    Ok(spec)
}

fn corpus_at(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ingest(corpus_dir: &Path, force: bool, cell_px: u32) -> Result<()> {
    let corpus = corpus_at(corpus_dir)?;
    let mut rendered = 0;
    for item in corpus.items() {
        let path = item.overview_path();
        if force || !path.exists() {
            let img = render_item_overview(item, cell_px).with_context(|| format!("rendering {}", item.id))?;
            let bytes = match path.extension().and_then(|e| e.to_str()) {
                Some("ppm") => img.to_ppm(),
                _ => img.to_png()?,
            };
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            rendered += 1;
        }
        for page in item.page_paths() {
            if !page.is_file() {
                bail!("{}: missing manual page {}", item.id, page.display());
            }
        }
    }
    let stats = compute_stats(&corpus)?;
    println!(
        "{} items, {} parts, {} connections; rendered {rendered} overviews",
        stats.item_count, stats.total_parts, stats.total_connections
    );
    Ok(())
}

fn retrieve(kind: RetrieveKind) -> Result<()> {
    let result = match kind {
        RetrieveKind::Bm25 { corpus, index, query, k } => {
            let index: Bm25Index = match (index, corpus) {
                (Some(path), _) => serde_json::from_str(&fs::read_to_string(&path)?)
                    .with_context(|| format!("parsing index {}", path.display()))?,
                (None, Some(corpus)) => build_bm25(&corpus_at(&corpus)?),
                (None, None) => bail!("bm25 needs --index or --corpus"),
            };
            index.query(&query, k)
        }
        RetrieveKind::Knn { corpus, embeddings, queries, item, k, scope } => {
            let corpus = corpus_at(&corpus)?;
            let target = corpus.get(&item).with_context(|| format!("unknown item {item}"))?;
            let mut ctx = RetrievalContext::new(&corpus).with_embeddings(load_embeddings(&embeddings)?).with_scope(scope.into());
            if let Some(q) = queries {
                ctx = ctx.with_queries(load_embeddings(&q)?);
            }
            ctx.similar(target, k, &corpus)?
        }
    };
    for (rank, hit) in result.ranked.iter().enumerate() {
        println!("{:>3}  {:<28} {:.6}", rank + 1, hit.id, hit.score);
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let corpus = corpus_at(&args.corpus)?;
    let item = corpus.get(&args.item).with_context(|| format!("unknown item {}", args.item))?;
    let provider = parse_provider(&args.provider)?;
    let mut ctx = RetrievalContext::new(&corpus);
    if let Some(p) = &args.embeddings {
        ctx = ctx.with_embeddings(load_embeddings(p)?);
    }
    if let Some(p) = &args.queries {
        ctx = ctx.with_queries(load_embeddings(p)?);
    }
    let budget = args.budget.unwrap_or_else(|| EpisodeConfig::default_budget(item.part_count));
    let config = EpisodeConfig::new(args.seed, budget);
    let log = run_rra_loop(item, &corpus, &ctx, args.method, &mut ProviderSource { provider }, &config)?;
    if let Some(path) = &args.log {
        fs::write(path, log.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(dir) = &args.frames {
        log.write_frames(dir)?;
    }
    let fetches = log.delivered_order().len();
    println!("item: {} ({} parts)", item.id, item.part_count);
    println!("directives: {} ({} invalid)", log.directives.len() + log.invalid.len(), log.invalid.len());
    println!("primitives: {}", log.primitive_actions.len());
    println!("delivered: {fetches}");
    for v in &log.violations {
        println!("order violation: part_{} at position {}", v.part, v.position);
    }
    println!("outcome: {}", log.outcome);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { corpus, force, cell_px } => ingest(&corpus, force, cell_px)?,
        Command::Stats { corpus, json } => {
            let stats = compute_stats(&corpus_at(&corpus)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{stats}");
            }
        }
        Command::Index { corpus, out } => {
            let index = build_bm25(&corpus_at(&corpus)?);
            write_json(&out, &index)?;
            println!("indexed {} documents into {}", index.doc_count(), out.display());
        }
        Command::Retrieve { kind } => retrieve(kind)?,
        Command::Predict { config } => {
            let config = ExperimentConfig::load(&config)?;
            let corpus = corpus_at(&config.corpus_root)?;
            let ctx = retrieval_context(&config, &corpus)?;
            let predictions = config.output_dir.join("predictions");
            let stats = sweep(&corpus, &ctx, &config.provider, &config.methods, &predictions, config.max_in_flight)?;
            println!(
                "predicted {}, skipped {} already on disk, {} provider failures",
                stats.predicted, stats.skipped, stats.provider_failures
            );
        }
        Command::Evaluate { corpus, predictions, out } => {
            let report = evaluate(&corpus_at(&corpus)?, &predictions)?;
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            print!("{}", report.render_text());
        }
        Command::Ablate { config, kind } => {
            let config = ExperimentConfig::load(&config)?;
            match kind {
                AblationKind::K => {
                    let table = run_k_ablation(&config)?;
                    write_json(&config.output_dir.join("k_ablation.json"), &table)?;
                    print!("{}", table.render_text());
                }
                AblationKind::Scope => {
                    let table = run_scope_ablation(&config)?;
                    write_json(&config.output_dir.join("scope_ablation.json"), &table)?;
                    print!("{}", table.render_text());
                }
            }
        }
        Command::Simulate(args) => simulate(args)?,
        Command::Report { config } => {
            let config = ExperimentConfig::load(&config)?;
            let report = run_experiment(&config)?;
            write_report(&report, &config.output_dir)?;
            print!("{}", report.render_text());
        }
    }
    Ok(())
}
