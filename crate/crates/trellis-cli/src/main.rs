//! `trellis` — build, query, and evaluate multi-granular graph indexes
//! from the command line.
//!
//! Subcommands: `index` (corpus → index directory), `query` (context
//! retrieval and optional answer generation), `eval` (batch QA scoring),
//! `estimate` (closed-form indexing cost model), and `graph-stats`
//! (chunk-graph diagnostics). With `--json`, machine-readable output goes
//! to stdout and logs stay on stderr. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or configuration error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use trellis::corpus::{
    build_vocabulary, chunk_corpus, default_stopwords, load_stopwords, segment_sentences,
    split_subchunks, ChunkingConfig,
};
use trellis::embedding::{keys, EmbeddingProvider, EmbeddingStore, HashEmbedder};
use trellis::error::{Error, Result};
use trellis::evalkit::{
    load_dataset, run_eval, DatasetFormat, EvalConfig, ANSWER_PROMPT_TEMPLATE,
    ANSWER_SYSTEM_PROMPT,
};
use trellis::extraction::{
    shipped_prompt_overheads, CachedExtractor, LlmExtractor, MeteringExtractor, MockExtractor,
    TripletExtractor,
};
use trellis::gateway::{Gateway, GatewayConfig, PriceTable, RemoteEmbedder, Stage};
use trellis::graph::{build_knn_graph, degree_histogram, pagerank, CoreMode};
use trellis::indexer::{
    build_index, estimate_cost, load_index, save_index, CostInputs, CostVariant, IndexConfig,
};
use trellis::retrieval::{assemble_prompt, Context, RetrievalConfig};
use trellis::tokenizer::resolve;

#[derive(Parser)]
#[command(name = "trellis", version, about = "Corpus-to-context graph index engine")]
struct Cli {
    /// Print machine-readable JSON on stdout (logs stay on stderr)
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index directory from a corpus
    Index(IndexArgs),
    /// Retrieve context (and optionally an answer) for one question
    Query(QueryArgs),
    /// Score a QA dataset against an index
    Eval(EvalArgs),
    /// Closed-form indexing cost estimate, full KG vs skeleton
    Estimate(EstimateArgs),
    /// Chunk-graph degree and centrality diagnostics
    GraphStats(GraphStatsArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CoreModeArg {
    Pagerank,
    Uniform,
}

impl From<CoreModeArg> for CoreMode {
    fn from(arg: CoreModeArg) -> Self {
        match arg {
            CoreModeArg::Pagerank => CoreMode::PageRank,
            CoreModeArg::Uniform => CoreMode::Uniform,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ExtractorArg {
    Mock,
    Llm,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum EmbedderArg {
    Hash,
    Remote,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Internal,
    Musique,
    Hotpotqa,
}

impl From<FormatArg> for DatasetFormat {
    fn from(arg: FormatArg) -> Self {
        match arg {
            FormatArg::Internal => DatasetFormat::Internal,
            FormatArg::Musique => DatasetFormat::Musique,
            FormatArg::Hotpotqa => DatasetFormat::Hotpotqa,
        }
    }
}

#[derive(Args)]
struct IndexArgs {
    /// Corpus: JSON-lines file with {"id","text"} rows, or a directory of
    /// UTF-8 text files
    corpus: PathBuf,
    /// Output index directory (must not already contain files)
    out: PathBuf,
    /// Chunk length in tokens (ℓ)
    #[arg(long, default_value_t = 1200)]
    chunk_size: usize,
    /// Sub-chunk split depth: each chunk becomes 2^TAU sub-chunks
    #[arg(long, default_value_t = 3)]
    tau: u32,
    /// Chunk-graph degree budget (half lexical, half semantic)
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Fraction of chunks given full skeleton extraction
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Damping-style restart weight for centrality scoring
    #[arg(long, default_value_t = 0.15)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = CoreModeArg::Pagerank)]
    core_mode: CoreModeArg,
    #[arg(long, value_enum, default_value_t = ExtractorArg::Mock)]
    extractor: ExtractorArg,
    #[arg(long, value_enum, default_value_t = EmbedderArg::Hash)]
    embedder: EmbedderArg,
    /// Seed for uniform core sampling and other randomized choices
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dimension of the offline hash embedder
    #[arg(long, default_value_t = 64)]
    hash_dim: usize,
    /// Tokenizer id recorded in the index (word-v1 or cl100k_base)
    #[arg(long, default_value = "word-v1")]
    tokenizer: String,
    /// Stopword file (one word per line); defaults to the shipped list
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Gateway JSON config for llm extraction / remote embeddings
    #[arg(long)]
    gateway_config: Option<PathBuf>,
    /// Extraction result cache (JSON lines), reused across runs
    #[arg(long)]
    extraction_cache: Option<PathBuf>,
    /// Concurrent extraction workers
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
}

#[derive(Args)]
struct QueryArgs {
    /// Index directory produced by `trellis index`
    index: PathBuf,
    /// The question to retrieve context for
    question: String,
    /// Context token budget (λ)
    #[arg(long, default_value_t = 12000)]
    lambda: usize,
    /// Skeleton share of the budget (θ); 1 = skeleton only, 0 = keywords only
    #[arg(long, default_value_t = 0.4)]
    theta: f64,
    /// Entity seeds for the skeleton channel
    #[arg(long, default_value_t = 10)]
    k_seed: usize,
    /// Print the full context segments
    #[arg(long)]
    emit_context: bool,
    /// Generate an answer from the context via the gateway
    #[arg(long)]
    generate: bool,
    #[arg(long)]
    gateway_config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Index directory produced by `trellis index`
    index: PathBuf,
    /// QA dataset file
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Internal)]
    format: FormatArg,
    /// Coverage only, no generation calls (the default mode)
    #[arg(long, conflicts_with = "generate")]
    retrieval_only: bool,
    /// Generate answers and score EM/F1 (needs a gateway)
    #[arg(long)]
    generate: bool,
    /// Evaluate only the first N instances
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 12000)]
    lambda: usize,
    #[arg(long, default_value_t = 0.4)]
    theta: f64,
    #[arg(long, default_value_t = 10)]
    k_seed: usize,
    /// Write the full report JSON here as well
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    gateway_config: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    num_chunks: u64,
    #[arg(long, default_value_t = 1200)]
    chunk_size: u64,
    /// Entity and relation prompt overheads in tokens
    #[arg(long, num_args = 2, value_names = ["ENTITY", "RELATION"], default_values_t = [0, 0])]
    prompt_tokens: Vec<u64>,
    /// LLM input price per token
    #[arg(long, default_value_t = 2.5e-6)]
    price_in: f64,
    /// Embedding price per token
    #[arg(long, default_value_t = 2.0e-8)]
    price_embed: f64,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Prior: extracted items per chunk
    #[arg(long, default_value_t = 15.0)]
    items_per_chunk: f64,
    /// Prior: description tokens per extracted item
    #[arg(long, default_value_t = 30.0)]
    desc_tokens: f64,
}

#[derive(Args)]
struct GraphStatsArgs {
    /// Corpus: JSON-lines file or directory of text files
    corpus: PathBuf,
    #[arg(long, default_value_t = 1200)]
    chunk_size: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.15)]
    alpha: f64,
    #[arg(long, default_value_t = 64)]
    hash_dim: usize,
    #[arg(long, default_value = "word-v1")]
    tokenizer: String,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// How many top-centrality chunks to list
    #[arg(long, default_value_t = 10)]
    top: usize,
}

fn main() -> ExitCode {
    // Rust ignores SIGPIPE by default, turning `trellis ... | head` into a
    // write panic; restore the conventional die-quietly disposition.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Index(args) => cmd_index(args, cli.json),
        Command::Query(args) => cmd_query(args, cli.json),
        Command::Eval(args) => cmd_eval(args, cli.json),
        Command::Estimate(args) => cmd_estimate(args, cli.json),
        Command::GraphStats(args) => cmd_graph_stats(args, cli.json),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

/// Reads `{"id","text"}` JSON lines, or every regular file of a directory
/// (sorted by name, id = file stem).
fn read_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut docs = Vec::with_capacity(entries.len());
        for file in entries {
            let text = std::fs::read_to_string(&file)
                .map_err(|e| Error::Corpus(format!("{}: {e}", file.display())))?;
            let id = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| docs.len().to_string());
            docs.push((id, text));
        }
        if docs.is_empty() {
            return Err(Error::Corpus(format!("{}: directory holds no files", path.display())));
        }
        return Ok(docs);
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Corpus(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let id = row
            .get("id")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| Error::Corpus(format!("{} line {}: missing 'id'", path.display(), i + 1)))?;
        let body = row
            .get("text")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| Error::Corpus(format!("{} line {}: missing 'text'", path.display(), i + 1)))?;
        docs.push((id.to_string(), body.to_string()));
    }
    if docs.is_empty() {
        return Err(Error::Corpus(format!("{}: no corpus rows", path.display())));
    }
    Ok(docs)
}

fn read_stopwords(path: Option<&PathBuf>) -> Result<BTreeSet<String>> {
    match path {
        Some(p) => load_stopwords(p),
        None => Ok(default_stopwords()),
    }
}

/// Builds the gateway once per invocation, on first demand.
fn gateway_for(slot: &mut Option<Arc<Gateway>>, config: Option<&Path>) -> Result<Arc<Gateway>> {
    if let Some(gateway) = slot {
        return Ok(gateway.clone());
    }
    let cfg = match config {
        Some(path) => GatewayConfig::from_file(path)?,
        None => GatewayConfig::default(),
    };
    let gateway = Arc::new(Gateway::over_http(cfg)?);
    *slot = Some(gateway.clone());
    Ok(gateway)
}

/// Resolves the embedding provider an index was built with from its
/// recorded name, so query-time vectors live in the same space.
fn provider_for(
    embedder: &str,
    slot: &mut Option<Arc<Gateway>>,
    gateway_config: Option<&Path>,
) -> Result<Box<dyn EmbeddingProvider>> {
    if let Some(dim) = embedder.strip_prefix("hash-v1/") {
        let dim: usize = dim
            .parse()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Config(format!("bad hash embedder dimension in '{embedder}'")))?;
        return Ok(Box::new(HashEmbedder::new(dim)));
    }
    if embedder.starts_with("remote/") {
        let gateway = gateway_for(slot, gateway_config)?;
        let provider = RemoteEmbedder::new(gateway);
        if provider.name() != embedder {
            log::warn!(
                "index was embedded by {embedder} but the gateway config serves {}",
                provider.name()
            );
        }
        return Ok(Box::new(provider));
    }
    Err(Error::Config(format!("index records unknown embedder '{embedder}'")))
}

fn by_channel(context: &Context) -> BTreeMap<String, usize> {
    let mut sums: BTreeMap<String, usize> = BTreeMap::new();
    for segment in &context.segments {
        *sums.entry(segment.channel.to_string()).or_insert(0) += segment.tokens;
    }
    sums
}

fn cmd_index(args: &IndexArgs, json: bool) -> Result<()> {
    let cfg = IndexConfig {
        chunk_tokens: args.chunk_size,
        split_depth: args.tau,
        knn_k: args.k,
        alpha: args.alpha,
        core_fraction: args.beta,
        core_mode: args.core_mode.into(),
        seed: args.seed,
        ..IndexConfig::default()
    };
    cfg.validate()?;
    if args.hash_dim == 0 {
        return Err(Error::Config("hash dimension must be positive".into()));
    }
    if args.out.exists() && std::fs::read_dir(&args.out).map(|mut d| d.next().is_some()).unwrap_or(false)
    {
        return Err(Error::Config(format!(
            "output directory {} already exists and is not empty",
            args.out.display()
        )));
    }

    let docs = read_corpus(&args.corpus)?;
    let stopwords = read_stopwords(args.stopwords.as_ref())?;
    let tokenizer = resolve(&args.tokenizer)?;

    let mut gateway: Option<Arc<Gateway>> = None;
    let provider: Box<dyn EmbeddingProvider> = match args.embedder {
        EmbedderArg::Hash => Box::new(HashEmbedder::new(args.hash_dim)),
        EmbedderArg::Remote => Box::new(RemoteEmbedder::new(gateway_for(
            &mut gateway,
            args.gateway_config.as_deref(),
        )?)),
    };
    let base: Box<dyn TripletExtractor> = match args.extractor {
        ExtractorArg::Mock => Box::new(MockExtractor::new()),
        ExtractorArg::Llm => Box::new(LlmExtractor::new(gateway_for(
            &mut gateway,
            args.gateway_config.as_deref(),
        )?)),
    };
    let base: Box<dyn TripletExtractor> = match &args.extraction_cache {
        Some(path) => Box::new(CachedExtractor::new(base, path)?),
        None => base,
    };
    let (entity_overhead, relation_overhead) = shipped_prompt_overheads(tokenizer.as_ref());
    let extractor = MeteringExtractor::new(base, entity_overhead, relation_overhead);

    let built = build_index(
        &docs,
        &cfg,
        stopwords,
        tokenizer.as_ref(),
        provider.as_ref(),
        &extractor,
        args.parallelism.max(1),
    )
    .and_then(|index| save_index(&index, &args.out));
    let manifest = match built {
        Ok(manifest) => manifest,
        Err(e) => {
            if args.out.exists() {
                if let Err(cleanup) = std::fs::remove_dir_all(&args.out) {
                    log::warn!("could not remove partial output {}: {cleanup}", args.out.display());
                }
            }
            return Err(e);
        }
    };

    let stats = &manifest.stats;
    let usage = gateway.as_ref().map(|g| g.meter().snapshot());
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "out": args.out,
                "manifest": manifest,
                "extraction_llm_tokens": extractor.llm_tokens(),
                "extraction_calls": extractor.calls(),
                "gateway_usage": usage,
            }))?
        );
    } else {
        println!(
            "indexed {} documents: {} chunks, {} core, {} sub-chunks, {} sentences",
            stats.documents, stats.chunks, stats.core_chunks, stats.subchunks, stats.sentences
        );
        println!(
            "skeleton: {} entities, {} relations ({} extraction issues, {} rewire fallbacks)",
            stats.entities,
            stats.relations,
            manifest.extraction_issues.len(),
            stats.rewire_fallbacks
        );
        println!("keywords: {} nodes, {} edges", stats.keywords, stats.bipartite_edges);
        println!(
            "embeddings: {} vectors of dim {}",
            stats.embeddings, manifest.embedding_dim
        );
        if let (Some(iters), Some(converged)) = (stats.pagerank_iterations, stats.pagerank_converged)
        {
            println!(
                "centrality: {iters} iterations ({})",
                if converged { "converged" } else { "hit iteration cap" }
            );
        }
        println!(
            "extraction llm tokens (metered): {} over {} calls",
            extractor.llm_tokens(),
            extractor.calls()
        );
        if let Some(usage) = usage {
            for (stage, u) in usage {
                println!(
                    "gateway {stage}: {} requests, {} in / {} out tokens, {} retries",
                    u.requests, u.input_tokens, u.output_tokens, u.retries
                );
            }
        }
        println!("wrote {} files to {}", manifest.files.len() + 1, args.out.display());
    }
    for warning in &manifest.warnings {
        log::warn!("{warning}");
    }
    for issue in &manifest.extraction_issues {
        log::warn!("extraction: {issue}");
    }
    Ok(())
}

fn cmd_query(args: &QueryArgs, json: bool) -> Result<()> {
    let index = load_index(&args.index)?;
    let mut gateway: Option<Arc<Gateway>> = None;
    let provider = provider_for(
        &index.manifest.config.embedder,
        &mut gateway,
        args.gateway_config.as_deref(),
    )?;
    let rcfg = RetrievalConfig {
        budget: args.lambda,
        skeleton_ratio: args.theta,
        k_seed: args.k_seed,
    };
    let context = index.retrieve_text(provider.as_ref(), &args.question, &rcfg)?;

    let answer = if args.generate {
        let gateway = gateway_for(&mut gateway, args.gateway_config.as_deref())?;
        let prompt = assemble_prompt(&context, &args.question, ANSWER_PROMPT_TEMPLATE)?;
        let (answer, _) = gateway.chat_complete(Stage::Generation, ANSWER_SYSTEM_PROMPT, &prompt)?;
        Some(answer)
    } else {
        None
    };

    if json {
        let mut doc = json!({
            "question": args.question,
            "total_tokens": context.total_tokens,
            "by_channel": by_channel(&context),
        });
        if args.emit_context || !args.generate {
            doc["context"] = serde_json::to_value(&context)?;
        }
        if let Some(answer) = &answer {
            doc["answer"] = json!(answer);
        }
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!(
            "context: {} segments, {} tokens ({})",
            context.segments.len(),
            context.total_tokens,
            by_channel(&context)
                .iter()
                .map(|(channel, tokens)| format!("{channel} {tokens}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        if args.emit_context {
            for segment in &context.segments {
                println!("[{} {}] {}", segment.channel, segment.source_id, segment.text);
            }
        }
        if let Some(answer) = &answer {
            println!("answer: {answer}");
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, json: bool) -> Result<()> {
    let index = load_index(&args.index)?;
    let mut instances = load_dataset(&args.dataset, args.format.into())?;
    if let Some(limit) = args.limit {
        instances.truncate(limit);
    }
    let mut gateway: Option<Arc<Gateway>> = None;
    let provider = provider_for(
        &index.manifest.config.embedder,
        &mut gateway,
        args.gateway_config.as_deref(),
    )?;
    let cfg = EvalConfig {
        retrieval: RetrievalConfig {
            budget: args.lambda,
            skeleton_ratio: args.theta,
            k_seed: args.k_seed,
        },
        generate: args.generate,
    };
    let gateway = if args.generate {
        Some(gateway_for(&mut gateway, args.gateway_config.as_deref())?)
    } else {
        None
    };
    let report = run_eval(&index, &instances, &cfg, provider.as_ref(), gateway.as_deref())?;
    if let Some(path) = &args.report {
        report.save(path)?;
        log::info!("report written to {}", path.display());
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{} instances: coverage {}, em {}, f1 {}",
            report.per_instance.len(),
            show(report.aggregates.coverage),
            show(report.aggregates.em),
            show(report.aggregates.f1),
        );
        let failures = report.per_instance.iter().filter(|r| r.error.is_some()).count();
        if failures > 0 {
            log::warn!("{failures} instances recorded errors");
        }
    }
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs, json: bool) -> Result<()> {
    if args.price_in < 0.0 || args.price_embed < 0.0 {
        return Err(Error::Config("prices must be non-negative".into()));
    }
    if !(0.0..=1.0).contains(&args.beta) {
        return Err(Error::Config(format!("beta must be in [0, 1], got {}", args.beta)));
    }
    if args.items_per_chunk < 0.0 || args.desc_tokens < 0.0 {
        return Err(Error::Config("priors must be non-negative".into()));
    }
    let inputs = CostInputs {
        num_chunks: args.num_chunks,
        chunk_tokens: args.chunk_size,
        entity_prompt_tokens: args.prompt_tokens[0],
        relation_prompt_tokens: args.prompt_tokens[1],
        items_per_chunk: args.items_per_chunk,
        desc_tokens_per_item: args.desc_tokens,
        core_fraction: args.beta,
    };
    let prices = PriceTable {
        llm_input_per_token: args.price_in,
        llm_output_per_token: 0.0,
        embed_per_token: args.price_embed,
    };
    let kg = estimate_cost(&inputs, &prices, CostVariant::Kg);
    let ket = estimate_cost(&inputs, &prices, CostVariant::Ket);
    let ratio = |a: f64, b: f64| if b > 0.0 { Some(a / b) } else { None };
    let ratios = (
        ratio(ket.llm_tokens, kg.llm_tokens),
        ratio(ket.embed_tokens, kg.embed_tokens),
        ratio(ket.cost, kg.cost),
    );

    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "inputs": inputs,
                "kg": kg,
                "ket": ket,
                "ratios": {"llm_tokens": ratios.0, "embed_tokens": ratios.1, "cost": ratios.2},
            }))?
        );
    } else {
        let show = |r: Option<f64>| r.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "kg : llm {:.0} tokens, embed {:.0} tokens, cost {:.6}",
            kg.llm_tokens, kg.embed_tokens, kg.cost
        );
        println!(
            "ket: llm {:.0} tokens, embed {:.0} tokens, cost {:.6}",
            ket.llm_tokens, ket.embed_tokens, ket.cost
        );
        println!(
            "ket/kg: llm {}, embed {}, cost {}",
            show(ratios.0),
            show(ratios.1),
            show(ratios.2)
        );
    }
    Ok(())
}

fn cmd_graph_stats(args: &GraphStatsArgs, json: bool) -> Result<()> {
    if args.hash_dim == 0 {
        return Err(Error::Config("hash dimension must be positive".into()));
    }
    let docs = read_corpus(&args.corpus)?;
    let stopwords = read_stopwords(args.stopwords.as_ref())?;
    let tokenizer = resolve(&args.tokenizer)?;
    let chunking = ChunkingConfig::new(args.chunk_size, 0, stopwords)?;
    let (chunks, warnings) = chunk_corpus(&docs, tokenizer.as_ref(), &chunking);
    for warning in &warnings {
        log::warn!("{warning}");
    }
    if chunks.is_empty() {
        return Err(Error::Corpus("corpus produced no chunks".into()));
    }
    let (subchunks, _) = split_subchunks(&chunks, &chunking);
    let sentences = segment_sentences(&subchunks, &chunking);
    let vocab = build_vocabulary(&sentences);

    let provider = HashEmbedder::new(args.hash_dim);
    let mut store = EmbeddingStore::new(provider.dim());
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    for (chunk, embedding) in chunks.iter().zip(provider.embed_batch(&texts)?) {
        store.insert(keys::chunk(chunk.chunk_id), embedding)?;
    }
    let graph = build_knn_graph(&chunks, &vocab, &store, args.k)?;
    let histogram = degree_histogram(&graph);
    let edges: usize = histogram.iter().map(|(degree, count)| degree * count).sum::<usize>() / 2;
    let pr = pagerank(&graph, args.alpha, 1e-8, 200);
    let mut ranked: Vec<(usize, f64)> = pr.scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(args.top);

    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "chunks": chunks.len(),
                "keywords": vocab.len(),
                "edges": edges,
                "degree_histogram": histogram,
                "centrality": {
                    "iterations": pr.iterations,
                    "converged": pr.converged,
                    "top": ranked,
                },
            }))?
        );
    } else {
        println!("{} chunks, {} keywords, {} graph edges", chunks.len(), vocab.len(), edges);
        println!("degree,count");
        for (degree, count) in &histogram {
            println!("{degree},{count}");
        }
        println!(
            "centrality: {} iterations ({})",
            pr.iterations,
            if pr.converged { "converged" } else { "hit iteration cap" }
        );
        for (chunk_id, score) in &ranked {
            println!("chunk {chunk_id}: {score:.6}");
        }
    }
    Ok(())
}
