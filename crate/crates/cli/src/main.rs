//! `sinr` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or index-state error,
//! 3 embedder fingerprint mismatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sinr_core::embedding::Provider;
use sinr_core::eval::{run_needle_eval, BaselineConfig, NeedleSpec, DEFAULT_EVAL_K};
use sinr_core::ingest::load_corpus;
use sinr_core::query::{explain, retrieve, QueryRequest, DEFAULT_K};
use sinr_core::updater::{delete_document, update_document, UpdateOutcome, UpdateReport};
use sinr_core::{Backend, Document, EmbedderSpec, Engine, EngineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Format {
    Text,
    LineRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderArg {
    LocalHash,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Hnsw,
    Exact,
}

#[derive(Debug, Parser)]
#[command(name = "sinr", version, about = "Dual-layer chunk retrieval engine")]
struct Cli {
    /// Flat TOML file with default settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output format [default: text]
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an index from a directory of .txt/.md files.
    Index(IndexArgs),
    /// Retrieve context for a query.
    Query(QueryArgs),
    /// Re-index one file, or delete a document.
    Update(UpdateArgs),
    /// Print storage statistics.
    Stats(DirArg),
    /// Compare against a uniform-chunking baseline on a synthetic corpus.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct DirArg {
    /// Index directory.
    #[arg(long, env = "SINR_INDEX_DIR")]
    index_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
struct SettingsArgs {
    #[arg(long)]
    window_tokens: Option<usize>,
    #[arg(long)]
    stride_tokens: Option<usize>,
    #[arg(long)]
    min_retrieve_tokens: Option<usize>,
    #[arg(long)]
    max_retrieve_tokens: Option<usize>,
    #[arg(long)]
    min_tail_tokens: Option<usize>,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Remote embedding service base URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    provider_fingerprint: Option<String>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    max_links: Option<usize>,
    #[arg(long)]
    ef_construction: Option<usize>,
    #[arg(long)]
    ef_search: Option<usize>,
    #[arg(long)]
    level_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct IndexArgs {
    corpus_dir: PathBuf,
    #[command(flatten)]
    dir: DirArg,
    /// Replace an existing index.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Debug, Args)]
struct QueryArgs {
    text: String,
    #[command(flatten)]
    dir: DirArg,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long)]
    max_context_tokens: Option<usize>,
    #[arg(long)]
    max_parents: Option<usize>,
    /// Append the query trace as a JSON line to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print the trace report after the results (text format).
    #[arg(long)]
    explain: bool,
    /// Include chunk text in the output.
    #[arg(long)]
    show_text: bool,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    provider_fingerprint: Option<String>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["file", "delete"]))]
struct UpdateArgs {
    /// File to insert or re-index.
    file: Option<PathBuf>,
    /// Document id to delete.
    #[arg(long)]
    delete: Option<String>,
    /// Document id for FILE (default: its path relative to the corpus root).
    #[arg(long)]
    doc_id: Option<String>,
    #[command(flatten)]
    dir: DirArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Take chunking, embedder and index settings from this index.
    #[arg(long)]
    index_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = NeedleSpec::default().cases)]
    cases: usize,
    #[arg(long, default_value_t = NeedleSpec::default().distractors)]
    distractors: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_K)]
    k: usize,
    #[arg(long, default_value_t = BaselineConfig::default().chunk_tokens)]
    chunk_tokens: usize,
    #[arg(long, default_value_t = BaselineConfig::default().overlap_tokens)]
    overlap_tokens: usize,
    #[command(flatten)]
    settings: SettingsArgs,
}

/// Keys accepted in the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    index_dir: Option<PathBuf>,
    format: Option<Format>,
    window_tokens: Option<usize>,
    stride_tokens: Option<usize>,
    min_retrieve_tokens: Option<usize>,
    max_retrieve_tokens: Option<usize>,
    min_tail_tokens: Option<usize>,
    provider: Option<Provider>,
    dim: Option<usize>,
    endpoint: Option<String>,
    provider_fingerprint: Option<String>,
    backend: Option<Backend>,
    max_links: Option<usize>,
    ef_construction: Option<usize>,
    ef_search: Option<usize>,
    level_seed: Option<u64>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    fn has_embedder(&self) -> bool {
        self.provider.is_some() || self.dim.is_some() || self.endpoint.is_some() || self.provider_fingerprint.is_some()
    }
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sinr_core::Error>() {
            return match e {
                sinr_core::Error::FingerprintMismatch { .. } => 3,
                sinr_core::Error::IndexExists(_)
                | sinr_core::Error::Locked(_)
                | sinr_core::Error::Config(_)
                | sinr_core::Error::NotFound(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn merge_embedder(base: &mut EmbedderSpec, provider: Option<Provider>, dim: Option<usize>, endpoint: Option<String>, fp: Option<String>) {
    let changed_identity = provider.is_some() || dim.is_some();
    if let Some(p) = provider {
        base.provider = p;
    }
    if let Some(d) = dim {
        base.dim = d;
    }
    if endpoint.is_some() {
        base.endpoint = endpoint;
    }
    match (fp.filter(|f| !f.is_empty()), base.provider) {
        (Some(fp), _) => base.provider_fingerprint = fp,
        (None, Provider::LocalHash) => *base = EmbedderSpec::local_hash(base.dim),
        (None, Provider::Remote) if changed_identity => base.provider_fingerprint.clear(),
        _ => {}
    }
}

fn provider_of(p: ProviderArg) -> Provider {
    match p {
        ProviderArg::LocalHash => Provider::LocalHash,
        ProviderArg::Remote => Provider::Remote,
    }
}

/// Flags over config file over defaults.
fn engine_config(file: &FileConfig, s: &SettingsArgs) -> EngineConfig {
    let mut c = EngineConfig::default();
    let ch = &mut c.chunking;
    ch.window_tokens = s.window_tokens.or(file.window_tokens).unwrap_or(ch.window_tokens);
    ch.stride_tokens = s.stride_tokens.or(file.stride_tokens).unwrap_or(ch.stride_tokens);
    ch.min_retrieve_tokens = s.min_retrieve_tokens.or(file.min_retrieve_tokens).unwrap_or(ch.min_retrieve_tokens);
    ch.max_retrieve_tokens = s.max_retrieve_tokens.or(file.max_retrieve_tokens).unwrap_or(ch.max_retrieve_tokens);
    ch.min_tail_tokens = s.min_tail_tokens.or(file.min_tail_tokens).unwrap_or(ch.min_tail_tokens);

    merge_embedder(
        &mut c.embedder,
        s.provider.map(provider_of).or(file.provider),
        s.dim.or(file.dim),
        s.endpoint.clone().or_else(|| file.endpoint.clone()),
        s.provider_fingerprint.clone().or_else(|| file.provider_fingerprint.clone()),
    );

    c.backend = s
        .backend
        .map(|b| match b {
            BackendArg::Hnsw => Backend::Hnsw,
            BackendArg::Exact => Backend::Exact,
        })
        .or(file.backend)
        .unwrap_or(c.backend);
    let ix = &mut c.index;
    ix.max_links = s.max_links.or(file.max_links).unwrap_or(ix.max_links);
    ix.ef_construction = s.ef_construction.or(file.ef_construction).unwrap_or(ix.ef_construction);
    ix.ef_search = s.ef_search.or(file.ef_search).unwrap_or(ix.ef_search);
    ix.level_seed = s.level_seed.or(file.level_seed).unwrap_or(ix.level_seed);
    c
}

fn index_dir(arg: &DirArg, file: &FileConfig) -> Result<PathBuf> {
    arg.index_dir
        .clone()
        .or_else(|| file.index_dir.clone())
        .ok_or_else(|| usage("no index directory: pass --index-dir or set SINR_INDEX_DIR"))
}

fn require_index(dir: &Path) -> Result<()> {
    if !dir.join(sinr_core::storage::MANIFEST_FILE).exists() {
        return Err(usage(format!("no index found at {}", dir.display())));
    }
    Ok(())
}

struct Out {
    format: Format,
    buf: String,
}

impl Out {
    fn line(&mut self, s: impl AsRef<str>) {
        self.buf.push_str(s.as_ref());
        self.buf.push('\n');
    }

    fn record(&mut self, v: serde_json::Value) {
        self.line(v.to_string());
    }
}

fn cmd_index(args: &IndexArgs, file: &FileConfig, out: &mut Out) -> Result<()> {
    let dir = index_dir(&args.dir, file)?;
    let config = engine_config(file, &args.settings);
    let corpus = load_corpus(&args.corpus_dir)
        .with_context(|| format!("loading corpus {}", args.corpus_dir.display()))?;
    if !corpus.errors.is_empty() {
        for e in &corpus.errors {
            eprintln!("error: {}: {}", e.path.display(), e.error);
        }
        bail!("{} file(s) could not be ingested", corpus.errors.len());
    }
    let root = args.corpus_dir.to_string_lossy().into_owned();
    let engine = Engine::create(&dir, config, &corpus.documents, Some(root), args.force)?;
    let stats = engine.stats();
    let files: Vec<(String, u64)> = engine
        .encode_files()
        .iter()
        .map(|(n, b)| ((*n).to_owned(), b.len() as u64))
        .collect();
    match out.format {
        Format::Text => {
            out.line(format!("indexed {} documents into {}", stats.documents, dir.display()));
            out.line(format!("n = {} search chunks", stats.search_chunks));
            out.line(format!("m = {} retrieve chunks", stats.retrieve_chunks));
            for (name, bytes) in &files {
                out.line(format!("{name}: {bytes} bytes"));
            }
        }
        Format::LineRecords => out.record(json!({
            "kind": "index",
            "index_dir": dir,
            "documents": stats.documents,
            "search_chunks": stats.search_chunks,
            "retrieve_chunks": stats.retrieve_chunks,
            "files": files.into_iter().collect::<std::collections::BTreeMap<_, _>>(),
        })),
    }
    Ok(())
}

fn cmd_query(args: &QueryArgs, file: &FileConfig, out: &mut Out) -> Result<()> {
    let dir = index_dir(&args.dir, file)?;
    require_index(&dir)?;
    let override_spec = if args.provider.is_some()
        || args.endpoint.is_some()
        || args.provider_fingerprint.is_some()
        || file.has_embedder()
    {
        let manifest = sinr_core::storage::IndexManifest::from_bytes(&sinr_core::storage::read_file(
            &dir,
            sinr_core::storage::MANIFEST_FILE,
        )?)?;
        let mut spec = manifest.embedder;
        merge_embedder(
            &mut spec,
            args.provider.map(provider_of).or(file.provider),
            file.dim,
            args.endpoint.clone().or_else(|| file.endpoint.clone()),
            args.provider_fingerprint.clone().or_else(|| file.provider_fingerprint.clone()),
        );
        Some(spec)
    } else {
        None
    };
    let engine = Engine::open_with_embedder(&dir, override_spec.as_ref())?;
    let mut req = QueryRequest::new(args.text.clone()).with_k(args.k);
    req.max_context_tokens = args.max_context_tokens;
    req.max_parents = args.max_parents;
    if let Err(e) = req.validate() {
        return Err(usage(e.to_string()));
    }
    let result = retrieve(&engine, &req)?;

    if let Some(path) = &args.trace {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening trace file {}", path.display()))?;
        writeln!(f, "{}", result.trace.to_line())?;
    }

    let scores: std::collections::HashMap<_, _> = result
        .trace
        .parents
        .iter()
        .map(|p| (p.retrieve_id, (p.best_score, p.hits)))
        .collect();
    match out.format {
        Format::Text => {
            out.line(format!(
                "{} results ({} hits -> {} unique parents, {} context tokens{})",
                result.parents.len(),
                result.trace.hits.len(),
                result.trace.parents.len(),
                result.total_context_tokens,
                if result.over_budget { ", over budget" } else { "" }
            ));
            for (rank, p) in result.parents.iter().enumerate() {
                let (score, hits) = scores[&p.retrieve_id];
                out.line(format!(
                    "{:>3}. {} score {:.4} hits {} tokens {} {} [{}..{})",
                    rank + 1,
                    p.retrieve_id,
                    score,
                    hits,
                    p.token_count(),
                    p.doc_id,
                    p.span.start,
                    p.span.end
                ));
                if args.show_text {
                    out.line(format!("     {}", p.text.replace('\n', "\n     ")));
                }
            }
            if args.explain {
                out.buf.push_str(&explain(&result.trace));
            }
        }
        Format::LineRecords => {
            for (rank, p) in result.parents.iter().enumerate() {
                let (score, hits) = scores[&p.retrieve_id];
                let mut rec = json!({
                    "rank": rank + 1,
                    "retrieve_id": p.retrieve_id,
                    "doc_id": p.doc_id,
                    "span": p.span,
                    "tokens": p.token_count(),
                    "score": score,
                    "hits": hits,
                    "sibling_count": p.sibling_count,
                });
                if args.show_text {
                    rec["text"] = json!(p.text);
                }
                out.record(rec);
            }
        }
    }
    Ok(())
}

fn doc_id_for(path: &Path, corpus_root: Option<&str>) -> String {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if let Some(root) = corpus_root {
        if let Ok(rel) = canon(path).strip_prefix(canon(Path::new(root))) {
            return rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
        }
    }
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

fn render_update(r: &UpdateReport, out: &mut Out) {
    match out.format {
        Format::Text => {
            if r.outcome == UpdateOutcome::Noop {
                out.line(format!("no-op: {}", r.doc_id));
                return;
            }
            let outcome = serde_json::to_value(r.outcome).unwrap();
            out.line(format!(
                "{}: {} (retrieve chunks -{} +{}, search chunks -{} +{})",
                outcome.as_str().unwrap_or_default(),
                r.doc_id,
                r.stale_retrieve,
                r.new_retrieve,
                r.stale_search,
                r.new_search
            ));
            let ms = |ns: u64| ns as f64 / 1e6;
            let t = &r.timings;
            out.line(format!(
                "timings_ms: identify {:.3} delete {:.3} re-embed {:.3} update {:.3} commit {:.3} total {:.3}",
                ms(t.identify_ns),
                ms(t.delete_ns),
                ms(t.reembed_ns),
                ms(t.update_ns),
                ms(t.commit_ns),
                ms(t.total_ns())
            ));
        }
        Format::LineRecords => {
            let mut v = serde_json::to_value(r).unwrap();
            v["kind"] = json!("update");
            out.record(v);
        }
    }
}

fn cmd_update(args: &UpdateArgs, file: &FileConfig, out: &mut Out) -> Result<()> {
    let dir = index_dir(&args.dir, file)?;
    require_index(&dir)?;
    let mut engine = Engine::open_writable(&dir)?;
    let report = match (&args.file, &args.delete) {
        (Some(path), None) => {
            let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let text = String::from_utf8(raw).map_err(|_| anyhow!("{} is not valid UTF-8", path.display()))?;
            let corpus_root = sinr_core::storage::IndexManifest::from_bytes(&sinr_core::storage::read_file(
                &dir,
                sinr_core::storage::MANIFEST_FILE,
            )?)?
            .corpus_root;
            let doc_id = args.doc_id.clone().unwrap_or_else(|| doc_id_for(path, corpus_root.as_deref()));
            let doc = Document::new(doc_id, path.to_string_lossy(), &text)?;
            update_document(&mut engine, &doc)?
        }
        (None, Some(doc_id)) => delete_document(&mut engine, doc_id)?,
        _ => return Err(usage("pass either FILE or --delete DOC_ID")),
    };
    render_update(&report, out);
    Ok(())
}

#[derive(Serialize)]
struct StatsRecord {
    kind: &'static str,
    documents: usize,
    n: usize,
    m: usize,
    n_over_m: f64,
    dim: usize,
    embedding_bytes: usize,
    mapping_bytes: usize,
    text_bytes: usize,
    mapping_over_embedding: f64,
}

fn cmd_stats(args: &DirArg, file: &FileConfig, out: &mut Out) -> Result<()> {
    let dir = index_dir(args, file)?;
    require_index(&dir)?;
    let s = Engine::open(&dir)?.stats();
    let rec = StatsRecord {
        kind: "stats",
        documents: s.documents,
        n: s.search_chunks,
        m: s.retrieve_chunks,
        n_over_m: s.chunk_ratio(),
        dim: s.dim,
        embedding_bytes: s.embedding_bytes,
        mapping_bytes: s.mapping_bytes,
        text_bytes: s.text_bytes,
        mapping_over_embedding: s.mapping_to_embedding(),
    };
    match out.format {
        Format::Text => {
            out.line(format!("documents: {}", rec.documents));
            out.line(format!("search chunks (n): {}", rec.n));
            out.line(format!("retrieve chunks (m): {}", rec.m));
            out.line(format!("n/m: {:.3}", rec.n_over_m));
            out.line(format!("embedding bytes: {} (dim {})", rec.embedding_bytes, rec.dim));
            out.line(format!("mapping bytes: {}", rec.mapping_bytes));
            out.line(format!("text bytes (compressed): {}", rec.text_bytes));
            out.line(format!("mapping/embedding: {:.4}", rec.mapping_over_embedding));
        }
        Format::LineRecords => out.line(serde_json::to_string(&rec)?),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, file: &FileConfig, out: &mut Out) -> Result<()> {
    let config = match &args.index_dir {
        Some(dir) => {
            require_index(dir)?;
            Engine::open(dir)?.config().clone()
        }
        None => engine_config(file, &args.settings),
    };
    let spec = NeedleSpec {
        cases: args.cases,
        distractors: args.distractors,
        ..NeedleSpec::default()
    };
    let baseline = BaselineConfig {
        chunk_tokens: args.chunk_tokens,
        overlap_tokens: args.overlap_tokens,
    };
    let report = run_needle_eval(&config, baseline, &spec, args.seed, args.k)?;
    match out.format {
        Format::Text => out.buf.push_str(&report.to_text()),
        Format::LineRecords => out.buf.push_str(&report.to_line_records()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<String> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let mut out = Out {
        format: cli.format.or(file.format).unwrap_or(Format::Text),
        buf: String::new(),
    };
    match &cli.command {
        Command::Index(a) => cmd_index(a, &file, &mut out)?,
        Command::Query(a) => cmd_query(a, &file, &mut out)?,
        Command::Update(a) => cmd_update(a, &file, &mut out)?,
        Command::Stats(a) => cmd_stats(a, &file, &mut out)?,
        Command::Eval(a) => cmd_eval(a, &file, &mut out)?,
    }
    Ok(out.buf)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(s) => {
            print!("{s}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
