//! The `halo` command: each pipeline stage as a subcommand plus batch
//! evaluation. Stage commands read and write plain JSON so they compose
//! through pipes.

pub mod config;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::DateTime;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;
use toml::{Table, Value};

use halo_core::embedding::{EmbeddingProvider, EmbeddingStore, HashEmbedder, HttpEmbedder};
use halo_core::eval::{self, EvalConfig, EvalError, ReportFormat, RunOptions};
use halo_core::expansion::{
    ExpandedQuerySet, ExpansionConfig, ExpansionError, Query, DEFAULT_EXPANSION_TEMPLATE,
};
use halo_core::gateway::{ChatBackend, Gateway, GatewayError, HttpChatBackend, MockBackend};
use halo_core::http::{HttpTransport, LiveTransport, ReplayTransport};
use halo_core::mmr::MmrError;
use halo_core::pipeline::{Pipeline, PipelineConfig, PipelineError, Selection};
use halo_core::prompt::{load_fewshots, McqItem, Mode, PromptEngine, PromptError, PromptTemplates};
use halo_core::retrieval::{
    ingest_local, CandidatePool, LocalIndex, PubmedClient, RetrievalError, RetrievalSources,
};
use halo_core::store::KvStore;

use config::{path_value, set_path, CliConfig, EmbedderKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_PROVIDER: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Provider(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Provider(_) => EXIT_PROVIDER,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
            CliError::Provider(_) => "provider",
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidRequest { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Provider(e.to_string()),
        }
    }
}

impl From<ExpansionError> for CliError {
    fn from(e: ExpansionError) -> Self {
        match e {
            ExpansionError::Gateway { source, .. } => source.into(),
            ExpansionError::InvalidSet(_) => CliError::Runtime(e.to_string()),
            ExpansionError::EmptyQuery | ExpansionError::ZeroTarget => {
                CliError::Usage(e.to_string())
            }
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Precondition(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MmrError> for CliError {
    fn from(e: MmrError) -> Self {
        match e {
            MmrError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Expansion(e) => e.into(),
            PipelineError::Retrieval(e) => e.into(),
            PipelineError::Mmr(e) => e.into(),
            PipelineError::Prompt(e) => e.into(),
            PipelineError::Gateway(e) => e.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            EvalError::ProviderFailure(_) => CliError::Provider(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "halo",
    version,
    about = "Retrieval-augmented medical multiple-choice QA"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Never touch the network; requires --mock for completions.
    #[arg(long, global = true)]
    offline: bool,
    /// Mock completion table (JSON list of match/response rules).
    #[arg(long, global = true)]
    mock: Option<PathBuf>,
    /// Recorded HTTP exchanges served instead of the network.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Local JSON-lines corpus to search alongside (or instead of) PubMed.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Disable PubMed retrieval.
    #[arg(long, global = true)]
    no_pubmed: bool,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Print errors to stderr as JSON.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rephrase a question into several search queries.
    Expand(ExpandArgs),
    /// Retrieve documents for an expanded query set.
    Retrieve(RetrieveArgs),
    /// Chunk a candidate pool and pick context with multi-query MMR.
    Select(SelectArgs),
    /// Answer one multiple-choice item.
    Ask(AskArgs),
    /// Evaluate a dataset in baseline and/or halo mode.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct ExpandArgs {
    /// Question text; taken from --item when omitted.
    question: Option<String>,
    /// Item JSON whose question (and id) to expand.
    #[arg(long)]
    item: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value = "q")]
    id: String,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    /// Expanded query set JSON, `-` for stdin.
    #[arg(long, default_value = "-")]
    queries: String,
    #[arg(long)]
    per_query_max: Option<usize>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Candidate pool JSON, `-` for stdin.
    #[arg(long, default_value = "-")]
    pool: String,
    /// Query set overriding the one embedded in the pool.
    #[arg(long)]
    queries: Option<String>,
    /// Item whose options are appended to the query text for embedding.
    #[arg(long)]
    item: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Print only the selection state (picked ids and scores).
    #[arg(long)]
    state_only: bool,
}

#[derive(Args, Debug)]
struct AskArgs {
    /// Item JSON (`item_id, question, options, gold, subject, topic`).
    #[arg(long)]
    item: PathBuf,
    /// Output of `select`; skips expansion and retrieval.
    #[arg(long)]
    selection: Option<String>,
    #[arg(long, default_value = "halo")]
    mode: Mode,
    #[arg(long)]
    show_prompt: bool,
    /// Print the full outcome as JSON.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    split: Option<eval::Split>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,halo")]
    modes: Vec<Mode>,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    subjects: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    keywords: Vec<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip items already recorded in the output directory's checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Print a per-item counter to stderr.
    #[arg(long)]
    progress: bool,
}

/// Builds the network client. Replaced in tests to prove offline runs never
/// construct one.
pub type LiveFactory = dyn Fn() -> Arc<dyn HttpTransport> + Send + Sync;
/// Applied to whichever transport the run ends up using.
pub type TransportWrapper = dyn Fn(Arc<dyn HttpTransport>) -> Arc<dyn HttpTransport> + Send + Sync;

pub struct Hooks {
    pub live_transport: Box<LiveFactory>,
    pub wrap_transport: Box<TransportWrapper>,
}

impl Default for Hooks {
    fn default() -> Self {
        Self {
            live_transport: Box::new(|| Arc::new(LiveTransport::default())),
            wrap_transport: Box::new(|t| t),
        }
    }
}

pub struct Io<'a> {
    pub stdin: &'a mut dyn Read,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

fn write_out(io: &mut Io, text: &str) -> Result<(), CliError> {
    io.stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(format!("cannot write output: {e}")))
}

fn json_out<T: Serialize>(io: &mut Io, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("stage output serializes");
    s.push('\n');
    write_out(io, &s)
}

fn read_source(spec: &str, io: &mut Io) -> Result<String, CliError> {
    if spec == "-" {
        let mut s = String::new();
        io.stdin
            .read_to_string(&mut s)
            .map_err(|e| CliError::Runtime(format!("cannot read stdin: {e}")))?;
        Ok(s)
    } else {
        std::fs::read_to_string(spec)
            .map_err(|e| CliError::Runtime(format!("cannot read {spec}: {e}")))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(
    spec: &str,
    what: &str,
    io: &mut Io,
) -> Result<T, CliError> {
    let text = read_source(spec, io)?;
    serde_json::from_str(&text).map_err(|e| {
        let name = if spec == "-" { "stdin" } else { spec };
        CliError::Runtime(format!("{name} is not a valid {what}: {e}"))
    })
}

fn read_item(path: &Path, io: &mut Io) -> Result<McqItem, CliError> {
    let item: McqItem = read_json(&path.display().to_string(), "item", io)?;
    item.validate()?;
    Ok(item)
}

/// Everything a command needs, built lazily from the resolved config.
struct Runtime<'h> {
    cfg: CliConfig,
    hooks: &'h Hooks,
    transport: Option<Arc<dyn HttpTransport>>,
}

impl<'h> Runtime<'h> {
    fn new(cfg: CliConfig, hooks: &'h Hooks) -> Self {
        Self {
            cfg,
            hooks,
            transport: None,
        }
    }

    /// The transport for outbound HTTP: the replay file when given,
    /// otherwise the live client, which offline mode forbids.
    fn transport(&mut self, purpose: &str) -> Result<Arc<dyn HttpTransport>, CliError> {
        if let Some(t) = &self.transport {
            return Ok(t.clone());
        }
        let base: Arc<dyn HttpTransport> = match &self.cfg.replay {
            Some(path) => Arc::new(
                ReplayTransport::from_file(path).map_err(|e| CliError::Usage(e.to_string()))?,
            ),
            None if self.cfg.offline => {
                return Err(CliError::Usage(format!(
                    "{purpose} needs the network, which --offline forbids (use --mock/--replay)"
                )))
            }
            None => (self.hooks.live_transport)(),
        };
        let t = (self.hooks.wrap_transport)(base);
        self.transport = Some(t.clone());
        Ok(t)
    }

    fn gateway(&mut self) -> Result<Arc<Gateway>, CliError> {
        let backend: Arc<dyn ChatBackend> = match &self.cfg.mock {
            Some(path) => {
                Arc::new(MockBackend::from_file(path).map_err(|e| CliError::Usage(e.to_string()))?)
            }
            None => {
                let t = self.transport("the completion provider")?;
                Arc::new(HttpChatBackend::new(self.cfg.provider.clone(), t))
            }
        };
        Ok(Arc::new(Gateway::new(backend, self.store("chat")?)))
    }

    fn store(&self, name: &str) -> Result<Arc<KvStore>, CliError> {
        KvStore::open(&self.cfg.cache_dir, name)
            .map(Arc::new)
            .map_err(|e| {
                CliError::Runtime(format!(
                    "cannot open cache in {}: {e}",
                    self.cfg.cache_dir.display()
                ))
            })
    }

    fn embeddings(&mut self) -> Result<Arc<EmbeddingStore>, CliError> {
        let e = self.cfg.embedding.clone();
        let provider: Arc<dyn EmbeddingProvider> = match e.kind {
            EmbedderKind::Hash => Arc::new(HashEmbedder::new(e.dim, e.seed)),
            EmbedderKind::Http => Arc::new(HttpEmbedder::new(
                e.endpoint,
                e.model,
                e.dim,
                e.auth_token_env_var,
                self.transport("the embedding endpoint")?,
            )),
        };
        Ok(Arc::new(EmbeddingStore::new(
            provider,
            self.store("embeddings")?,
        )))
    }

    fn sources(&mut self) -> Result<Arc<RetrievalSources>, CliError> {
        let local = match &self.cfg.retrieval.corpus {
            Some(path) => {
                let report = ingest_local(path)?;
                for w in &report.warnings {
                    log::warn!("{}: {w}", path.display());
                }
                Some(LocalIndex::new(report.documents))
            }
            None => None,
        };
        let use_pubmed =
            self.cfg.pubmed.enabled && !(self.cfg.offline && self.cfg.replay.is_none());
        let pubmed = if use_pubmed {
            Some(PubmedClient::new(
                self.cfg.pubmed.client.clone(),
                self.transport("PubMed")?,
            ))
        } else {
            None
        };
        let sources = RetrievalSources { pubmed, local };
        if sources.is_empty() {
            return Err(CliError::Usage(
                "no retrieval source: pass --corpus, or allow PubMed (not offline, or with --replay)".into(),
            ));
        }
        Ok(Arc::new(sources))
    }

    fn expansion_config(&self) -> Result<ExpansionConfig, CliError> {
        let e = &self.cfg.expansion;
        let template = match &self.cfg.prompts.expansion_template {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|err| CliError::Runtime(format!("cannot read {}: {err}", p.display())))?,
            None => DEFAULT_EXPANSION_TEMPLATE.to_string(),
        };
        Ok(ExpansionConfig {
            target_n: e.target_n,
            temperature: e.temperature,
            max_output_tokens: e.max_output_tokens,
            model_id: e.model_id.clone(),
            template,
        })
    }

    fn engine(&self) -> Result<PromptEngine, CliError> {
        let p = &self.cfg.prompts;
        let exemplars = load_fewshots(p.fewshots.as_deref())?;
        let templates = match &p.template_dir {
            Some(dir) => PromptTemplates::from_dir(dir)?,
            None => PromptTemplates::default(),
        };
        Ok(PromptEngine::new(exemplars, templates))
    }

    fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let r = &self.cfg.retrieval;
        self.cfg.mmr.validate()?;
        Ok(PipelineConfig {
            expansion: self.expansion_config()?,
            mmr: self.cfg.mmr,
            per_query_max: r.per_query_max,
            max_chunk_chars: r.max_chunk_chars,
            chunk_overlap_chars: r.chunk_overlap_chars,
            answer_model_id: self.cfg.answer.model_id.clone(),
            answer_max_output_tokens: self.cfg.answer.max_output_tokens,
            fetched_at: self.cfg.offline.then_some(DateTime::UNIX_EPOCH),
        })
    }

    /// A pipeline with only the parts `needs` asks for actually connected.
    fn pipeline(&mut self, needs_retrieval: bool) -> Result<Pipeline, CliError> {
        let config = self.pipeline_config()?;
        let gateway = self.gateway()?;
        let sources = if needs_retrieval {
            self.sources()?
        } else {
            Arc::new(RetrievalSources::default())
        };
        let embeddings = if needs_retrieval {
            self.embeddings()?
        } else {
            Arc::new(EmbeddingStore::new(
                Arc::new(HashEmbedder::default()),
                Arc::new(KvStore::in_memory()),
            ))
        };
        Ok(Pipeline {
            gateway,
            sources,
            embeddings,
            engine: self.engine()?,
            config,
        })
    }
}

fn flag_layer(cli: &Cli) -> Table {
    let mut t = Table::new();
    if cli.offline {
        set_path(&mut t, "offline", Value::Boolean(true));
    }
    if cli.no_pubmed {
        set_path(&mut t, "pubmed.enabled", Value::Boolean(false));
    }
    for (key, path) in [
        ("mock", &cli.mock),
        ("replay", &cli.replay),
        ("retrieval.corpus", &cli.corpus),
        ("cache_dir", &cli.cache_dir),
    ] {
        if let Some(p) = path {
            set_path(&mut t, key, path_value(p));
        }
    }
    let (lambda, k) = match &cli.command {
        Some(Command::Select(a)) => (a.lambda, a.k),
        Some(Command::Ask(a)) => (a.lambda, a.k),
        Some(Command::Eval(a)) => (a.lambda, a.k),
        _ => (None, None),
    };
    if let Some(l) = lambda {
        set_path(&mut t, "mmr.lambda", Value::Float(l));
    }
    if let Some(k) = k {
        set_path(&mut t, "mmr.k", Value::Integer(k as i64));
    }
    match &cli.command {
        Some(Command::Expand(a)) => {
            if let Some(n) = a.n {
                set_path(&mut t, "expansion.target_n", Value::Integer(n as i64));
            }
        }
        Some(Command::Retrieve(a)) => {
            if let Some(n) = a.per_query_max {
                set_path(&mut t, "retrieval.per_query_max", Value::Integer(n as i64));
            }
        }
        Some(Command::Eval(a)) => {
            if let Some(s) = a.split {
                set_path(
                    &mut t,
                    "eval.split",
                    Value::String(format!("{s:?}").to_lowercase()),
                );
            }
            if let Some(p) = a.parallelism {
                set_path(&mut t, "eval.parallelism", Value::Integer(p as i64));
            }
            if let Some(o) = &a.out {
                set_path(&mut t, "eval.output_dir", path_value(o));
            }
        }
        _ => {}
    }
    t
}

fn cmd_expand(rt: &mut Runtime, a: &ExpandArgs, io: &mut Io) -> Result<(), CliError> {
    let query = match (&a.question, &a.item) {
        (Some(q), None) => Query::new(a.id.clone(), q.clone())?,
        (None, Some(p)) => Pipeline::item_query(&read_item(p, io)?)?,
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "give a question or --item, not both".into(),
            ))
        }
        (None, None) => return Err(CliError::Usage("expand needs a question or --item".into())),
    };
    let cfg = rt.expansion_config()?;
    if cfg.target_n == 0 {
        return Err(ExpansionError::ZeroTarget.into());
    }
    let gateway = rt.gateway()?;
    let set = halo_core::expansion::expand(&query, cfg.target_n, &gateway, &cfg)?;
    json_out(io, &set)
}

fn cmd_retrieve(rt: &mut Runtime, a: &RetrieveArgs, io: &mut Io) -> Result<(), CliError> {
    let qs: ExpandedQuerySet = read_json(&a.queries, "expanded query set", io)?;
    qs.validate()?;
    let pipeline = rt.pipeline(true)?;
    let out = pipeline.retrieve_stage(&qs)?;
    for f in &out.failures {
        log::warn!(
            "retrieval for {} via {:?} failed: {}",
            f.query_id,
            f.source,
            f.message
        );
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    json_out(io, &out.pool)
}

fn cmd_select(rt: &mut Runtime, a: &SelectArgs, io: &mut Io) -> Result<(), CliError> {
    let mut pool: CandidatePool = read_json(&a.pool, "candidate pool", io)?;
    if let Some(q) = &a.queries {
        pool.query_set = read_json(q, "expanded query set", io)?;
    }
    pool.query_set.validate()?;
    let options = match &a.item {
        Some(p) => read_item(p, io)?.option_lines(),
        None => Vec::new(),
    };
    let pipeline = rt.pipeline(true)?;
    let selection = pipeline
        .select_stage(&pool, &options)?
        .ok_or(MmrError::EmptyPool)?;
    if a.state_only {
        json_out(io, &selection.state)
    } else {
        json_out(io, &selection)
    }
}

#[derive(Serialize)]
struct AskOutput<'a> {
    item_id: &'a str,
    mode: Mode,
    answer: Option<String>,
    parse_rule: halo_core::prompt::ParseRule,
    raw: &'a str,
    degraded_context: bool,
    selection: Option<&'a Selection>,
    prompt: Option<&'a halo_core::prompt::PromptBundle>,
    warnings: &'a [String],
}

fn cmd_ask(rt: &mut Runtime, a: &AskArgs, io: &mut Io) -> Result<(), CliError> {
    let item = read_item(&a.item, io)?;
    let piped: Option<Selection> = match &a.selection {
        Some(spec) => Some(read_json(spec, "selection", io)?),
        None => None,
    };
    let mode = if piped.is_some() { Mode::Halo } else { a.mode };
    if piped.is_some() && a.mode == Mode::Baseline {
        return Err(CliError::Usage(
            "--selection only applies to halo mode".into(),
        ));
    }
    let pipeline = rt.pipeline(mode == Mode::Halo && piped.is_none())?;
    let (bundle, parsed, selection, degraded, warnings) = match piped {
        Some(sel) => {
            let degraded = sel.chunks.is_empty();
            let (bundle, parsed) =
                pipeline.answer_stage(&item, &sel.chunks, Mode::Halo, degraded)?;
            (bundle, parsed, Some(sel), degraded, Vec::new())
        }
        None => {
            let out = pipeline.answer_item(&item, mode)?;
            (
                out.bundle,
                out.parsed,
                out.selection,
                out.degraded_context,
                out.warnings,
            )
        }
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let answer = parsed.choice.map(|l| l.to_string());
    if a.json {
        return json_out(
            io,
            &AskOutput {
                item_id: &item.item_id,
                mode,
                answer,
                parse_rule: parsed.parse_rule,
                raw: &parsed.raw,
                degraded_context: degraded,
                selection: selection.as_ref(),
                prompt: a.show_prompt.then_some(&bundle),
                warnings: &warnings,
            },
        );
    }
    let mut out = String::new();
    if a.show_prompt {
        out.push_str(&format!(
            "=== system ===\n{}\n=== user ===\n{}\n=== end prompt ===\n",
            bundle.system_text, bundle.user_text
        ));
    }
    out.push_str(&format!(
        "Answer: {}\n",
        answer.as_deref().unwrap_or("none (unparseable reply)")
    ));
    if let Some(sel) = &selection {
        out.push_str("Selected context:\n");
        for (i, p) in sel.trace.iter().enumerate() {
            out.push_str(&format!(
                "  {}. {} score={:.4} mean_rel={:.4} max_sim={:.4}\n",
                i + 1,
                p.chunk_id,
                p.score,
                p.mean_rel,
                p.max_sim_to_selected
            ));
        }
    } else if degraded {
        out.push_str("Selected context: none (retrieval returned nothing)\n");
    }
    write_out(io, &out)
}

fn cmd_eval(rt: &mut Runtime, a: &EvalArgs, io: &mut Io) -> Result<(), CliError> {
    let needs_retrieval = a.modes.contains(&Mode::Halo);
    let pipeline = rt.pipeline(needs_retrieval)?;
    let cfg = &rt.cfg;
    let provider_id = if cfg.mock.is_some() {
        "mock".to_string()
    } else {
        cfg.provider.provider_id.clone()
    };
    let eval_cfg = EvalConfig {
        dataset_path: a.dataset.clone(),
        split: cfg.eval.split,
        modes: a.modes.clone(),
        sample_size: a.sample,
        seed: a.seed,
        subjects: a.subjects.clone(),
        keywords: a.keywords.clone(),
        parallelism: cfg.eval.parallelism,
        provider_id,
        model_id: cfg.answer.model_id.clone(),
        mmr: cfg.mmr,
        expansion: pipeline.config.expansion.clone(),
        checkpoint_every: cfg.eval.checkpoint_every,
    };
    let out_dir = cfg.eval.output_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let opts = RunOptions {
        checkpoint: Some(out_dir.join("checkpoint.jsonl")),
        resume: a.resume,
        progress: a.progress,
    };
    let mut run = eval::run_eval(&eval_cfg, &pipeline, &opts)?;
    let items_path = out_dir.join("items.jsonl");
    eval::write_item_results(&items_path, &run.results)?;
    run.report.item_results_path = Some(items_path.display().to_string());
    for format in [
        ReportFormat::Json,
        ReportFormat::Csv,
        ReportFormat::Markdown,
    ] {
        let path = out_dir.join(format!("report.{}", format.extension()));
        eval::emit_report(&run.report, format, &path)?;
    }
    let mut summary = eval::render_report(&run.report, ReportFormat::Markdown);
    let errors: usize = run.report.modes.iter().map(|m| m.errors).sum();
    if errors > 0 {
        summary.push_str(&format!(
            "warning: {errors} item runs failed and were scored incorrect\n"
        ));
    }
    if !run.dataset_warnings.is_empty() {
        summary.push_str(&format!(
            "warning: {} dataset lines skipped\n",
            run.dataset_warnings.len()
        ));
    }
    summary.push_str(&format!("reports written to {}\n", out_dir.display()));
    write_out(io, &summary)
}

fn report_error(err: &CliError, json: bool, io: &mut Io) {
    let text = if json {
        serde_json::json!({
            "error": { "kind": err.kind(), "message": err.to_string(), "exit_code": err.exit_code() }
        })
        .to_string()
    } else {
        format!("error: {err}")
    };
    let _ = writeln!(io.stderr, "{text}");
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code.
pub fn run(args: &[String], env: &BTreeMap<String, String>, io: &mut Io, hooks: &Hooks) -> i32 {
    let json_errors = args.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(io.stdout, "{e}");
                return EXIT_OK;
            }
            if json_errors {
                report_error(&CliError::Usage(e.kind().to_string()), true, io);
            } else {
                let _ = write!(io.stderr, "{e}");
            }
            return EXIT_USAGE;
        }
    };
    match execute(&cli, env, io, hooks) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            report_error(&err, cli.json_errors, io);
            err.exit_code()
        }
    }
}

fn execute(
    cli: &Cli,
    env: &BTreeMap<String, String>,
    io: &mut Io,
    hooks: &Hooks,
) -> Result<(), CliError> {
    let cfg =
        config::resolve(cli.config.as_deref(), env, flag_layer(cli)).map_err(CliError::Usage)?;
    if cli.print_config {
        return write_out(io, &config::to_toml(&cfg));
    }
    let mut rt = Runtime::new(cfg, hooks);
    match &cli.command {
        None => Err(CliError::Usage("no command given; see --help".into())),
        Some(Command::Expand(a)) => cmd_expand(&mut rt, a, io),
        Some(Command::Retrieve(a)) => cmd_retrieve(&mut rt, a, io),
        Some(Command::Select(a)) => cmd_select(&mut rt, a, io),
        Some(Command::Ask(a)) => cmd_ask(&mut rt, a, io),
        Some(Command::Eval(a)) => cmd_eval(&mut rt, a, io),
    }
}
