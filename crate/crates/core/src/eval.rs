//! Dataset ingestion, batch evaluation, scoring and reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::expansion::ExpansionConfig;
use crate::gateway::GatewayError;
use crate::mmr::MmrConfig;
use crate::pipeline::{ItemOutcome, Pipeline, PipelineError, StageTimings};
use crate::prompt::{Label, McqItem, McqOption, Mode, ParseRule, ParsedAnswer};
use crate::retrieval::LineWarning;

pub const REPORT_SCHEMA: &str = "halo-report/1";
pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_CHECKPOINT_EVERY: usize = 50;
pub const UNKNOWN_SUBJECT: &str = "Unknown";
pub const OVERALL: &str = "OVERALL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Dev,
    Test,
    Custom,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "custom" => Ok(Split::Custom),
            other => Err(format!(
                "unknown split {other:?} (expected dev, test or custom)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {0} has no valid items")]
    EmptyDataset(String),
    #[error("result refers to unknown item id {0}")]
    UnknownItemId(String),
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("provider failure: {0}")]
    ProviderFailure(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLoad {
    pub items: Vec<McqItem>,
    pub warnings: Vec<LineWarning>,
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(format!("field {key} has unexpected type: {other}")),
    }
}

fn parse_dataset_line(line: &str, split: Split) -> Result<McqItem, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("line is not a JSON object")?;
    let id = text_field(obj, "id")?
        .filter(|s| !s.trim().is_empty())
        .ok_or("missing id")?;
    let question = text_field(obj, "question")?
        .filter(|s| !s.trim().is_empty())
        .ok_or("empty or missing question")?;
    let mut keys = vec!["opa", "opb", "opc", "opd"];
    if split == Split::Custom && obj.get("ope").is_some_and(|v| !v.is_null()) {
        keys.push("ope");
    }
    let options = keys
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let text = text_field(obj, k)?.ok_or(format!("missing {k}"))?;
            Ok(McqOption {
                label: Label::from_index(i).unwrap(),
                text,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let cop = obj
        .get("cop")
        .and_then(Value::as_i64)
        .ok_or("missing or non-integer cop")?;
    let gold = usize::try_from(cop)
        .ok()
        .filter(|&c| c < options.len())
        .and_then(Label::from_index)
        .ok_or(format!(
            "cop {cop} out of range for {} options",
            options.len()
        ))?;
    let subject = text_field(obj, "subject_name")?
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| UNKNOWN_SUBJECT.to_string());
    let topic = text_field(obj, "topic_name")?.unwrap_or_default();
    Ok(McqItem {
        item_id: id,
        question,
        options,
        gold,
        subject,
        topic,
    })
}

/// Reads a MedMCQA-style JSON-lines file (`id, question, opa..opd, cop,
/// subject_name, topic_name`, `cop` being the 0-based index of the correct
/// option). Under [`Split::Custom`] an `ope` field adds a fifth option.
pub fn load_dataset(path: &Path, split: Split) -> Result<DatasetLoad, EvalError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        match parse_dataset_line(&line, split) {
            Ok(item) if !seen.insert(item.item_id.clone()) => warnings.push(LineWarning {
                line: lineno,
                message: format!("duplicate id {}, skipped", item.item_id),
            }),
            Ok(item) => items.push(item),
            Err(message) => warnings.push(LineWarning {
                line: lineno,
                message,
            }),
        }
    }
    for w in &warnings {
        log::warn!("{}:{}: {}", path.display(), w.line, w.message);
    }
    if items.is_empty() {
        return Err(EvalError::EmptyDataset(path.display().to_string()));
    }
    Ok(DatasetLoad { items, warnings })
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Keeps items whose subject is listed (when a list is given) and whose
/// question or option texts mention any keyword (when given). Matching is
/// case-insensitive and order is preserved.
pub fn filter_items(items: &[McqItem], subjects: &[String], keywords: &[String]) -> Vec<McqItem> {
    let subjects: HashSet<String> = subjects
        .iter()
        .map(|s| fold(s))
        .filter(|s| !s.is_empty())
        .collect();
    let keywords: Vec<String> = keywords
        .iter()
        .map(|k| fold(k))
        .filter(|k| !k.is_empty())
        .collect();
    items
        .iter()
        .filter(|item| subjects.is_empty() || subjects.contains(&fold(&item.subject)))
        .filter(|item| {
            if keywords.is_empty() {
                return true;
            }
            let haystack = std::iter::once(item.question.as_str())
                .chain(item.options.iter().map(|o| o.text.as_str()))
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
                .join("\n");
            keywords.iter().any(|k| haystack.contains(k))
        })
        .cloned()
        .collect()
}

/// Seeded shuffle, then the first `size` items.
pub fn sample_items(items: &[McqItem], size: usize, seed: u64) -> Vec<McqItem> {
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    shuffled.truncate(size);
    shuffled
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub dataset_path: PathBuf,
    pub split: Split,
    pub modes: Vec<Mode>,
    pub sample_size: Option<usize>,
    pub seed: u64,
    pub subjects: Vec<String>,
    pub keywords: Vec<String>,
    pub parallelism: usize,
    pub provider_id: String,
    pub model_id: String,
    pub mmr: MmrConfig,
    pub expansion: ExpansionConfig,
    pub checkpoint_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let expansion = ExpansionConfig::default();
        Self {
            dataset_path: PathBuf::new(),
            split: Split::Dev,
            modes: vec![Mode::Baseline, Mode::Halo],
            sample_size: None,
            seed: 0,
            subjects: Vec::new(),
            keywords: Vec::new(),
            parallelism: DEFAULT_PARALLELISM,
            provider_id: "openai".into(),
            model_id: expansion.model_id.clone(),
            mmr: MmrConfig::default(),
            expansion,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        if self.modes.is_empty() {
            return bad("at least one mode is required");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if self.sample_size == Some(0) {
            return bad("sample size must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint interval must be at least 1");
        }
        self.mmr
            .validate()
            .map_err(|e| EvalError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub mode: Mode,
    pub subject: String,
    pub gold: Label,
    pub parsed: ParsedAnswer,
    pub correct: bool,
    pub selection_trace_id: Option<String>,
    #[serde(default)]
    pub selected_chunks: Vec<String>,
    #[serde(default)]
    pub degraded_context: bool,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub provider_error: bool,
    pub timings: StageTimings,
}

impl ItemResult {
    fn key(&self) -> (String, Mode) {
        (self.item_id.clone(), self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: String,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

impl SubjectRow {
    fn new(subject: impl Into<String>, n_items: usize, n_correct: usize) -> Self {
        Self {
            subject: subject.into(),
            n_items,
            n_correct,
            accuracy: n_correct as f64 / n_items as f64,
        }
    }
}

/// Per-mode, per-subject counts sorted by subject name. Only subjects with
/// at least one result appear.
pub fn aggregate_by_subject(
    results: &[ItemResult],
    items: &[McqItem],
) -> Result<BTreeMap<Mode, Vec<SubjectRow>>, EvalError> {
    let subject_of: BTreeMap<&str, &str> = items
        .iter()
        .map(|i| (i.item_id.as_str(), i.subject.as_str()))
        .collect();
    let mut counts: BTreeMap<Mode, BTreeMap<String, (usize, usize)>> = BTreeMap::new();
    for r in results {
        let subject = subject_of
            .get(r.item_id.as_str())
            .ok_or_else(|| EvalError::UnknownItemId(r.item_id.clone()))?;
        let slot = counts
            .entry(r.mode)
            .or_default()
            .entry(subject.to_string())
            .or_default();
        slot.0 += 1;
        slot.1 += usize::from(r.correct);
    }
    Ok(counts
        .into_iter()
        .map(|(mode, rows)| {
            let rows = rows
                .into_iter()
                .map(|(s, (n, c))| SubjectRow::new(s, n, c))
                .collect();
            (mode, rows)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub model_id: String,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub parse_failures: usize,
    pub errors: usize,
    pub degraded_contexts: usize,
    pub subjects: Vec<SubjectRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub config: EvalConfig,
    pub seed: u64,
    /// `None` when the full (filtered) dataset was evaluated.
    pub sample_size: Option<usize>,
    pub item_count: usize,
    pub modes: Vec<ModeSummary>,
    pub item_results_path: Option<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl EvalReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Checks the count identities every report must satisfy.
    pub fn check_integrity(&self) -> Result<(), String> {
        if self.schema != REPORT_SCHEMA {
            return Err(format!("unexpected schema {}", self.schema));
        }
        for m in &self.modes {
            if m.n_items != self.item_count {
                return Err(format!(
                    "{}: {} results for {} items",
                    m.mode, m.n_items, self.item_count
                ));
            }
            if m.n_correct > m.n_items || m.accuracy != m.n_correct as f64 / m.n_items as f64 {
                return Err(format!("{}: accuracy does not match counts", m.mode));
            }
            let n: usize = m.subjects.iter().map(|r| r.n_items).sum();
            let c: usize = m.subjects.iter().map(|r| r.n_correct).sum();
            if n != m.n_items || c != m.n_correct {
                return Err(format!("{}: subject rows do not sum to the totals", m.mode));
            }
            if m.subjects.iter().any(|r| r.n_items == 0) {
                return Err(format!("{}: empty subject row", m.mode));
            }
        }
        Ok(())
    }

    /// Copy with both timestamps zeroed, for run-to-run comparison.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_at: DateTime::UNIX_EPOCH,
            finished_at: DateTime::UNIX_EPOCH,
            ..self.clone()
        }
    }
}

fn summarize(
    results: &[ItemResult],
    items: &[McqItem],
    modes: &[Mode],
    model_id: &str,
) -> Result<Vec<ModeSummary>, EvalError> {
    let mut by_subject = aggregate_by_subject(results, items)?;
    Ok(modes
        .iter()
        .map(|&mode| {
            let rs: Vec<&ItemResult> = results.iter().filter(|r| r.mode == mode).collect();
            let n_correct = rs.iter().filter(|r| r.correct).count();
            ModeSummary {
                mode,
                model_id: model_id.to_string(),
                n_items: rs.len(),
                n_correct,
                accuracy: if rs.is_empty() {
                    0.0
                } else {
                    n_correct as f64 / rs.len() as f64
                },
                parse_failures: rs
                    .iter()
                    .filter(|r| r.error.is_none() && r.parsed.parse_rule == ParseRule::Failed)
                    .count(),
                errors: rs.iter().filter(|r| r.error.is_some()).count(),
                degraded_contexts: rs.iter().filter(|r| r.degraded_context).count(),
                subjects: by_subject.remove(&mode).unwrap_or_default(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// JSON-lines file that completed results are appended to.
    pub checkpoint: Option<PathBuf>,
    /// Skip (item, mode) pairs already present in the checkpoint.
    pub resume: bool,
    /// Print a per-item counter to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    /// Sorted by item id, then mode.
    pub results: Vec<ItemResult>,
    pub dataset_warnings: Vec<LineWarning>,
}

pub fn read_item_results(path: &Path) -> Result<Vec<ItemResult>, EvalError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!(
                "{}:{}: unreadable result skipped: {e}",
                path.display(),
                i + 1
            ),
        }
    }
    Ok(out)
}

pub fn write_item_results(path: &Path, results: &[ItemResult]) -> Result<(), EvalError> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).expect("result serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn append_results(path: &Path, results: &[ItemResult]) -> Result<(), EvalError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    for r in results {
        writeln!(
            f,
            "{}",
            serde_json::to_string(r).expect("result serializes")
        )
        .map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

fn to_result(
    item: &McqItem,
    mode: Mode,
    outcome: Result<ItemOutcome, PipelineError>,
) -> ItemResult {
    let mut result = ItemResult {
        item_id: item.item_id.clone(),
        mode,
        subject: item.subject.clone(),
        gold: item.gold,
        parsed: ParsedAnswer::failed(""),
        correct: false,
        selection_trace_id: None,
        selected_chunks: Vec::new(),
        degraded_context: false,
        error: None,
        provider_error: false,
        timings: StageTimings::default(),
    };
    match outcome {
        Ok(out) => {
            for w in &out.warnings {
                log::warn!("{} [{mode}]: {w}", item.item_id);
            }
            result.correct = out.parsed.choice == Some(item.gold);
            result.parsed = out.parsed;
            if let Some(sel) = &out.selection {
                result.selection_trace_id = Some(sel.trace_id());
                result.selected_chunks = sel.state.selected.clone();
            }
            result.degraded_context = out.degraded_context;
            result.timings = out.timings;
        }
        Err(e) => {
            log::warn!("{} [{mode}]: {e}", item.item_id);
            result.provider_error = e.gateway_error().is_some();
            result.error = Some(e.to_string());
        }
    }
    result
}

/// Items actually evaluated for `cfg`: loaded, filtered, then sampled.
pub fn select_items(cfg: &EvalConfig) -> Result<(Vec<McqItem>, Vec<LineWarning>), EvalError> {
    let load = load_dataset(&cfg.dataset_path, cfg.split)?;
    let mut items = filter_items(&load.items, &cfg.subjects, &cfg.keywords);
    if let Some(size) = cfg.sample_size {
        items = sample_items(&items, size, cfg.seed);
    }
    Ok((items, load.warnings))
}

/// Evaluates every selected item in every configured mode with at most
/// `cfg.parallelism` items in flight. Each item gets fresh, history-free
/// calls. Item failures are scored incorrect; the run aborts only when the
/// provider rejects credentials or every call failed at the provider.
pub fn run_eval(
    cfg: &EvalConfig,
    pipeline: &Pipeline,
    opts: &RunOptions,
) -> Result<EvalRun, EvalError> {
    cfg.validate()?;
    let started_at = Utc::now();
    let (items, dataset_warnings) = select_items(cfg)?;
    if items.is_empty() {
        return Err(EvalError::EmptyDataset(format!(
            "{} (after filtering)",
            cfg.dataset_path.display()
        )));
    }

    let mut done: BTreeMap<(String, Mode), ItemResult> = BTreeMap::new();
    if let Some(cp) = &opts.checkpoint {
        if opts.resume && cp.exists() {
            let wanted: HashSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
            for r in read_item_results(cp)? {
                if wanted.contains(r.item_id.as_str()) && cfg.modes.contains(&r.mode) {
                    done.insert(r.key(), r);
                }
            }
        } else if cp.exists() {
            fs::remove_file(cp).map_err(io_err(cp))?;
        }
    }

    let work: Vec<(&McqItem, Mode)> = items
        .iter()
        .flat_map(|i| cfg.modes.iter().map(move |&m| (i, m)))
        .filter(|(i, m)| !done.contains_key(&(i.item_id.clone(), *m)))
        .collect();
    let next = AtomicUsize::new(0);
    let finished = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let auth_failure: Mutex<Option<String>> = Mutex::new(None);
    let pending: Mutex<Vec<ItemResult>> = Mutex::new(Vec::new());
    let fresh: Mutex<Vec<ItemResult>> = Mutex::new(Vec::new());
    let checkpoint_error: Mutex<Option<EvalError>> = Mutex::new(None);

    let flush = |batch: Vec<ItemResult>| {
        if let (Some(cp), false) = (&opts.checkpoint, batch.is_empty()) {
            if let Err(e) = append_results(cp, &batch) {
                checkpoint_error.lock().unwrap().get_or_insert(e);
            }
        }
    };

    std::thread::scope(|scope| {
        for _ in 0..cfg.parallelism.min(work.len().max(1)) {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(item, mode)) = work.get(idx) else {
                    break;
                };
                let outcome = pipeline.answer_item(item, mode);
                if let Err(e) = &outcome {
                    if matches!(e.gateway_error(), Some(GatewayError::Auth { .. })) {
                        auth_failure.lock().unwrap().get_or_insert(e.to_string());
                        abort.store(true, Ordering::SeqCst);
                        break;
                    }
                }
                let result = to_result(item, mode, outcome);
                let n = finished.fetch_add(1, Ordering::SeqCst) + 1;
                if opts.progress {
                    eprintln!("[{n}/{}] {} {mode}", work.len(), item.item_id);
                }
                fresh.lock().unwrap().push(result.clone());
                let batch = {
                    let mut p = pending.lock().unwrap();
                    p.push(result);
                    if p.len() >= cfg.checkpoint_every {
                        std::mem::take(&mut *p)
                    } else {
                        Vec::new()
                    }
                };
                flush(batch);
            });
        }
    });
    flush(std::mem::take(&mut *pending.lock().unwrap()));

    if let Some(msg) = auth_failure.into_inner().unwrap() {
        return Err(EvalError::ProviderFailure(msg));
    }
    if let Some(e) = checkpoint_error.into_inner().unwrap() {
        return Err(e);
    }
    let fresh = fresh.into_inner().unwrap();
    if !fresh.is_empty() && fresh.iter().all(|r| r.provider_error) {
        return Err(EvalError::ProviderFailure(format!(
            "all {} calls failed; first error: {}",
            fresh.len(),
            fresh[0].error.as_deref().unwrap_or("unknown")
        )));
    }
    for r in fresh {
        done.insert(r.key(), r);
    }
    let results: Vec<ItemResult> = done.into_values().collect();
    let modes = summarize(&results, &items, &cfg.modes, &cfg.model_id)?;
    Ok(EvalRun {
        report: EvalReport {
            schema: REPORT_SCHEMA.into(),
            config: cfg.clone(),
            seed: cfg.seed,
            sample_size: cfg.sample_size,
            item_count: items.len(),
            modes,
            item_results_path: None,
            started_at,
            finished_at: Utc::now(),
        },
        results,
        dataset_warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "markdown",
        })
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

pub fn parse_report_json(text: &str) -> Result<EvalReport, EvalError> {
    let report: EvalReport =
        serde_json::from_str(text).map_err(|e| EvalError::MalformedReport(e.to_string()))?;
    if report.schema != REPORT_SCHEMA {
        return Err(EvalError::MalformedReport(format!(
            "unsupported schema {}",
            report.schema
        )));
    }
    Ok(report)
}

fn render_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode",
        "model_id",
        "subject",
        "n_items",
        "n_correct",
        "accuracy",
    ])
    .expect("in-memory write");
    for m in &report.modes {
        let overall = SubjectRow {
            subject: OVERALL.into(),
            n_items: m.n_items,
            n_correct: m.n_correct,
            accuracy: m.accuracy,
        };
        for row in m.subjects.iter().chain(std::iter::once(&overall)) {
            w.write_record([
                m.mode.to_string(),
                m.model_id.clone(),
                row.subject.clone(),
                row.n_items.to_string(),
                row.n_correct.to_string(),
                format!("{:.4}", row.accuracy),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn acc_cell(row: Option<(usize, usize)>) -> String {
    match row {
        Some((n, c)) if n > 0 => format!("{:.2} ({c}/{n})", c as f64 / n as f64),
        _ => "-".into(),
    }
}

fn render_markdown(report: &EvalReport) -> String {
    let base = report.mode(Mode::Baseline);
    let halo = report.mode(Mode::Halo);
    let model = report
        .modes
        .first()
        .map(|m| m.model_id.as_str())
        .unwrap_or("-");
    let mut out = String::new();
    out.push_str("| Model | w/o HALO Acc. | w/ HALO Acc. |\n|---|---|---|\n");
    out.push_str(&format!(
        "| {model} | {} | {} |\n",
        acc_cell(base.map(|m| (m.n_items, m.n_correct))),
        acc_cell(halo.map(|m| (m.n_items, m.n_correct))),
    ));

    let mut subjects: Vec<&str> = report
        .modes
        .iter()
        .flat_map(|m| m.subjects.iter().map(|r| r.subject.as_str()))
        .collect();
    subjects.sort_unstable();
    subjects.dedup();
    let cell = |m: Option<&ModeSummary>, s: &str| {
        acc_cell(
            m.and_then(|m| m.subjects.iter().find(|r| r.subject == s))
                .map(|r| (r.n_items, r.n_correct)),
        )
    };
    out.push_str("\n| Subject | w/o HALO Acc. | w/ HALO Acc. |\n|---|---|---|\n");
    for s in subjects {
        out.push_str(&format!(
            "| {s} | {} | {} |\n",
            cell(base, s),
            cell(halo, s)
        ));
    }

    out.push('\n');
    for m in &report.modes {
        out.push_str(&format!(
            "{}: {} items, {} correct, {} parse failures, {} errors\n",
            m.mode, m.n_items, m.n_correct, m.parse_failures, m.errors
        ));
    }
    out.push_str(&format!("seed: {}\n", report.seed));
    out
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    }
}

pub fn emit_report(
    report: &EvalReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), EvalError> {
    fs::write(path, render_report(report, format)).map_err(io_err(path))
}
