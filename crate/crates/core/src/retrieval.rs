//! Candidate retrieval: PubMed E-utilities, local JSONL corpora, chunking and
//! the per-question candidate pool.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expansion::{ExpandedQuerySet, Query};
use crate::http::{Clock, HttpRequest, HttpTransport, RateLimiter, RetryPolicy, SystemClock};

pub const DEFAULT_EUTILS_BASE: &str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils";
pub const DEFAULT_PER_QUERY_MAX: usize = 5;
pub const DEFAULT_MAX_CHUNK_CHARS: usize = 1200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Pubmed,
    Local,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Pubmed => "pubmed",
            SourceKind::Local => "local",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source: SourceKind,
    pub retrieved_by: BTreeSet<String>,
    pub fetched_at: DateTime<Utc>,
}

impl Document {
    pub fn pubmed_id(pmid: &str) -> String {
        format!("PMID:{pmid}")
    }

    pub fn local_id(id: &str) -> String {
        format!("local:{id}")
    }

    /// Human-readable attribution, e.g. `PMID 12345`.
    pub fn attribution(doc_id: &str) -> String {
        doc_id.replacen(':', " ", 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub documents: Vec<Document>,
    pub query_set: ExpandedQuerySet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub parent_doc_id: String,
    pub ordinal: usize,
    pub text: String,
    /// Half-open character (not byte) offsets into the parent body.
    pub char_span: (usize, usize),
}

impl Chunk {
    pub fn id(&self) -> String {
        format!("{}#{}", self.parent_doc_id, self.ordinal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub source: SourceKind,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("retrieval failed for every query ({} failures)", .0.len())]
    RetrievalFailed(Vec<QueryFailure>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PubmedConfig {
    pub base_url: String,
    /// Environment variable holding an optional NCBI API key.
    pub api_key_env_var: String,
    pub max_retries: u32,
}

impl Default for PubmedConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_EUTILS_BASE.into(),
            api_key_env_var: "NCBI_API_KEY".into(),
            max_retries: 4,
        }
    }
}

/// Outcome of an efetch call: documents in request order plus notes about
/// PMIDs that yielded nothing usable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchOutcome {
    pub documents: Vec<Document>,
    pub warnings: Vec<String>,
}

pub struct PubmedClient {
    config: PubmedConfig,
    transport: Arc<dyn HttpTransport>,
    limiter: Arc<RateLimiter>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
}

impl PubmedClient {
    pub fn new(config: PubmedConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self::with_clock(config, transport, Arc::new(SystemClock::new()))
    }

    /// NCBI allows 3 requests/s anonymously and 10 with a key.
    pub fn with_clock(
        config: PubmedConfig,
        transport: Arc<dyn HttpTransport>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let rate = if api_key(&config.api_key_env_var).is_some() {
            10.0
        } else {
            3.0
        };
        let limiter = Arc::new(RateLimiter::per_second(rate, clock.clone()));
        Self {
            retry: RetryPolicy::with_max_retries(config.max_retries),
            config,
            transport,
            limiter,
            clock,
        }
    }

    pub fn esearch_url(&self, term: &str, retmax: usize) -> String {
        let term: String = url::form_urlencoded::byte_serialize(term.as_bytes()).collect();
        self.with_key(format!(
            "{}/esearch.fcgi?db=pubmed&term={term}&retmax={retmax}&retmode=json",
            self.config.base_url.trim_end_matches('/')
        ))
    }

    pub fn efetch_url(&self, pmids: &[String]) -> String {
        self.with_key(format!(
            "{}/efetch.fcgi?db=pubmed&id={}&rettype=abstract&retmode=xml",
            self.config.base_url.trim_end_matches('/'),
            pmids.join(",")
        ))
    }

    fn with_key(&self, url: String) -> String {
        match api_key(&self.config.api_key_env_var) {
            Some(key) => {
                let key: String = url::form_urlencoded::byte_serialize(key.as_bytes()).collect();
                format!("{url}&api_key={key}")
            }
            None => url,
        }
    }

    fn get(&self, url: &str) -> Result<String, RetrievalError> {
        let request = HttpRequest::get(url);
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                self.clock.sleep(self.retry.jittered_delay(attempt - 1));
            }
            self.limiter.acquire();
            match self.transport.execute(&request) {
                Ok(resp) if resp.is_success() => return Ok(resp.body),
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last = format!("HTTP {}", resp.status)
                }
                Ok(resp) => return Err(RetrievalError::Network(format!("HTTP {}", resp.status))),
                Err(e) if e.is_transient() => last = e.to_string(),
                Err(e) => return Err(RetrievalError::Network(e.to_string())),
            }
        }
        Err(RetrievalError::Network(format!(
            "{last} (after {} attempts)",
            self.retry.max_retries + 1
        )))
    }

    /// PMIDs in the service's relevance order, at most `max_results`.
    pub fn search(&self, query: &Query, max_results: usize) -> Result<Vec<String>, RetrievalError> {
        if max_results == 0 {
            return Err(RetrievalError::Precondition(
                "max_results must be positive".into(),
            ));
        }
        let body = self.get(&self.esearch_url(&query.text, max_results))?;
        parse_esearch(&body, max_results)
    }

    pub fn fetch(
        &self,
        pmids: &[String],
        fetched_at: DateTime<Utc>,
    ) -> Result<FetchOutcome, RetrievalError> {
        if pmids.is_empty() {
            return Err(RetrievalError::Precondition(
                "pmids must not be empty".into(),
            ));
        }
        let body = self.get(&self.efetch_url(pmids))?;
        let records = parse_efetch(&body)?;
        let mut by_pmid: HashMap<&str, &ArticleRecord> = HashMap::new();
        for r in &records {
            by_pmid.entry(r.pmid.as_str()).or_insert(r);
        }
        let mut documents = Vec::new();
        let mut warnings = Vec::new();
        let mut seen = HashSet::new();
        for pmid in pmids {
            if !seen.insert(pmid.as_str()) {
                continue;
            }
            match by_pmid.get(pmid.as_str()) {
                None => warnings.push(format!("PMID {pmid}: not present in efetch response")),
                Some(r) if r.abstract_text.trim().is_empty() => {
                    warnings.push(format!("PMID {pmid}: no abstract"))
                }
                Some(r) => documents.push(Document {
                    doc_id: Document::pubmed_id(pmid),
                    title: r.title.clone(),
                    body: r.abstract_text.clone(),
                    source: SourceKind::Pubmed,
                    retrieved_by: BTreeSet::new(),
                    fetched_at,
                }),
            }
        }
        Ok(FetchOutcome {
            documents,
            warnings,
        })
    }
}

fn api_key(var: &str) -> Option<String> {
    if var.is_empty() {
        return None;
    }
    std::env::var(var).ok().filter(|k| !k.is_empty())
}

pub fn parse_esearch(body: &str, max_results: usize) -> Result<Vec<String>, RetrievalError> {
    let v: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| RetrievalError::MalformedResponse(format!("esearch body is not JSON: {e}")))?;
    let list = v["esearchresult"]["idlist"].as_array().ok_or_else(|| {
        RetrievalError::MalformedResponse("esearch body has no esearchresult.idlist".into())
    })?;
    let mut ids = Vec::with_capacity(list.len());
    for item in list {
        let id = item
            .as_str()
            .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
        match id {
            Some(id) => ids.push(id.to_string()),
            None => {
                return Err(RetrievalError::MalformedResponse(format!(
                    "idlist entry {item} is not a PMID"
                )))
            }
        }
    }
    ids.truncate(max_results);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArticleRecord {
    pub pmid: String,
    pub title: String,
    /// AbstractText sections joined by newlines, labelled ones as `LABEL: text`.
    pub abstract_text: String,
}

/// Parses an efetch `PubmedArticleSet` document.
pub fn parse_efetch(xml: &str) -> Result<Vec<ArticleRecord>, RetrievalError> {
    let malformed = |m: String| RetrievalError::MalformedResponse(m);
    let mut reader = Reader::from_str(xml);
    let mut stack: Vec<String> = Vec::new();
    let mut records = Vec::new();
    let mut current: Option<(Option<String>, String, Vec<String>)> = None;
    let mut section: Option<(Option<String>, String)> = None;
    let mut saw_root = false;

    loop {
        let event = reader.read_event().map_err(|e| {
            malformed(format!(
                "XML error at byte {}: {e}",
                reader.buffer_position()
            ))
        })?;
        match event {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if stack.is_empty() {
                    if name != "PubmedArticleSet" {
                        return Err(malformed(format!("unexpected root element <{name}>")));
                    }
                    saw_root = true;
                }
                match name.as_str() {
                    "PubmedArticle" => current = Some((None, String::new(), Vec::new())),
                    "AbstractText" if current.is_some() => {
                        let label = e
                            .try_get_attribute("Label")
                            .map_err(|err| malformed(err.to_string()))?
                            .map(|a| a.unescape_value().map(|v| v.into_owned()))
                            .transpose()
                            .map_err(|err| malformed(err.to_string()))?;
                        section = Some((label, String::new()));
                    }
                    _ => {}
                }
                stack.push(name);
            }
            Event::End(_) => {
                let name = stack
                    .pop()
                    .ok_or_else(|| malformed("unbalanced closing tag".into()))?;
                match name.as_str() {
                    "AbstractText" => {
                        if let (Some((label, text)), Some((_, _, sections))) =
                            (section.take(), current.as_mut())
                        {
                            let text = text.trim();
                            if !text.is_empty() {
                                sections.push(match label {
                                    Some(l) if !l.is_empty() => format!("{l}: {text}"),
                                    _ => text.to_string(),
                                });
                            }
                        }
                    }
                    "PubmedArticle" => {
                        if let Some((pmid, title, sections)) = current.take() {
                            let pmid = pmid.ok_or_else(|| {
                                malformed("PubmedArticle without MedlineCitation/PMID".into())
                            })?;
                            records.push(ArticleRecord {
                                pmid,
                                title: title.trim().to_string(),
                                abstract_text: sections.join("\n"),
                            });
                        }
                    }
                    _ => {}
                }
            }
            Event::Text(t) => {
                let text = t
                    .unescape()
                    .map_err(|e| malformed(format!("bad text content: {e}")))?;
                append_text(&stack, &mut current, &mut section, &text);
            }
            Event::CData(c) => {
                let text = String::from_utf8_lossy(&c.into_inner()).into_owned();
                append_text(&stack, &mut current, &mut section, &text);
            }
            Event::Empty(e) => {
                if stack.is_empty() {
                    let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                    if name != "PubmedArticleSet" {
                        return Err(malformed(format!("unexpected root element <{name}>")));
                    }
                    saw_root = true;
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(malformed(format!(
            "document ended inside <{}>",
            stack.join("><")
        )));
    }
    if !saw_root {
        return Err(malformed("no PubmedArticleSet element".into()));
    }
    Ok(records)
}

fn append_text(
    stack: &[String],
    current: &mut Option<(Option<String>, String, Vec<String>)>,
    section: &mut Option<(Option<String>, String)>,
    text: &str,
) {
    let Some((pmid, title, _)) = current.as_mut() else {
        return;
    };
    let depth = stack.len();
    if depth >= 2 && stack[depth - 1] == "PMID" && stack[depth - 2] == "MedlineCitation" {
        if pmid.is_none() {
            *pmid = Some(text.trim().to_string());
        }
    } else if stack.iter().any(|s| s == "AbstractText") {
        if let Some((_, buf)) = section.as_mut() {
            buf.push_str(text);
        }
    } else if stack.iter().any(|s| s == "ArticleTitle") {
        title.push_str(text);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineWarning {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestReport {
    pub documents: Vec<Document>,
    pub warnings: Vec<LineWarning>,
}

#[derive(Deserialize)]
struct LocalRecord {
    id: String,
    #[serde(default)]
    title: String,
    body: String,
}

/// Reads a JSONL corpus of `{id, title, body}` records. Bad lines are
/// reported with 1-based line numbers and skipped.
pub fn ingest_local(path: &Path) -> Result<IngestReport, RetrievalError> {
    let text = std::fs::read_to_string(path).map_err(|source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let fetched_at = Utc::now();
    let mut documents = Vec::new();
    let mut warnings = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let warn = |message: String| LineWarning {
            line: line_no,
            message,
        };
        let rec: LocalRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(warn(format!("invalid record: {e}")));
                continue;
            }
        };
        if rec.body.trim().is_empty() {
            warnings.push(warn("empty body".into()));
            continue;
        }
        if !ids.insert(rec.id.clone()) {
            warnings.push(warn(format!("duplicate id {}", rec.id)));
            continue;
        }
        documents.push(Document {
            doc_id: Document::local_id(&rec.id),
            title: rec.title,
            body: rec.body,
            source: SourceKind::Local,
            retrieved_by: BTreeSet::new(),
            fetched_at,
        });
    }
    Ok(IngestReport {
        documents,
        warnings,
    })
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "does", "for", "from", "has", "have", "how",
    "in", "is", "it", "its", "of", "on", "or", "such", "that", "the", "their", "this", "to", "was",
    "what", "which", "with", "who", "why",
];

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// In-memory BM25 index over a local corpus.
pub struct LocalIndex {
    documents: Vec<Document>,
    term_freqs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl LocalIndex {
    const K1: f64 = 1.2;
    const B: f64 = 0.75;

    pub fn new(documents: Vec<Document>) -> Self {
        let mut term_freqs = Vec::with_capacity(documents.len());
        let mut lengths = Vec::with_capacity(documents.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for d in &documents {
            let toks = tokens(&format!("{} {}", d.title, d.body));
            lengths.push(toks.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let avg_len = if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
        };
        Self {
            documents,
            term_freqs,
            lengths,
            doc_freq,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Top `k` documents with a positive score; ties go to the smaller doc_id.
    pub fn search(&self, query: &str, k: usize) -> Vec<Document> {
        let n = self.documents.len() as f64;
        let mut q_terms = tokens(query);
        q_terms.sort();
        q_terms.dedup();
        let mut scored: Vec<(f64, usize)> = (0..self.documents.len())
            .filter_map(|i| {
                let tf = &self.term_freqs[i];
                let len_norm =
                    1.0 - Self::B + Self::B * self.lengths[i] as f64 / self.avg_len.max(1.0);
                let score: f64 = q_terms
                    .iter()
                    .filter_map(|t| {
                        let f = *tf.get(t)? as f64;
                        let df = self.doc_freq[t] as f64;
                        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                        Some(idf * f * (Self::K1 + 1.0) / (f + Self::K1 * len_norm))
                    })
                    .sum();
                (score > 0.0).then_some((score, i))
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.documents[a.1].doc_id.cmp(&self.documents[b.1].doc_id))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(_, i)| self.documents[i].clone())
            .collect()
    }
}

/// Splits a document body into passages of at most `max_chunk_chars`
/// characters, cutting after the last sentence end (`.`, `?`, `!` followed
/// by whitespace) that fits, else at the last word break, else hard.
/// Spans tile the body exactly when `overlap_chars` is 0; chunk text is the
/// span with surrounding whitespace trimmed.
pub fn chunk(
    doc: &Document,
    max_chunk_chars: usize,
    overlap_chars: usize,
) -> Result<Vec<Chunk>, RetrievalError> {
    if max_chunk_chars == 0 || overlap_chars >= max_chunk_chars {
        return Err(RetrievalError::Precondition(format!(
            "need 0 <= overlap ({overlap_chars}) < max_chunk_chars ({max_chunk_chars})"
        )));
    }
    if doc.body.trim().is_empty() {
        return Err(RetrievalError::Precondition(format!(
            "document {} has an empty body",
            doc.doc_id
        )));
    }
    let chars: Vec<char> = doc.body.chars().collect();
    let mut byte_at: Vec<usize> = doc.body.char_indices().map(|(b, _)| b).collect();
    byte_at.push(doc.body.len());
    let n = chars.len();

    let mut chunks: Vec<Chunk> = Vec::new();
    let mut pending_start: Option<usize> = None;
    let mut start = 0;
    while start < n {
        let end = if n - start <= max_chunk_chars {
            n
        } else {
            let limit = start + max_chunk_chars;
            let sentence_end = (start + 1..=limit)
                .rev()
                .find(|&b| matches!(chars[b - 1], '.' | '?' | '!') && chars[b].is_whitespace());
            let word_end = || {
                (start + 1..=limit)
                    .rev()
                    .find(|&b| chars[b].is_whitespace() && !chars[b - 1].is_whitespace())
            };
            sentence_end.or_else(word_end).unwrap_or(limit)
        };
        let text = doc.body[byte_at[start]..byte_at[end]].trim();
        if text.is_empty() {
            match chunks.last_mut() {
                Some(prev) => prev.char_span.1 = prev.char_span.1.max(end),
                None => pending_start = Some(pending_start.unwrap_or(start)),
            }
        } else {
            chunks.push(Chunk {
                parent_doc_id: doc.doc_id.clone(),
                ordinal: chunks.len(),
                text: text.to_string(),
                char_span: (pending_start.take().unwrap_or(start), end),
            });
        }
        if end == n {
            break;
        }
        start = if overlap_chars == 0 {
            end
        } else {
            end.saturating_sub(overlap_chars).max(start + 1)
        };
    }
    Ok(chunks)
}

#[derive(Default)]
pub struct RetrievalSources {
    pub pubmed: Option<PubmedClient>,
    pub local: Option<LocalIndex>,
}

impl RetrievalSources {
    pub fn is_empty(&self) -> bool {
        self.pubmed.is_none() && self.local.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolOutcome {
    pub pool: CandidatePool,
    pub failures: Vec<QueryFailure>,
    pub warnings: Vec<String>,
}

struct QueryHits {
    documents: Vec<Document>,
    failures: Vec<QueryFailure>,
    warnings: Vec<String>,
    any_success: bool,
}

fn retrieve_one(
    query: &Query,
    per_query_max: usize,
    sources: &RetrievalSources,
    fetched_at: DateTime<Utc>,
) -> QueryHits {
    let mut hits = QueryHits {
        documents: Vec::new(),
        failures: Vec::new(),
        warnings: Vec::new(),
        any_success: false,
    };
    if let Some(client) = &sources.pubmed {
        let result = client.search(query, per_query_max).and_then(|pmids| {
            if pmids.is_empty() {
                Ok(FetchOutcome {
                    documents: Vec::new(),
                    warnings: Vec::new(),
                })
            } else {
                client.fetch(&pmids, fetched_at)
            }
        });
        match result {
            Ok(out) => {
                hits.any_success = true;
                hits.documents.extend(out.documents);
                hits.warnings.extend(out.warnings);
            }
            Err(e) => hits.failures.push(QueryFailure {
                query_id: query.id.clone(),
                source: SourceKind::Pubmed,
                message: e.to_string(),
            }),
        }
    }
    if let Some(index) = &sources.local {
        hits.any_success = true;
        hits.documents.extend(
            index
                .search(&query.text, per_query_max)
                .into_iter()
                .map(|mut d| {
                    d.fetched_at = fetched_at;
                    d
                }),
        );
    }
    hits
}

/// Retrieves for every query in `[original] + variants` (concurrently) and
/// merges by doc_id. The pool is sorted by doc_id, so its contents do not
/// depend on completion order.
pub fn build_pool(
    query_set: &ExpandedQuerySet,
    per_query_max: usize,
    sources: &RetrievalSources,
    fetched_at: DateTime<Utc>,
) -> Result<PoolOutcome, RetrievalError> {
    if sources.is_empty() {
        return Err(RetrievalError::Precondition(
            "no retrieval source enabled".into(),
        ));
    }
    if per_query_max == 0 {
        return Err(RetrievalError::Precondition(
            "per_query_max must be positive".into(),
        ));
    }
    let queries = query_set.all_queries();
    let per_query: Vec<QueryHits> = std::thread::scope(|scope| {
        let handles: Vec<_> = queries
            .iter()
            .map(|q| scope.spawn(move || retrieve_one(q, per_query_max, sources, fetched_at)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("retrieval worker panicked"))
            .collect()
    });

    let mut merged: BTreeMap<String, Document> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    let mut any_success = false;
    for (query, hits) in queries.iter().zip(per_query) {
        any_success |= hits.any_success;
        failures.extend(hits.failures);
        warnings.extend(hits.warnings);
        for doc in hits.documents {
            merged
                .entry(doc.doc_id.clone())
                .or_insert(doc)
                .retrieved_by
                .insert(query.id.clone());
        }
    }
    if !any_success {
        return Err(RetrievalError::RetrievalFailed(failures));
    }
    warnings.sort();
    warnings.dedup();
    Ok(PoolOutcome {
        pool: CandidatePool {
            documents: merged.into_values().collect(),
            query_set: query_set.clone(),
        },
        failures,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::{
        HttpResponse, ManualClock, RecordedExchange, ReplayTransport, TransportError,
    };
    use proptest::prelude::*;

    fn doc(body: &str) -> Document {
        Document {
            doc_id: "local:d".into(),
            title: String::new(),
            body: body.into(),
            source: SourceKind::Local,
            retrieved_by: BTreeSet::new(),
            fetched_at: DateTime::UNIX_EPOCH,
        }
    }

    #[test]
    fn short_body_is_one_chunk() {
        let c = chunk(&doc("Short abstract."), 1200, 0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].text, "Short abstract.");
        assert_eq!(c[0].char_span, (0, 15));
    }

    #[test]
    fn ten_sentences_split_on_sentence_ends() {
        // each sentence is 29 chars + 1 space; a 100-char limit fits three
        let sentences: Vec<String> = (0..10)
            .map(|i| format!("Sentence number {i} is here ok."))
            .collect();
        let body = sentences.join(" ");
        let chunks = chunk(&doc(&body), 100, 0).unwrap();
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(
            texts,
            vec![
                sentences[0..3].join(" "),
                sentences[3..6].join(" "),
                sentences[6..9].join(" "),
                sentences[9].clone(),
            ]
        );
        assert!(chunks.iter().all(|c| c.text.ends_with('.')));
        assert_eq!(chunks[0].char_span.0, 0);
        for w in chunks.windows(2) {
            assert_eq!(w[0].char_span.1, w[1].char_span.0);
        }
        assert_eq!(chunks.last().unwrap().char_span.1, body.chars().count());
    }

    #[test]
    fn falls_back_to_word_then_hard_split() {
        let c = chunk(&doc("alpha beta gamma delta"), 12, 0).unwrap();
        assert_eq!(c[0].text, "alpha beta");
        let c = chunk(&doc("abcdefghijklmnop"), 5, 0).unwrap();
        let texts: Vec<_> = c.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["abcde", "fghij", "klmno", "p"]);
    }

    #[test]
    fn overlap_must_be_below_limit_and_body_nonempty() {
        assert!(chunk(&doc("abc"), 5, 5).is_err());
        assert!(chunk(&doc("   "), 5, 0).is_err());
    }

    #[test]
    fn overlapping_chunks_progress() {
        let c = chunk(&doc("abcdefghijklmnop"), 6, 2).unwrap();
        assert_eq!(c[0].char_span, (0, 6));
        assert_eq!(c[1].char_span, (4, 10));
        assert_eq!(c.last().unwrap().char_span.1, 16);
    }

    proptest! {
        #[test]
        fn chunks_tile_the_body(body in "[a-zé .!?]{1,300}", max in 1usize..60) {
            prop_assume!(!body.trim().is_empty());
            let d = doc(&body);
            let chunks = chunk(&d, max, 0).unwrap();
            let n = body.chars().count();
            let mut cursor = 0;
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.ordinal, i);
                prop_assert_eq!(c.char_span.0, cursor);
                prop_assert!(c.text.chars().count() <= max);
                prop_assert!(!c.text.is_empty());
                let span: String = body.chars().skip(c.char_span.0).take(c.char_span.1 - c.char_span.0).collect();
                prop_assert_eq!(span.trim(), c.text.as_str());
                cursor = c.char_span.1;
            }
            prop_assert_eq!(cursor, n);
        }
    }

    const TWO_PLUS_ONE: &str = r#"<?xml version="1.0" ?>
<!DOCTYPE PubmedArticleSet PUBLIC "-//NLM//DTD PubMedArticle, 1st January 2024//EN" "https://dtd.nlm.nih.gov/ncbi/pubmed/out/pubmed_240101.dtd">
<PubmedArticleSet>
<PubmedArticle><MedlineCitation Status="MEDLINE" Owner="NLM"><PMID Version="1">111</PMID>
<Article><ArticleTitle>Remifentanil &amp; <i>esterase</i> metabolism.</ArticleTitle>
<Abstract><AbstractText Label="BACKGROUND">Remifentanil is an ultra-short-acting opioid.</AbstractText><AbstractText Label="RESULTS">Clearance is independent of hepatic function.</AbstractText></Abstract></Article>
<CommentsCorrectionsList><CommentsCorrections RefType="Cites"><PMID Version="1">999</PMID></CommentsCorrections></CommentsCorrectionsList>
</MedlineCitation></PubmedArticle>
<PubmedArticle><MedlineCitation><PMID Version="1">222</PMID><Article><ArticleTitle>No abstract here</ArticleTitle></Article></MedlineCitation></PubmedArticle>
<PubmedArticle><MedlineCitation><PMID Version="1">333</PMID><Article><ArticleTitle>Conduction aphasia</ArticleTitle><Abstract><AbstractText>Repetition is impaired &lt;disproportionately&gt;.</AbstractText></Abstract></Article></MedlineCitation></PubmedArticle>
</PubmedArticleSet>"#;

    #[test]
    fn efetch_parsing_extracts_titles_and_labelled_sections() {
        let recs = parse_efetch(TWO_PLUS_ONE).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].pmid, "111");
        assert_eq!(recs[0].title, "Remifentanil & esterase metabolism.");
        assert_eq!(
            recs[0].abstract_text,
            "BACKGROUND: Remifentanil is an ultra-short-acting opioid.\nRESULTS: Clearance is independent of hepatic function."
        );
        assert_eq!(recs[1].abstract_text, "");
        assert_eq!(
            recs[2].abstract_text,
            "Repetition is impaired <disproportionately>."
        );
    }

    #[test]
    fn malformed_xml_is_rejected() {
        for bad in [
            "<PubmedArticleSet><PubmedArticle><MedlineCitation>",
            "<PubmedArticleSet><PubmedArticle></MedlineCitation></PubmedArticleSet>",
            "<html><body>Service unavailable</body></html>",
            "not xml at all",
        ] {
            assert!(
                matches!(parse_efetch(bad), Err(RetrievalError::MalformedResponse(_))),
                "accepted {bad:?}"
            );
        }
        assert!(parse_efetch("<PubmedArticleSet></PubmedArticleSet>")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn esearch_parsing() {
        let body = r#"{"header":{},"esearchresult":{"count":"3","idlist":["1","22","333"]}}"#;
        assert_eq!(parse_esearch(body, 2).unwrap(), vec!["1", "22"]);
        let empty = r#"{"esearchresult":{"count":"0","idlist":[]}}"#;
        assert!(parse_esearch(empty, 5).unwrap().is_empty());
        assert!(parse_esearch(r#"{"esearchresult":{"idlist":["x1"]}}"#, 5).is_err());
        assert!(parse_esearch("<html/>", 5).is_err());
    }

    fn client_with(exchanges: Vec<RecordedExchange>) -> PubmedClient {
        PubmedClient::with_clock(
            PubmedConfig {
                base_url: "https://eutils.test".into(),
                api_key_env_var: String::new(),
                max_retries: 1,
            },
            Arc::new(ReplayTransport::from_exchanges(exchanges, None).unwrap()),
            Arc::new(ManualClock::new()),
        )
    }

    fn exact(url: &str, body: &str) -> RecordedExchange {
        RecordedExchange {
            method: crate::http::Method::Get,
            url: Some(url.into()),
            url_regex: None,
            status: 200,
            body: Some(body.into()),
            body_file: None,
        }
    }

    #[test]
    fn fetch_skips_abstractless_records_with_warning() {
        let client = client_with(vec![exact(
            "https://eutils.test/efetch.fcgi?db=pubmed&id=111,222,333&rettype=abstract&retmode=xml",
            TWO_PLUS_ONE,
        )]);
        let ids: Vec<String> = ["111", "222", "333"].map(String::from).to_vec();
        let out = client.fetch(&ids, DateTime::UNIX_EPOCH).unwrap();
        assert_eq!(out.documents.len(), 2);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("222"));
        assert_eq!(out.documents[1].doc_id, "PMID:333");
        assert!(client.fetch(&[], DateTime::UNIX_EPOCH).is_err());
    }

    #[test]
    fn search_url_layout() {
        let client = client_with(vec![]);
        let q = Query::new("q", "remifentanil pharmacokinetics").unwrap();
        assert_eq!(
            client.esearch_url(&q.text, 5),
            "https://eutils.test/esearch.fcgi?db=pubmed&term=remifentanil+pharmacokinetics&retmax=5&retmode=json"
        );
        assert!(matches!(
            client.search(&q, 5),
            Err(RetrievalError::Network(_))
        ));
    }

    struct Flaky {
        fail_for: &'static str,
    }

    impl HttpTransport for Flaky {
        fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
            if request.url.contains(self.fail_for) {
                return Ok(HttpResponse {
                    status: 503,
                    body: String::new(),
                });
            }
            if request.url.contains("esearch") {
                let id = if request.url.contains("alpha") {
                    "1"
                } else {
                    "2"
                };
                return Ok(HttpResponse {
                    status: 200,
                    body: format!(r#"{{"esearchresult":{{"idlist":["{id}"]}}}}"#),
                });
            }
            let id = if request.url.contains("id=1&") {
                "1"
            } else {
                "2"
            };
            Ok(HttpResponse {
                status: 200,
                body: format!(
                    "<PubmedArticleSet><PubmedArticle><MedlineCitation><PMID>{id}</PMID><Article><ArticleTitle>t</ArticleTitle><Abstract><AbstractText>Body {id}.</AbstractText></Abstract></Article></MedlineCitation></PubmedArticle></PubmedArticleSet>"
                ),
            })
        }
    }

    fn flaky_sources(fail_for: &'static str) -> RetrievalSources {
        RetrievalSources {
            pubmed: Some(PubmedClient::with_clock(
                PubmedConfig {
                    base_url: "https://eutils.test".into(),
                    api_key_env_var: String::new(),
                    max_retries: 0,
                },
                Arc::new(Flaky { fail_for }),
                Arc::new(ManualClock::new()),
            )),
            local: None,
        }
    }

    fn qset(texts: &[&str]) -> ExpandedQuerySet {
        ExpandedQuerySet {
            original: Query::new("q", texts[0]).unwrap(),
            variants: texts[1..]
                .iter()
                .enumerate()
                .map(|(i, t)| Query::new(format!("q#v{}", i + 1), *t).unwrap())
                .collect(),
            n: texts.len() - 1,
        }
    }

    #[test]
    fn partial_failure_is_recorded_not_fatal() {
        let out = build_pool(
            &qset(&["alpha", "beta gamma"]),
            5,
            &flaky_sources("gamma"),
            DateTime::UNIX_EPOCH,
        )
        .unwrap();
        assert_eq!(out.pool.documents.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].query_id, "q#v1");
    }

    #[test]
    fn total_failure_raises() {
        let err = build_pool(
            &qset(&["alpha", "beta"]),
            5,
            &flaky_sources("esearch"),
            DateTime::UNIX_EPOCH,
        )
        .unwrap_err();
        assert!(matches!(err, RetrievalError::RetrievalFailed(f) if f.len() == 2));
        let err = build_pool(
            &qset(&["alpha"]),
            5,
            &RetrievalSources::default(),
            DateTime::UNIX_EPOCH,
        );
        assert!(matches!(err, Err(RetrievalError::Precondition(_))));
    }

    #[test]
    fn local_index_ranks_by_bm25() {
        let docs = vec![
            Document {
                doc_id: "local:a".into(),
                body: "Conduction aphasia impairs repetition.".into(),
                ..doc("x")
            },
            Document {
                doc_id: "local:b".into(),
                body: "Dementia and memory decline.".into(),
                ..doc("x")
            },
            Document {
                doc_id: "local:c".into(),
                body: "Aphasia aphasia aphasia types overview.".into(),
                ..doc("x")
            },
        ];
        let idx = LocalIndex::new(docs);
        let hits: Vec<_> = idx
            .search("What is conduction aphasia?", 5)
            .into_iter()
            .map(|d| d.doc_id)
            .collect();
        assert_eq!(hits[0], "local:a");
        assert_eq!(hits.len(), 2);
        assert!(idx.search("the of what", 5).is_empty());
    }

    #[test]
    fn ingest_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"1\",\"title\":\"t\",\"body\":\"b1\"}\n{\"id\":\"2\",\"body\":\"b2\"}\nnot json\n{\"id\":\"3\",\"title\":\"t\",\"body\":\"b3\"}\n",
        )
        .unwrap();
        let r = ingest_local(&p).unwrap();
        assert_eq!(r.documents.len(), 3);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.warnings[0].line, 3);
        assert!(r.documents.iter().all(|d| d.source == SourceKind::Local));

        std::fs::write(&p, "").unwrap();
        let r = ingest_local(&p).unwrap();
        assert!(r.documents.is_empty() && r.warnings.is_empty());
        assert!(matches!(
            ingest_local(&dir.path().join("missing")),
            Err(RetrievalError::Io { .. })
        ));
    }
}
