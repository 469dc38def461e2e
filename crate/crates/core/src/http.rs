//! HTTP plumbing shared by the chat gateway, the embedding client and the
//! PubMed client.
//!
//! Everything that touches the network goes through [`HttpTransport`], so a
//! run can be pointed at recorded fixtures ([`ReplayTransport`]), wrapped for
//! auditing ([`CountingTransport`]) or given a real client ([`LiveTransport`]).

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    #[default]
    Get,
    Post,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Get => f.write_str("GET"),
            Method::Post => f.write_str("POST"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<String>,
}

impl HttpRequest {
    pub fn get(url: impl Into<String>) -> Self {
        Self {
            method: Method::Get,
            url: url.into(),
            headers: Vec::new(),
            body: None,
        }
    }

    pub fn post_json(url: impl Into<String>, body: String) -> Self {
        Self {
            method: Method::Post,
            url: url.into(),
            headers: vec![("Content-Type".into(), "application/json".into())],
            body: Some(body),
        }
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("no recorded response for {method} {url}")]
    NoRecording { method: Method, url: String },
    #[error("live network access is disabled")]
    Disabled,
}

impl TransportError {
    /// Whether repeating the same request could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, TransportError::Connection(_))
    }
}

pub trait HttpTransport: Send + Sync {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

/// Blocking client over `ureq`. Non-2xx statuses are returned as responses,
/// not errors, so callers can apply their own retry policy.
pub struct LiveTransport {
    agent: ureq::Agent,
}

impl LiveTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Default for LiveTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl HttpTransport for LiveTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let conn = |e: ureq::Error| TransportError::Connection(e.to_string());
        let mut response = match request.method {
            Method::Get => {
                let mut builder = self.agent.get(&request.url);
                for (name, value) in &request.headers {
                    builder = builder.header(name.as_str(), value.as_str());
                }
                builder.call().map_err(conn)?
            }
            Method::Post => {
                let mut builder = self.agent.post(&request.url);
                for (name, value) in &request.headers {
                    builder = builder.header(name.as_str(), value.as_str());
                }
                builder
                    .send(request.body.clone().unwrap_or_default())
                    .map_err(conn)?
            }
        };
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(conn)?;
        Ok(HttpResponse { status, body })
    }
}

/// A transport that refuses every request. Installed wherever a run is
/// configured offline and no recording was supplied.
pub struct DisabledTransport;

impl HttpTransport for DisabledTransport {
    fn execute(&self, _request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        Err(TransportError::Disabled)
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read replay fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("replay fixture {path} is not valid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("replay entry {index}: {reason}")]
    Entry { index: usize, reason: String },
}

/// One recorded exchange in a replay fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordedExchange {
    #[serde(default)]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url_regex: Option<String>,
    #[serde(default = "default_status")]
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    /// Path relative to the fixture file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_file: Option<String>,
}

fn default_status() -> u16 {
    200
}

enum UrlMatch {
    Exact(String),
    Pattern(Regex),
}

struct ReplayEntry {
    method: Method,
    url: UrlMatch,
    response: HttpResponse,
}

/// Serves recorded responses. Exact URL matches win over patterns; patterns
/// are tried in file order. The `api_key` query parameter is ignored when
/// matching so recordings never need to contain credentials.
pub struct ReplayTransport {
    entries: Vec<ReplayEntry>,
}

impl ReplayTransport {
    pub fn from_file(path: &Path) -> Result<Self, ReplayError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ReplayError::Io {
            path: display.clone(),
            source,
        })?;
        let exchanges: Vec<RecordedExchange> =
            serde_json::from_str(&text).map_err(|source| ReplayError::Json {
                path: display,
                source,
            })?;
        Self::from_exchanges(exchanges, path.parent())
    }

    pub fn from_exchanges(
        exchanges: Vec<RecordedExchange>,
        base_dir: Option<&Path>,
    ) -> Result<Self, ReplayError> {
        let mut entries = Vec::with_capacity(exchanges.len());
        for (index, ex) in exchanges.into_iter().enumerate() {
            let url = match (ex.url, ex.url_regex) {
                (Some(u), None) => UrlMatch::Exact(strip_api_key(&u)),
                (None, Some(p)) => {
                    UrlMatch::Pattern(Regex::new(&p).map_err(|e| ReplayError::Entry {
                        index,
                        reason: format!("bad url_regex: {e}"),
                    })?)
                }
                _ => {
                    return Err(ReplayError::Entry {
                        index,
                        reason: "exactly one of url and url_regex is required".into(),
                    })
                }
            };
            let body = match (ex.body, ex.body_file) {
                (Some(b), None) => b,
                (None, Some(file)) => {
                    let p = base_dir
                        .map(|d| d.join(&file))
                        .unwrap_or_else(|| file.clone().into());
                    std::fs::read_to_string(&p).map_err(|e| ReplayError::Entry {
                        index,
                        reason: format!("cannot read body_file {}: {e}", p.display()),
                    })?
                }
                (None, None) => String::new(),
                (Some(_), Some(_)) => {
                    return Err(ReplayError::Entry {
                        index,
                        reason: "body and body_file are mutually exclusive".into(),
                    })
                }
            };
            entries.push(ReplayEntry {
                method: ex.method,
                url,
                response: HttpResponse {
                    status: ex.status,
                    body,
                },
            });
        }
        Ok(Self { entries })
    }
}

impl HttpTransport for ReplayTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let url = strip_api_key(&request.url);
        let exact = self.entries.iter().find(|e| {
            e.method == request.method && matches!(&e.url, UrlMatch::Exact(u) if *u == url)
        });
        let hit = exact.or_else(|| {
            self.entries.iter().find(|e| {
                e.method == request.method
                    && matches!(&e.url, UrlMatch::Pattern(re) if re.is_match(&url))
            })
        });
        hit.map(|e| e.response.clone())
            .ok_or(TransportError::NoRecording {
                method: request.method,
                url,
            })
    }
}

fn strip_api_key(raw: &str) -> String {
    let Ok(mut parsed) = url::Url::parse(raw) else {
        return raw.to_string();
    };
    if !parsed.query_pairs().any(|(k, _)| k == "api_key") {
        return raw.to_string();
    }
    let kept: Vec<(String, String)> = parsed
        .query_pairs()
        .filter(|(k, _)| k != "api_key")
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect();
    if kept.is_empty() {
        parsed.set_query(None);
    } else {
        parsed.query_pairs_mut().clear().extend_pairs(kept);
    }
    parsed.to_string()
}

/// Records every dispatch (time and URL) before delegating.
pub struct CountingTransport {
    inner: Arc<dyn HttpTransport>,
    clock: Arc<dyn Clock>,
    log: Mutex<Vec<(Duration, String)>>,
}

impl CountingTransport {
    pub fn new(inner: Arc<dyn HttpTransport>, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner,
            clock,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn dispatch_times(&self) -> Vec<Duration> {
        self.log.lock().unwrap().iter().map(|(t, _)| *t).collect()
    }

    pub fn urls(&self) -> Vec<String> {
        self.log
            .lock()
            .unwrap()
            .iter()
            .map(|(_, u)| u.clone())
            .collect()
    }
}

impl HttpTransport for CountingTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.log
            .lock()
            .unwrap()
            .push((self.clock.now(), request.url.clone()));
        self.inner.execute(request)
    }
}

/// Monotonic time source, injectable so rate limiting and backoff can be
/// tested without real sleeps.
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Virtual clock: `sleep` advances time instantly.
#[derive(Default)]
pub struct ManualClock {
    nanos: AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }

    pub fn total_slept(&self) -> Duration {
        self.now()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep(&self, duration: Duration) {
        self.advance(duration);
    }
}

/// Sliding-window limiter: at most `capacity` dispatches in any window of
/// `capacity / rate` seconds, which for integral rates is one second.
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    clock: Arc<dyn Clock>,
    recent: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn per_second(rate: f64, clock: Arc<dyn Clock>) -> Self {
        assert!(rate > 0.0 && rate.is_finite(), "rate must be positive");
        let capacity = rate.ceil().max(1.0) as usize;
        let window = Duration::from_secs_f64(capacity as f64 / rate);
        Self {
            capacity,
            window,
            clock,
            recent: Mutex::new(VecDeque::with_capacity(capacity)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks until a dispatch slot is free, then claims it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut recent = self.recent.lock().unwrap();
                let now = self.clock.now();
                while recent.front().is_some_and(|&t| now - t >= self.window) {
                    recent.pop_front();
                }
                if recent.len() < self.capacity {
                    recent.push_back(now);
                    return;
                }
                *recent.front().unwrap() + self.window - now
            };
            self.clock.sleep(wait);
        }
    }
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub initial_delay_ms: u64,
    pub factor: f64,
    pub jitter: f64,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            initial_delay_ms: 500,
            factor: 2.0,
            jitter: 0.2,
            max_retries: 4,
        }
    }
}

impl RetryPolicy {
    pub fn with_max_retries(max_retries: u32) -> Self {
        Self {
            max_retries,
            ..Self::default()
        }
    }

    /// Delay before retry number `retry` (0-based). `unit` in [0, 1) picks the
    /// jitter offset so callers control the randomness.
    pub fn delay(&self, retry: u32, unit: f64) -> Duration {
        let base = self.initial_delay_ms as f64 * self.factor.powi(retry as i32);
        let scale = 1.0 + self.jitter * (2.0 * unit - 1.0);
        Duration::from_secs_f64((base * scale).max(0.0) / 1000.0)
    }

    pub fn jittered_delay(&self, retry: u32) -> Duration {
        self.delay(retry, rand::random::<f64>())
    }
}
