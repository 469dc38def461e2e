//! Stateless chat-completion access with a persistent response cache.
//!
//! A [`ChatRequest`] has no history field: every call carries its whole
//! prompt, so no answer can depend on an earlier question. Providers sit
//! behind [`ChatBackend`]; [`HttpChatBackend`] speaks the common
//! `messages`/`choices` JSON shape and [`MockBackend`] serves canned replies
//! from a fixture table.

use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{Clock, HttpRequest, HttpTransport, RateLimiter, RetryPolicy, SystemClock};
use crate::store::{sha256_hex, KvStore};

/// Temperature used for answering and scoring.
pub const ANSWER_TEMPERATURE: f64 = 0.0;
/// Temperature used for query expansion.
pub const EXPANSION_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.user_text.is_empty() {
            return Err("user_text must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 1]", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Hex SHA-256 over the canonical serialization of a request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestDigest(String);

impl RequestDigest {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RequestDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical form: a compact JSON array with a version tag and the fields
/// in fixed order, so field order in memory or on disk never matters.
pub fn cache_key(request: &ChatRequest) -> RequestDigest {
    let canonical = json!([
        "halo-chat/1",
        request.model_id,
        request.system_text,
        request.user_text,
        request.temperature,
        request.max_output_tokens,
    ]);
    RequestDigest(sha256_hex(canonical.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub provider_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid chat request: {reason}")]
    InvalidRequest { reason: String },
    #[error("authentication failed for request {digest}: {message}")]
    Auth {
        digest: RequestDigest,
        message: String,
    },
    #[error("rate limited on request {digest} after {attempts} attempts")]
    RateLimitExhausted {
        digest: RequestDigest,
        attempts: u32,
    },
    #[error("provider error on request {digest}: {message}")]
    Provider {
        digest: RequestDigest,
        message: String,
    },
}

impl GatewayError {
    pub fn digest(&self) -> Option<&RequestDigest> {
        match self {
            GatewayError::InvalidRequest { .. } => None,
            GatewayError::Auth { digest, .. }
            | GatewayError::RateLimitExhausted { digest, .. }
            | GatewayError::Provider { digest, .. } => Some(digest),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_id: String,
    pub endpoint: String,
    /// Name of the environment variable holding the token. Empty means the
    /// endpoint needs no authentication.
    pub auth_token_env_var: String,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Prefix placed before the token in the auth header value.
    #[serde(default = "default_auth_scheme")]
    pub auth_scheme: String,
    pub requests_per_second_limit: f64,
    pub max_retries: u32,
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_auth_scheme() -> String {
    "Bearer ".into()
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            provider_id: "openai".into(),
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            auth_token_env_var: "OPENAI_API_KEY".into(),
            auth_header: default_auth_header(),
            auth_scheme: default_auth_scheme(),
            requests_per_second_limit: 2.0,
            max_retries: 4,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn provider_id(&self) -> &str;
    fn send(&self, request: &ChatRequest, digest: &RequestDigest) -> Result<String, GatewayError>;
}

pub struct HttpChatBackend {
    config: ProviderConfig,
    transport: Arc<dyn HttpTransport>,
    limiter: Arc<RateLimiter>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
}

impl HttpChatBackend {
    pub fn new(config: ProviderConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
        Self::with_clock(config, transport, clock)
    }

    pub fn with_clock(
        config: ProviderConfig,
        transport: Arc<dyn HttpTransport>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let limiter = Arc::new(RateLimiter::per_second(
            config.requests_per_second_limit,
            clock.clone(),
        ));
        let retry = RetryPolicy::with_max_retries(config.max_retries);
        Self {
            config,
            transport,
            limiter,
            retry,
            clock,
        }
    }

    pub fn body(request: &ChatRequest) -> serde_json::Value {
        json!({
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }
}

enum Failure {
    RateLimited,
    Other(String),
}

impl ChatBackend for HttpChatBackend {
    fn provider_id(&self) -> &str {
        &self.config.provider_id
    }

    fn send(&self, request: &ChatRequest, digest: &RequestDigest) -> Result<String, GatewayError> {
        let mut http = HttpRequest::post_json(
            self.config.endpoint.clone(),
            Self::body(request).to_string(),
        );
        if !self.config.auth_token_env_var.is_empty() {
            let token = std::env::var(&self.config.auth_token_env_var)
                .ok()
                .filter(|t| !t.is_empty())
                .ok_or_else(|| GatewayError::Auth {
                    digest: digest.clone(),
                    message: format!(
                        "environment variable {} is not set",
                        self.config.auth_token_env_var
                    ),
                })?;
            http = http.with_header(
                self.config.auth_header.clone(),
                format!("{}{token}", self.config.auth_scheme),
            );
        }

        let attempts = self.retry.max_retries + 1;
        let mut last = Failure::Other("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                self.clock.sleep(self.retry.jittered_delay(attempt - 1));
            }
            self.limiter.acquire();
            match self.transport.execute(&http) {
                Ok(resp) if resp.is_success() => {
                    return extract_choice_text(&resp.body).map_err(|message| {
                        GatewayError::Provider {
                            digest: digest.clone(),
                            message,
                        }
                    });
                }
                Ok(resp) if resp.status == 401 || resp.status == 403 => {
                    return Err(GatewayError::Auth {
                        digest: digest.clone(),
                        message: format!("provider rejected credentials (HTTP {})", resp.status),
                    });
                }
                Ok(resp) if resp.status == 429 => last = Failure::RateLimited,
                Ok(resp) if resp.status >= 500 => {
                    last = Failure::Other(format!("HTTP {}", resp.status))
                }
                Ok(resp) => {
                    return Err(GatewayError::Provider {
                        digest: digest.clone(),
                        message: format!("HTTP {}: {}", resp.status, truncate(&resp.body, 200)),
                    });
                }
                Err(e) if e.is_transient() => last = Failure::Other(e.to_string()),
                Err(e) => {
                    return Err(GatewayError::Provider {
                        digest: digest.clone(),
                        message: e.to_string(),
                    })
                }
            }
        }
        Err(match last {
            Failure::RateLimited => GatewayError::RateLimitExhausted {
                digest: digest.clone(),
                attempts,
            },
            Failure::Other(message) => GatewayError::Provider {
                digest: digest.clone(),
                message: format!("{message} (after {attempts} attempts)"),
            },
        })
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn extract_choice_text(body: &str) -> Result<String, String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| "response has no choices[0].message.content".to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_text_regex: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: MockMatch,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum MockFixtureError {
    #[error("cannot read mock fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mock fixture {path} is not valid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("mock rule {index}: {reason}")]
    Rule { index: usize, reason: String },
}

/// Canned provider. Digest rules are consulted first, then regex rules over
/// `user_text` in table order; the first hit answers.
pub struct MockBackend {
    provider_id: String,
    by_digest: Vec<(String, String)>,
    by_pattern: Vec<(Regex, String)>,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Result<Self, MockFixtureError> {
        let mut by_digest = Vec::new();
        let mut by_pattern = Vec::new();
        for (index, rule) in rules.into_iter().enumerate() {
            match (rule.matcher.digest, rule.matcher.user_text_regex) {
                (Some(d), None) => by_digest.push((d.to_ascii_lowercase(), rule.response)),
                (None, Some(p)) => {
                    let re = Regex::new(&p).map_err(|e| MockFixtureError::Rule {
                        index,
                        reason: format!("bad user_text_regex: {e}"),
                    })?;
                    by_pattern.push((re, rule.response));
                }
                _ => {
                    return Err(MockFixtureError::Rule {
                        index,
                        reason: "match needs exactly one of digest, user_text_regex".into(),
                    })
                }
            }
        }
        Ok(Self {
            provider_id: "mock".into(),
            by_digest,
            by_pattern,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, MockFixtureError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| MockFixtureError::Io {
            path: display.clone(),
            source,
        })?;
        let rules: Vec<MockRule> =
            serde_json::from_str(&text).map_err(|source| MockFixtureError::Json {
                path: display,
                source,
            })?;
        Self::new(rules)
    }
}

impl ChatBackend for MockBackend {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn send(&self, request: &ChatRequest, digest: &RequestDigest) -> Result<String, GatewayError> {
        if let Some((_, text)) = self.by_digest.iter().find(|(d, _)| d == digest.as_str()) {
            return Ok(text.clone());
        }
        self.by_pattern
            .iter()
            .find(|(re, _)| re.is_match(&request.user_text))
            .map(|(_, text)| text.clone())
            .ok_or_else(|| GatewayError::Provider {
                digest: digest.clone(),
                message: "mock table has no entry for this request".into(),
            })
    }
}

/// One entry of the gateway's call log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub digest: RequestDigest,
    pub system_text: String,
    pub user_text: String,
    pub cached: bool,
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: Arc<KvStore>,
    log: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Arc<KvStore>) -> Self {
        Self {
            backend,
            cache,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn provider_id(&self) -> &str {
        self.backend.provider_id()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.dispatch(request, true)
    }

    /// Like [`complete`](Self::complete) but skips the cache lookup; the fresh
    /// reply still overwrites the cached value.
    pub fn complete_fresh(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.dispatch(request, false)
    }

    fn dispatch(
        &self,
        request: &ChatRequest,
        use_cache: bool,
    ) -> Result<ChatResponse, GatewayError> {
        request
            .validate()
            .map_err(|reason| GatewayError::InvalidRequest { reason })?;
        let started = Instant::now();
        let digest = cache_key(request);
        let cached = if use_cache {
            self.cache.get(digest.as_str())
        } else {
            None
        };
        let (text, was_cached) = match cached {
            Some(text) => (text, true),
            None => {
                let text = self.backend.send(request, &digest)?;
                if let Err(e) = self.cache.put(digest.as_str(), &text) {
                    log::warn!("response cache write failed for {digest}: {e}");
                }
                (text, false)
            }
        };
        self.log.lock().unwrap().push(CallRecord {
            digest,
            system_text: request.system_text.clone(),
            user_text: request.user_text.clone(),
            cached: was_cached,
        });
        Ok(ChatResponse {
            text,
            provider_id: self.backend.provider_id().to_string(),
            cached: was_cached,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}
