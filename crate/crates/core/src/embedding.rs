//! Embeddings, cosine similarity and a content-addressed vector cache.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{HttpRequest, HttpTransport, RateLimiter, SystemClock};
use crate::store::{sha256_hex, KvStore};

pub const QUERY_INSTRUCTION: &str =
    "Represent the medical question for retrieving supporting documents:";
pub const DOCUMENT_INSTRUCTION: &str = "Represent the medical document for retrieval:";

pub const DEFAULT_HASH_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Query,
    Document,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub instruction: String,
    pub content: String,
    pub kind: EmbedKind,
}

impl EmbedRequest {
    pub fn query(content: impl Into<String>) -> Self {
        Self {
            instruction: QUERY_INSTRUCTION.into(),
            content: content.into(),
            kind: EmbedKind::Query,
        }
    }

    pub fn document(content: impl Into<String>) -> Self {
        Self {
            instruction: DOCUMENT_INSTRUCTION.into(),
            content: content.into(),
            kind: EmbedKind::Document,
        }
    }

    pub fn prefixed_text(&self) -> String {
        format!("{} {}", self.instruction, self.content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub dim: usize,
    pub model_id: String,
    pub normalized: bool,
}

impl Embedding {
    /// Wraps a raw vector without normalizing it.
    pub fn raw(vector: Vec<f64>, model_id: impl Into<String>) -> Self {
        Self {
            dim: vector.len(),
            vector,
            model_id: model_id.into(),
            normalized: false,
        }
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding content is empty")]
    EmptyContent,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedding is the zero vector")]
    ZeroVector,
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_raw(&self, request: &EmbedRequest) -> Result<Vec<f64>, EmbeddingError>;
}

/// Offline embedder: signed feature hashing of lowercase word unigrams and
/// bigrams of the content (the instruction is ignored). Pure integer hashing,
/// so vectors are identical on every platform.
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    model_id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self {
            dim,
            seed,
            model_id: format!("hash-embedder/d{dim}/s{seed}"),
        }
    }

    fn hash(&self, feature: &str) -> u64 {
        // FNV-1a with the seed folded into the offset basis
        let mut h = 0xcbf2_9ce4_8422_2325_u64 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for b in feature.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = self.hash(feature);
        let idx = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[idx] += sign * weight;
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASH_DIM, 0)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, request: &EmbedRequest) -> Result<Vec<f64>, EmbeddingError> {
        let words: Vec<String> = request
            .content
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut v = vec![0.0; self.dim];
        for w in &words {
            self.add(&mut v, w, 1.0);
        }
        for pair in words.windows(2) {
            self.add(&mut v, &format!("{} {}", pair[0], pair[1]), 0.5);
        }
        if v.iter().all(|x| *x == 0.0) {
            // no word features survived (punctuation only, or cancellation)
            self.add(&mut v, &format!("\u{0}{}", request.content), 1.0);
        }
        Ok(v)
    }
}

/// Client for an embedding HTTP endpoint taking `{model, input: [text]}`.
pub struct HttpEmbedder {
    endpoint: String,
    model_id: String,
    dim: usize,
    auth_token_env_var: String,
    transport: Arc<dyn HttpTransport>,
    limiter: RateLimiter,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model_id: impl Into<String>,
        dim: usize,
        auth_token_env_var: impl Into<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            dim,
            auth_token_env_var: auth_token_env_var.into(),
            transport,
            limiter: RateLimiter::per_second(5.0, Arc::new(SystemClock::new())),
        }
    }
}

/// Accepts the common response shapes: `{"data":[{"embedding":[..]}]}`,
/// `{"embeddings":[[..]]}`, `{"embedding":[..]}` or a bare `[[..]]`.
pub fn parse_embedding_response(body: &str) -> Result<Vec<f64>, EmbeddingError> {
    let v: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| EmbeddingError::Provider(format!("response is not JSON: {e}")))?;
    let arr = v["data"][0]["embedding"]
        .as_array()
        .or_else(|| v["embeddings"][0].as_array())
        .or_else(|| v["embedding"].as_array())
        .or_else(|| v[0].as_array())
        .ok_or_else(|| EmbeddingError::Provider("no embedding vector in response".into()))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| EmbeddingError::Provider(format!("non-numeric component {x}")))
        })
        .collect()
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, request: &EmbedRequest) -> Result<Vec<f64>, EmbeddingError> {
        let body = json!({"model": self.model_id, "input": [request.prefixed_text()]});
        let mut http = HttpRequest::post_json(self.endpoint.clone(), body.to_string());
        if !self.auth_token_env_var.is_empty() {
            let token = std::env::var(&self.auth_token_env_var).map_err(|_| {
                EmbeddingError::Provider(format!("{} is not set", self.auth_token_env_var))
            })?;
            http = http.with_header("Authorization", format!("Bearer {token}"));
        }
        self.limiter.acquire();
        let resp = self
            .transport
            .execute(&http)
            .map_err(|e| EmbeddingError::Provider(e.to_string()))?;
        if !resp.is_success() {
            return Err(EmbeddingError::Provider(format!("HTTP {}", resp.status)));
        }
        parse_embedding_response(&resp.body)
    }
}

fn cache_key(model_id: &str, request: &EmbedRequest) -> String {
    let kind = match request.kind {
        EmbedKind::Query => "query",
        EmbedKind::Document => "document",
    };
    sha256_hex(
        json!([
            "halo-embed/1",
            model_id,
            kind,
            request.instruction,
            request.content
        ])
        .to_string()
        .as_bytes(),
    )
}

/// Normalizing, caching front end over an [`EmbeddingProvider`].
pub struct EmbeddingStore {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Arc<KvStore>,
    memo: RwLock<HashMap<String, Embedding>>,
}

impl EmbeddingStore {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, cache: Arc<KvStore>) -> Self {
        Self {
            provider,
            cache,
            memo: RwLock::new(HashMap::new()),
        }
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn embed(&self, request: &EmbedRequest) -> Result<Embedding, EmbeddingError> {
        if request.content.trim().is_empty() {
            return Err(EmbeddingError::EmptyContent);
        }
        let key = cache_key(self.provider.model_id(), request);
        if let Some(e) = self.memo.read().unwrap().get(&key) {
            return Ok(e.clone());
        }
        if let Some(stored) = self.cache.get(&key) {
            if let Ok(vector) = serde_json::from_str::<Vec<f64>>(&stored) {
                if vector.len() == self.provider.dim() {
                    let e = Embedding {
                        dim: vector.len(),
                        vector,
                        model_id: self.provider.model_id().to_string(),
                        normalized: true,
                    };
                    self.memo.write().unwrap().insert(key, e.clone());
                    return Ok(e);
                }
            }
        }
        let raw = self.provider.embed_raw(request)?;
        let e = normalize(raw, self.provider.dim(), self.provider.model_id())?;
        let serialized = serde_json::to_string(&e.vector).expect("finite floats serialize");
        if let Err(err) = self.cache.put(&key, &serialized) {
            log::warn!("embedding cache write failed: {err}");
        }
        self.memo.write().unwrap().insert(key, e.clone());
        Ok(e)
    }
}

/// Checks shape and finiteness, then scales to unit length.
pub fn normalize(raw: Vec<f64>, dim: usize, model_id: &str) -> Result<Embedding, EmbeddingError> {
    if raw.len() != dim {
        return Err(EmbeddingError::DimensionMismatch {
            expected: dim,
            actual: raw.len(),
        });
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(Embedding {
        vector: raw.into_iter().map(|x| x / norm).collect(),
        dim,
        model_id: model_id.to_string(),
        normalized: true,
    })
}

/// dot(a, b) / (|a| |b|), clamped to [-1, 1]. Zero vectors score 0.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    cosine_slices(&a.vector, &b.vector)
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Relevance of a chunk to a query: their cosine similarity.
pub fn relevance(chunk: &Embedding, query: &Embedding) -> Result<f64, EmbeddingError> {
    cosine(chunk, query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn store() -> EmbeddingStore {
        EmbeddingStore::new(
            Arc::new(HashEmbedder::default()),
            Arc::new(KvStore::in_memory()),
        )
    }

    #[test]
    fn test_embedder_is_unit_norm_and_deterministic() {
        let s = store();
        let r = EmbedRequest::query("What is conduction aphasia?");
        let a = s.embed(&r).unwrap();
        assert!((a.norm() - 1.0).abs() <= 1e-6);
        assert!(a.normalized);
        assert_eq!(a, s.embed(&r).unwrap());
        // fresh store, same vector
        assert_eq!(a, store().embed(&r).unwrap());
    }

    #[test]
    fn distinct_contents_point_in_distinct_directions() {
        let s = store();
        let texts = [
            "Conduction aphasia impairs repetition.",
            "Repetition impairs conduction aphasia.",
            "Remifentanil is metabolized by plasma esterases.",
            "aphasia",
        ];
        let embs: Vec<_> = texts
            .iter()
            .map(|t| s.embed(&EmbedRequest::document(*t)).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in 0..embs.len() {
                if i != j {
                    assert!(cosine(&embs[i], &embs[j]).unwrap() < 1.0, "{i} vs {j}");
                }
            }
        }
    }

    struct WrongDim;
    impl EmbeddingProvider for WrongDim {
        fn model_id(&self) -> &str {
            "wrong"
        }
        fn dim(&self) -> usize {
            4
        }
        fn embed_raw(&self, _: &EmbedRequest) -> Result<Vec<f64>, EmbeddingError> {
            Ok(vec![1.0, 2.0, 3.0])
        }
    }

    #[test]
    fn wrong_length_vector_is_a_dimension_mismatch() {
        let s = EmbeddingStore::new(Arc::new(WrongDim), Arc::new(KvStore::in_memory()));
        assert_eq!(
            s.embed(&EmbedRequest::query("x")),
            Err(EmbeddingError::DimensionMismatch {
                expected: 4,
                actual: 3
            })
        );
        assert_eq!(
            s.embed(&EmbedRequest::query(" ")),
            Err(EmbeddingError::EmptyContent)
        );
    }

    struct Counting(AtomicUsize, HashEmbedder);
    impl EmbeddingProvider for Counting {
        fn model_id(&self) -> &str {
            self.1.model_id()
        }
        fn dim(&self) -> usize {
            self.1.dim()
        }
        fn embed_raw(&self, r: &EmbedRequest) -> Result<Vec<f64>, EmbeddingError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            self.1.embed_raw(r)
        }
    }

    #[test]
    fn warm_disk_cache_returns_identical_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let r = EmbedRequest::document("Dementia with Lewy bodies presents with hallucinations.");
        let cold = {
            let s = EmbeddingStore::new(
                Arc::new(HashEmbedder::default()),
                Arc::new(KvStore::open(dir.path(), "emb").unwrap()),
            );
            s.embed(&r).unwrap()
        };
        let provider = Arc::new(Counting(AtomicUsize::new(0), HashEmbedder::default()));
        let s = EmbeddingStore::new(
            provider.clone(),
            Arc::new(KvStore::open(dir.path(), "emb").unwrap()),
        );
        let warm = s.embed(&r).unwrap();
        assert_eq!(cold, warm);
        assert_eq!(provider.0.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn cosine_hand_values() {
        let v = Embedding::raw(vec![1.0, 2.0, 2.0], "t");
        let w = Embedding::raw(vec![2.0, 1.0, 2.0], "t");
        assert!((cosine(&v, &w).unwrap() - 8.0 / 9.0).abs() <= 1e-9);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() <= 1e-15);
        let x = Embedding::raw(vec![1.0, 0.0, 0.0], "t");
        let y = Embedding::raw(vec![0.0, 1.0, 0.0], "t");
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        let short = Embedding::raw(vec![1.0], "t");
        assert!(matches!(
            cosine(&x, &short),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn relevance_is_cosine() {
        let s = store();
        let c = s
            .embed(&EmbedRequest::document("Broca aphasia is non-fluent."))
            .unwrap();
        let q = s
            .embed(&EmbedRequest::query("Which aphasia is non-fluent?"))
            .unwrap();
        assert_eq!(relevance(&c, &q).unwrap(), cosine(&c, &q).unwrap());
        let same_doc = s
            .embed(&EmbedRequest::query("Broca aphasia is non-fluent."))
            .unwrap();
        assert!((relevance(&c, &same_doc).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn response_shapes() {
        assert_eq!(
            parse_embedding_response(r#"{"data":[{"embedding":[1,2]}]}"#).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            parse_embedding_response(r#"{"embeddings":[[0.5]]}"#).unwrap(),
            vec![0.5]
        );
        assert_eq!(parse_embedding_response("[[3]]").unwrap(), vec![3.0]);
        assert!(parse_embedding_response(r#"{"x":1}"#).is_err());
    }

    fn vec8() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 8)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_bounded_scale_invariant(a in vec8(), b in vec8(), alpha in 1e-3f64..1e3) {
            let ea = Embedding::raw(a.clone(), "t");
            let eb = Embedding::raw(b, "t");
            let ab = cosine(&ea, &eb).unwrap();
            prop_assert_eq!(ab, cosine(&eb, &ea).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
            let scaled = Embedding::raw(a.iter().map(|x| x * alpha).collect(), "t");
            prop_assert!((cosine(&scaled, &eb).unwrap() - ab).abs() <= 1e-12);
        }
    }
}
