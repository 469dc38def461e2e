//! One item through one mode: expansion, retrieval, chunking, MMR selection,
//! prompt assembly, answer call and parsing. Each stage is also callable on
//! its own so the command-line stages and the monolithic path share code.

use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingStore;
use crate::expansion::{expand, ExpandedQuerySet, ExpansionConfig, ExpansionError, Query};
use crate::gateway::{Gateway, GatewayError};
use crate::mmr::{
    build_matrix, select, selection_trace, MmrConfig, MmrError, PickRecord, SelectionState,
};
use crate::prompt::{
    parse_answer, McqItem, Mode, ParsedAnswer, PromptBundle, PromptEngine, PromptError,
};
use crate::retrieval::{
    build_pool, chunk, CandidatePool, Chunk, RetrievalError, RetrievalSources,
    DEFAULT_MAX_CHUNK_CHARS, DEFAULT_PER_QUERY_MAX,
};
use crate::store::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub expansion: ExpansionConfig,
    pub mmr: MmrConfig,
    pub per_query_max: usize,
    pub max_chunk_chars: usize,
    pub chunk_overlap_chars: usize,
    pub answer_model_id: String,
    pub answer_max_output_tokens: u32,
    /// Timestamp stamped on retrieved documents; `None` means now.
    pub fetched_at: Option<DateTime<Utc>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let expansion = ExpansionConfig::default();
        Self {
            answer_model_id: expansion.model_id.clone(),
            expansion,
            mmr: MmrConfig::default(),
            per_query_max: DEFAULT_PER_QUERY_MAX,
            max_chunk_chars: DEFAULT_MAX_CHUNK_CHARS,
            chunk_overlap_chars: 0,
            answer_max_output_tokens: 1024,
            fetched_at: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Mmr(#[from] MmrError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("answer call failed: {0}")]
    Gateway(#[from] GatewayError),
}

impl PipelineError {
    /// The provider-side error behind this failure, if any.
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            PipelineError::Gateway(e) => Some(e),
            PipelineError::Expansion(ExpansionError::Gateway { source, .. }) => Some(source),
            _ => None,
        }
    }
}

/// MMR output plus the chunks it picked, in pick order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub query_set: ExpandedQuerySet,
    pub state: SelectionState,
    pub trace: Vec<PickRecord>,
    pub chunks: Vec<Chunk>,
}

impl Selection {
    /// Short digest of the picks, used to reference a selection from results.
    pub fn trace_id(&self) -> String {
        let json = serde_json::to_string(&self.state).expect("selection state serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub expand_ms: u64,
    pub retrieve_ms: u64,
    pub select_ms: u64,
    pub answer_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub parsed: ParsedAnswer,
    pub bundle: PromptBundle,
    pub query_set: Option<ExpandedQuerySet>,
    pub selection: Option<Selection>,
    /// Halo mode ran with no usable context.
    pub degraded_context: bool,
    pub warnings: Vec<String>,
    pub timings: StageTimings,
}

pub struct Pipeline {
    pub gateway: Arc<Gateway>,
    pub sources: Arc<RetrievalSources>,
    pub embeddings: Arc<EmbeddingStore>,
    pub engine: PromptEngine,
    pub config: PipelineConfig,
}

fn ms_since(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

impl Pipeline {
    pub fn item_query(item: &McqItem) -> Result<Query, ExpansionError> {
        Query::new(item.item_id.clone(), item.question.clone())
    }

    pub fn expand_stage(&self, query: &Query) -> Result<ExpandedQuerySet, ExpansionError> {
        let cfg = &self.config.expansion;
        expand(query, cfg.target_n, &self.gateway, cfg)
    }

    pub fn retrieve_stage(
        &self,
        query_set: &ExpandedQuerySet,
    ) -> Result<crate::retrieval::PoolOutcome, RetrievalError> {
        let fetched_at = self.config.fetched_at.unwrap_or_else(Utc::now);
        build_pool(
            query_set,
            self.config.per_query_max,
            &self.sources,
            fetched_at,
        )
    }

    /// Chunks every pooled document and picks up to `k` chunks. Returns
    /// `Ok(None)` when the pool yields no chunk at all.
    pub fn select_stage(
        &self,
        pool: &CandidatePool,
        option_lines: &[String],
    ) -> Result<Option<Selection>, MmrError> {
        let mut chunks = Vec::new();
        for doc in &pool.documents {
            if doc.body.trim().is_empty() {
                continue;
            }
            match chunk(
                doc,
                self.config.max_chunk_chars,
                self.config.chunk_overlap_chars,
            ) {
                Ok(cs) => chunks.extend(cs),
                Err(e) => log::warn!("skipping {}: {e}", doc.doc_id),
            }
        }
        if chunks.is_empty() {
            return Ok(None);
        }
        let matrix = build_matrix(
            &chunks,
            &pool.query_set,
            option_lines,
            &self.embeddings,
            &self.config.mmr,
        )?;
        let state = select(&matrix, &self.config.mmr)?;
        let trace = selection_trace(&matrix, &state, self.config.mmr.lambda)?;
        let picked = state
            .selected
            .iter()
            .map(|id| {
                chunks
                    .iter()
                    .find(|c| &c.id() == id)
                    .cloned()
                    .expect("selected chunk exists")
            })
            .collect();
        Ok(Some(Selection {
            query_set: pool.query_set.clone(),
            state,
            trace,
            chunks: picked,
        }))
    }

    /// Assembles the prompt, makes the single answer call and parses it.
    pub fn answer_stage(
        &self,
        item: &McqItem,
        chunks: &[Chunk],
        mode: Mode,
        degraded_context: bool,
    ) -> Result<(PromptBundle, ParsedAnswer), PipelineError> {
        let bundle = self.engine.assemble(item, chunks, mode, degraded_context)?;
        let request = bundle.to_request(
            &self.config.answer_model_id,
            self.config.answer_max_output_tokens,
        );
        let reply = self.gateway.complete(&request)?;
        let parsed = parse_answer(&reply.text, &item.options);
        Ok((bundle, parsed))
    }

    /// Runs the whole pipeline for one item. Baseline mode makes exactly one
    /// completion call; halo mode makes one expansion call and one answer
    /// call. Retrieval that yields nothing degrades to an empty context
    /// rather than failing the item.
    pub fn answer_item(&self, item: &McqItem, mode: Mode) -> Result<ItemOutcome, PipelineError> {
        item.validate()?;
        let mut timings = StageTimings::default();
        let mut warnings = Vec::new();
        let (query_set, selection, degraded) = match mode {
            Mode::Baseline => (None, None, false),
            Mode::Halo => {
                let t = Instant::now();
                let qs = self.expand_stage(&Self::item_query(item)?)?;
                timings.expand_ms = ms_since(t);

                let t = Instant::now();
                let pool = match self.retrieve_stage(&qs) {
                    Ok(out) => {
                        warnings.extend(out.failures.iter().map(|f| {
                            format!(
                                "retrieval for {} via {:?} failed: {}",
                                f.query_id, f.source, f.message
                            )
                        }));
                        warnings.extend(out.warnings);
                        Some(out.pool)
                    }
                    Err(RetrievalError::RetrievalFailed(failures)) => {
                        warnings.push(format!(
                            "retrieval failed for every query ({} failures); answering without context",
                            failures.len()
                        ));
                        None
                    }
                    Err(e) => return Err(e.into()),
                };
                timings.retrieve_ms = ms_since(t);

                let t = Instant::now();
                let selection = match pool {
                    Some(p) => self.select_stage(&p, &item.option_lines())?,
                    None => None,
                };
                timings.select_ms = ms_since(t);
                let degraded = selection.is_none();
                if degraded && warnings.is_empty() {
                    warnings.push("no documents retrieved; answering without context".into());
                }
                (Some(qs), selection, degraded)
            }
        };

        let t = Instant::now();
        let chunks = selection
            .as_ref()
            .map(|s| s.chunks.as_slice())
            .unwrap_or(&[]);
        let (bundle, parsed) = self.answer_stage(item, chunks, mode, degraded)?;
        timings.answer_ms = ms_since(t);
        Ok(ItemOutcome {
            parsed,
            bundle,
            query_set,
            selection,
            degraded_context: degraded,
            warnings,
            timings,
        })
    }
}
