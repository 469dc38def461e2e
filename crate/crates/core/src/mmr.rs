//! Multiquery maximal marginal relevance.
//!
//! Each greedy step picks the unselected chunk maximizing
//!
//! ```text
//! lambda * mean_k Rel(chunk, query_k) - (1 - lambda) * max_{s in S} Sim(chunk, s)
//! ```
//!
//! where the mean runs over the original question and all of its variants,
//! and the max over an empty selection is 0. Ties go to the lower index.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, relevance, EmbedRequest, EmbeddingError, EmbeddingStore};
use crate::expansion::{ExpandedQuerySet, Query};
use crate::retrieval::Chunk;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmrConfig {
    pub lambda: f64,
    pub k: usize,
    pub include_options_in_query_text: bool,
}

impl Default for MmrConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            k: 5,
            include_options_in_query_text: true,
        }
    }
}

impl MmrConfig {
    pub fn validate(&self) -> Result<(), MmrError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MmrError::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.k == 0 {
            return Err(MmrError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmrError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("chunk index {index} out of range for {len} chunks")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("chunk {0} is already selected")]
    AlreadySelected(String),
    #[error("unknown chunk id {0}")]
    UnknownChunk(String),
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("invalid MMR config: {0}")]
    InvalidConfig(String),
    #[error("invalid relevance matrix: {0}")]
    InvalidMatrix(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Precomputed chunk-query relevance and chunk-chunk similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMatrix {
    /// `rel[chunk][query]`
    pub rel: Vec<Vec<f64>>,
    /// `sim[chunk][chunk]`, symmetric with unit diagonal
    pub sim: Vec<Vec<f64>>,
    pub chunk_ids: Vec<String>,
    pub query_ids: Vec<String>,
}

impl RelevanceMatrix {
    pub fn new(
        rel: Vec<Vec<f64>>,
        sim: Vec<Vec<f64>>,
        chunk_ids: Vec<String>,
        query_ids: Vec<String>,
    ) -> Result<Self, MmrError> {
        let m = Self {
            rel,
            sim,
            chunk_ids,
            query_ids,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MmrError> {
        let bad = |m: String| Err(MmrError::InvalidMatrix(m));
        let n = self.chunk_ids.len();
        let q = self.query_ids.len();
        if q == 0 {
            return bad("no queries".into());
        }
        if self.rel.len() != n || self.rel.iter().any(|row| row.len() != q) {
            return bad(format!("rel must be {n}x{q}"));
        }
        if self.sim.len() != n || self.sim.iter().any(|row| row.len() != n) {
            return bad(format!("sim must be {n}x{n}"));
        }
        let in_range = |x: f64| x.is_finite() && (-1.0..=1.0).contains(&x);
        if !self.rel.iter().flatten().all(|&x| in_range(x)) {
            return bad("rel entries must lie in [-1, 1]".into());
        }
        if !self.sim.iter().flatten().all(|&x| in_range(x)) {
            return bad("sim entries must lie in [-1, 1]".into());
        }
        for i in 0..n {
            if (self.sim[i][i] - 1.0).abs() > 1e-9 {
                return bad(format!("sim[{i}][{i}] is not 1"));
            }
            for j in 0..i {
                if (self.sim[i][j] - self.sim[j][i]).abs() > 1e-9 {
                    return bad(format!("sim is not symmetric at ({i}, {j})"));
                }
            }
        }
        let mut seen = HashSet::new();
        for id in &self.chunk_ids {
            if !seen.insert(id) {
                return Err(MmrError::DuplicateChunk(id.clone()));
            }
        }
        Ok(())
    }

    pub fn num_chunks(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn mean_relevance(&self, i: usize) -> f64 {
        self.rel[i].iter().sum::<f64>() / self.rel[i].len() as f64
    }

    fn max_sim(&self, i: usize, selected: &[usize]) -> f64 {
        selected
            .iter()
            .map(|&j| self.sim[i][j])
            .fold(None, |acc: Option<f64>, s| {
                Some(acc.map_or(s, |a| a.max(s)))
            })
            .unwrap_or(0.0)
    }

    fn score_at(&self, i: usize, selected: &[usize], lambda: f64) -> f64 {
        lambda * self.mean_relevance(i) - (1.0 - lambda) * self.max_sim(i, selected)
    }

    fn index_of(&self) -> HashMap<&str, usize> {
        self.chunk_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SelectionState {
    pub selected: Vec<String>,
    /// MMR score of each pick at the moment it was made.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickRecord {
    pub chunk_id: String,
    pub score: f64,
    pub mean_rel: f64,
    pub max_sim_to_selected: f64,
}

fn resolve(m: &RelevanceMatrix, state: &SelectionState) -> Result<Vec<usize>, MmrError> {
    let index = m.index_of();
    state
        .selected
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| MmrError::UnknownChunk(id.clone()))
        })
        .collect()
}

/// The MMR objective for chunk `i` given the current selection.
pub fn mmr_score(
    i: usize,
    m: &RelevanceMatrix,
    state: &SelectionState,
    lambda: f64,
) -> Result<f64, MmrError> {
    if i >= m.num_chunks() {
        return Err(MmrError::IndexOutOfRange {
            index: i,
            len: m.num_chunks(),
        });
    }
    let selected = resolve(m, state)?;
    if selected.contains(&i) {
        return Err(MmrError::AlreadySelected(m.chunk_ids[i].clone()));
    }
    Ok(m.score_at(i, &selected, lambda))
}

/// Greedy selection of `min(k, num_chunks)` chunks.
pub fn select(m: &RelevanceMatrix, config: &MmrConfig) -> Result<SelectionState, MmrError> {
    config.validate()?;
    if m.num_chunks() == 0 {
        return Err(MmrError::EmptyPool);
    }
    let n = m.num_chunks();
    let mut taken = vec![false; n];
    let mut picked: Vec<usize> = Vec::with_capacity(config.k.min(n));
    let mut state = SelectionState::default();
    for _ in 0..config.k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let score = m.score_at(i, &picked, config.lambda);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let (i, score) = best.expect("at least one unselected chunk remains");
        taken[i] = true;
        picked.push(i);
        state.selected.push(m.chunk_ids[i].clone());
        state.scores.push(score);
    }
    Ok(state)
}

/// Per-pick audit record: recomputes each pick's components against the
/// selection as it stood before that pick.
pub fn selection_trace(
    m: &RelevanceMatrix,
    state: &SelectionState,
    lambda: f64,
) -> Result<Vec<PickRecord>, MmrError> {
    let picked = resolve(m, state)?;
    Ok(picked
        .iter()
        .enumerate()
        .map(|(step, &i)| PickRecord {
            chunk_id: m.chunk_ids[i].clone(),
            score: m.score_at(i, &picked[..step], lambda),
            mean_rel: m.mean_relevance(i),
            max_sim_to_selected: m.max_sim(i, &picked[..step]),
        })
        .collect())
}

/// Formats options as `A. text` lines.
pub fn option_lines<'a>(options: impl IntoIterator<Item = (char, &'a str)>) -> Vec<String> {
    options
        .into_iter()
        .map(|(label, text)| format!("{label}. {text}"))
        .collect()
}

pub fn query_embed_text(query: &Query, options: &[String], include_options: bool) -> String {
    if include_options && !options.is_empty() {
        format!("{}\n{}", query.text, options.join("\n"))
    } else {
        query.text.clone()
    }
}

/// Embeds every chunk and every query once and fills both matrices, rows
/// and columns in input order. Any embedding failure fails the whole call.
pub fn build_matrix(
    chunks: &[Chunk],
    query_set: &ExpandedQuerySet,
    options: &[String],
    store: &EmbeddingStore,
    config: &MmrConfig,
) -> Result<RelevanceMatrix, MmrError> {
    if chunks.is_empty() {
        return Err(MmrError::EmptyPool);
    }
    let chunk_embs = chunks
        .iter()
        .map(|c| store.embed(&EmbedRequest::document(c.text.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let queries = query_set.all_queries();
    let query_embs = queries
        .iter()
        .map(|q| {
            store.embed(&EmbedRequest::query(query_embed_text(
                q,
                options,
                config.include_options_in_query_text,
            )))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let rel = chunk_embs
        .iter()
        .map(|c| {
            query_embs
                .iter()
                .map(|q| relevance(c, q))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = chunks.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        sim[i][i] = 1.0;
        for j in 0..i {
            let s = cosine(&chunk_embs[i], &chunk_embs[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    RelevanceMatrix::new(
        rel,
        sim,
        chunks.iter().map(Chunk::id).collect(),
        queries.iter().map(|q| q.id.clone()).collect(),
    )
}
