//! Frozen dense retrieval: passages, hashed bag-of-tokens embeddings, cosine
//! similarity and top-K search.
//!
//! The embedder is a signed feature-hashing encoder. Text is lowercased and
//! split on every non-alphanumeric character. Each token `t` is hashed as
//!
//! ```text
//! h = mix64(fnv1a64(t) ^ seed)
//! index = h mod dim
//! sign  = -1 if the top bit of h is set, else +1
//! ```
//!
//! and `sign` is added at `index`. The accumulated vector is L2-normalized.
//! A text with no tokens, or whose tokens cancel exactly, maps to the basis
//! vector `e_0`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::rng::{fnv1a64, mix64};

pub const DEFAULT_EMBED_DIM: usize = 1024;
pub const MIN_EMBED_DIM: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension {0} is below the minimum of {MIN_EMBED_DIM}")]
    DimTooSmall(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate passage id `{0}`")]
    DuplicatePassage(String),
    #[error("passage `{0}` has empty text")]
    EmptyPassage(String),
    #[error("unknown passage id `{0}`")]
    UnknownPassage(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

/// A dense embedding. Produced by [`embed`] with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Indices and values of the nonzero coordinates, in index order.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

/// Lowercase and split on non-alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Bucket index and sign for a token under the documented hash scheme.
pub fn token_feature(token: &str, dim: usize, seed: u64) -> (usize, f64) {
    let h = mix64(fnv1a64(token.as_bytes()) ^ seed);
    let index = (h % dim as u64) as usize;
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    (index, sign)
}

pub fn embed(text: &str, dim: usize, seed: u64) -> Result<Embedding, RetrievalError> {
    if text.is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    if dim < MIN_EMBED_DIM {
        return Err(RetrievalError::DimTooSmall(dim));
    }
    let mut v = vec![0.0; dim];
    for token in tokenize(text) {
        let (i, s) = token_feature(&token, dim, seed);
        v[i] += s;
    }
    let norm = dot(&v, &v).sqrt();
    if norm == 0.0 {
        // degenerate: no tokens, or exact cancellation
        v[0] = 1.0;
    } else {
        for x in &mut v {
            *x /= norm;
        }
    }
    Ok(Embedding(v))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `dot(a, b) / (|a| |b|)`, accumulated in index order.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    Ok(dot(&a.0, &b.0) / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

/// The retrieval universe. Immutable once built; embeddings are computed up front.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    embeddings: Vec<Embedding>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
    config: EmbedConfig,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>, config: EmbedConfig) -> Result<Self, RetrievalError> {
        let mut index = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.text.is_empty() {
                return Err(RetrievalError::EmptyPassage(p.passage_id.clone()));
            }
            if index.insert(p.passage_id.clone(), i).is_some() {
                return Err(RetrievalError::DuplicatePassage(p.passage_id.clone()));
            }
        }
        let embeddings = passages
            .iter()
            .map(|p| embed(&p.text, config.dim, config.seed))
            .collect::<Result<Vec<Embedding>, _>>()?;
        let norms = embeddings.iter().map(Embedding::norm).collect();
        Ok(Self {
            passages,
            embeddings,
            norms,
            index,
            config,
        })
    }

    pub fn load_jsonl(path: &Path, config: EmbedConfig) -> Result<Self, RetrievalError> {
        Self::new(jsonl::read(path)?, config)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), RetrievalError> {
        Ok(jsonl::write(path, &self.passages)?)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn config(&self) -> EmbedConfig {
        self.config
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get(&self, passage_id: &str) -> Option<&Passage> {
        self.index.get(passage_id).map(|&i| &self.passages[i])
    }

    pub fn embedding(&self, passage_id: &str) -> Option<&Embedding> {
        self.index.get(passage_id).map(|&i| &self.embeddings[i])
    }

    pub fn contains(&self, passage_id: &str) -> bool {
        self.index.contains_key(passage_id)
    }

    pub fn embed_query(&self, query: &Query) -> Result<Embedding, RetrievalError> {
        embed(&query.text, self.config.dim, self.config.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
}

/// Retriever output: at most `k` distinct passages, scores non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    pub k: usize,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.passage_id.as_str())
    }

    /// Keep only the first `n` entries.
    pub fn truncated(&self, n: usize) -> RankedList {
        RankedList {
            entries: self.entries.iter().take(n).cloned().collect(),
            k: self.k,
        }
    }
}

/// Top-K by cosine similarity; ties go to the smaller passage id.
pub fn retrieve_top_k(query: &Query, corpus: &Corpus, k: usize) -> Result<RankedList, RetrievalError> {
    let q = corpus.embed_query(query)?;
    retrieve_top_k_embedded(&q, corpus, k)
}

pub fn retrieve_top_k_embedded(
    query: &Embedding,
    corpus: &Corpus,
    k: usize,
) -> Result<RankedList, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if query.dim() != corpus.config.dim {
        return Err(RetrievalError::DimensionMismatch(query.dim(), corpus.config.dim));
    }
    let qn = query.norm();
    if qn == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    // Same sum as `cosine_similarity`: the skipped terms are exact zeros.
    let nz: Vec<(usize, f64)> = query.nonzeros().collect();
    let mut scored = corpus
        .passages
        .iter()
        .zip(corpus.embeddings.iter().zip(&corpus.norms))
        .map(|(p, (e, &en))| {
            if en == 0.0 {
                return Err(RetrievalError::ZeroNorm);
            }
            let d = nz.iter().fold(0.0, |acc, &(i, x)| acc + x * e.0[i]);
            Ok((p.passage_id.as_str(), d / (qn * en)))
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    let by_rank = |a: &(&str, f64), b: &(&str, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0));
    let n = k.min(scored.len());
    if n < scored.len() {
        scored.select_nth_unstable_by(n - 1, by_rank);
        scored.truncate(n);
    }
    scored.sort_by(by_rank);
    Ok(RankedList {
        entries: scored
            .into_iter()
            .map(|(id, score)| RankedEntry {
                passage_id: id.to_string(),
                score,
            })
            .collect(),
        k,
    })
}
