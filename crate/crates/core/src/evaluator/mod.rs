//! The downstream generator `R(·)`: given an example and an ordered passage
//! sequence, produce output text and a task reward.
//!
//! Two backends implement [`Evaluate`]: the rule-based [`oracle`] used for all
//! desk-scale experiments, and the HTTP [`llm`] adapter for a real model.

pub mod llm;
pub mod oracle;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::metrics::{Metric, MetricError};
use crate::retrieval::Query;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub example_id: String,
    pub query: Query,
    pub target: String,
    /// Passages known to carry answer facts. Empty for ingested real data.
    pub evidence_ids: Vec<String>,
    /// Optional pre-retrieved candidate ids.
    pub candidates: Option<Vec<String>>,
}

/// On-disk form of a [`TaskExample`], one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: String,
    pub query: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence_ids: Vec<String>,
}

impl From<ExampleRecord> for TaskExample {
    fn from(r: ExampleRecord) -> Self {
        TaskExample {
            query: Query {
                query_id: r.example_id.clone(),
                text: r.query,
            },
            example_id: r.example_id,
            target: r.target,
            evidence_ids: r.evidence_ids,
            candidates: r.candidates,
        }
    }
}

impl From<&TaskExample> for ExampleRecord {
    fn from(e: &TaskExample) -> Self {
        ExampleRecord {
            example_id: e.example_id.clone(),
            query: e.query.text.clone(),
            target: e.target.clone(),
            candidates: e.candidates.clone(),
            evidence_ids: e.evidence_ids.clone(),
        }
    }
}

pub fn save_examples(path: &Path, examples: &[TaskExample]) -> Result<(), JsonlError> {
    let records: Vec<ExampleRecord> = examples.iter().map(ExampleRecord::from).collect();
    jsonl::write(path, &records)
}

/// Ordered passage ids fed to the generator. Repeats are allowed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PassageSequence(pub Vec<String>);

impl PassageSequence {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn ids(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>) {
        self.0.push(id.into());
    }

    pub fn with(&self, id: &str) -> Self {
        let mut next = self.clone();
        next.push(id);
        next
    }

    pub fn contains(&self, id: &str) -> bool {
        self.0.iter().any(|x| x == id)
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        !self.0.iter().all(|id| seen.insert(id))
    }
}

impl<S: Into<String>> FromIterator<S> for PassageSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub output_text: String,
    pub reward: f64,
    pub metric: Metric,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("example {example_id}: unknown passage id `{passage_id}`")]
    UnknownPassage { example_id: String, passage_id: String },
    #[error("example {example_id}: {source}")]
    Metric {
        example_id: String,
        #[source]
        source: MetricError,
    },
    /// Transient backend failure (network, auth, rate limit). Safe to retry later.
    #[error("example {example_id}: retryable backend failure after {attempts} attempts: {message}")]
    Retryable {
        example_id: String,
        attempts: usize,
        message: String,
    },
    #[error("example {example_id}: malformed backend response: {message}")]
    Malformed { example_id: String, message: String },
    #[error("backend not configured: {0}")]
    NotConfigured(String),
}

impl EvalError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EvalError::Retryable { .. })
    }
}

/// A downstream generator with a fixed task metric.
pub trait Evaluate: Send + Sync {
    fn evaluate(&self, example: &TaskExample, seq: &PassageSequence) -> Result<EvalResult, EvalError>;

    fn metric(&self) -> Metric;

    /// Negative perplexity of the target given the sequence, for backends
    /// that expose token log-likelihoods. `None` when unsupported.
    fn negative_perplexity(
        &self,
        _example: &TaskExample,
        _seq: &PassageSequence,
    ) -> Option<Result<f64, EvalError>> {
        None
    }
}

impl<E: Evaluate + ?Sized> Evaluate for &E {
    fn evaluate(&self, example: &TaskExample, seq: &PassageSequence) -> Result<EvalResult, EvalError> {
        (**self).evaluate(example, seq)
    }

    fn metric(&self) -> Metric {
        (**self).metric()
    }

    fn negative_perplexity(
        &self,
        example: &TaskExample,
        seq: &PassageSequence,
    ) -> Option<Result<f64, EvalError>> {
        (**self).negative_perplexity(example, seq)
    }
}

/// Memoizes results by `(example_id, id sequence)` and counts backend calls.
pub struct CachingEvaluator<E> {
    inner: E,
    cache: Mutex<HashMap<(String, PassageSequence), EvalResult>>,
    calls: AtomicUsize,
}

impl<E: Evaluate> CachingEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of evaluations forwarded to the wrapped backend.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Evaluate> Evaluate for CachingEvaluator<E> {
    fn evaluate(&self, example: &TaskExample, seq: &PassageSequence) -> Result<EvalResult, EvalError> {
        let key = (example.example_id.clone(), seq.clone());
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let result = self.inner.evaluate(example, seq)?;
        self.cache.lock().unwrap().insert(key, result.clone());
        Ok(result)
    }

    fn metric(&self) -> Metric {
        self.inner.metric()
    }

    fn negative_perplexity(
        &self,
        example: &TaskExample,
        seq: &PassageSequence,
    ) -> Option<Result<f64, EvalError>> {
        self.inner.negative_perplexity(example, seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counting;

    impl Evaluate for Counting {
        fn evaluate(&self, _: &TaskExample, seq: &PassageSequence) -> Result<EvalResult, EvalError> {
            Ok(EvalResult {
                output_text: String::new(),
                reward: seq.len() as f64 / 10.0,
                metric: Metric::Em,
            })
        }

        fn metric(&self) -> Metric {
            Metric::Em
        }
    }

    fn example(id: &str) -> TaskExample {
        TaskExample {
            example_id: id.into(),
            query: Query {
                query_id: id.into(),
                text: "q".into(),
            },
            target: "t".into(),
            evidence_ids: vec![],
            candidates: None,
        }
    }

    #[test]
    fn cache_hits_do_not_reach_backend() {
        let ev = CachingEvaluator::new(Counting);
        let seq: PassageSequence = ["a", "b"].into_iter().collect();
        let r1 = ev.evaluate(&example("x"), &seq).unwrap();
        let r2 = ev.evaluate(&example("x"), &seq).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(ev.backend_calls(), 1);
        ev.evaluate(&example("y"), &seq).unwrap();
        assert_eq!(ev.backend_calls(), 2);
    }

    #[test]
    fn duplicate_detection() {
        let s: PassageSequence = ["a", "b", "a"].into_iter().collect();
        assert!(s.has_duplicates());
        assert!(!s.with("c").0[..2].is_empty());
        assert!(!PassageSequence::empty().has_duplicates());
    }

    #[test]
    fn record_round_trip_keeps_optional_fields_out() {
        let line = r#"{"example_id":"e1","query":"who","target":"me"}"#;
        let rec: ExampleRecord = serde_json::from_str(line).unwrap();
        assert_eq!(serde_json::to_string(&rec).unwrap(), line);
    }
}
