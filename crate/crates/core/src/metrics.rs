//! Task metrics used both for reporting and as the RL reward.
//!
//! Exact match normalizes both strings by lowercasing, deleting ASCII
//! punctuation, collapsing whitespace runs to one space, and trimming.
//!
//! BLEU is sentence-level BLEU-4 over lowercased whitespace tokens:
//!
//! ```text
//! p_1 = clipped unigram matches / hypothesis unigrams
//! p_n = (clipped n-gram matches + 1) / (hypothesis n-grams + 1)   for n = 2..4
//! BP  = exp(1 - |ref| / |hyp|) if |hyp| < |ref| else 1
//! BLEU = BP * exp((ln p_1 + ln p_2 + ln p_3 + ln p_4) / 4)
//! ```
//!
//! with BLEU = 0 whenever the hypothesis is empty or `p_1 = 0`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    #[serde(alias = "em")]
    Em,
    #[serde(alias = "bleu")]
    Bleu,
}

impl Metric {
    pub fn score(self, prediction: &str, target: &str) -> Result<f64, MetricError> {
        match self {
            Metric::Em => Ok(exact_match(prediction, target)),
            Metric::Bleu => bleu(prediction, target),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Em => "EM",
            Metric::Bleu => "BLEU",
        })
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(Metric::Em),
            "bleu" => Ok(Metric::Bleu),
            _ => Err(MetricError::UnknownMetric(s.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("BLEU target is empty")]
    EmptyTarget,
    #[error("unknown metric `{0}` (expected EM or BLEU)")]
    UnknownMetric(String),
}

pub fn normalize_answer(s: &str) -> String {
    let stripped: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1.0 if the normalized strings are equal, else 0.0.
pub fn exact_match(prediction: &str, target: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(target) {
        1.0
    } else {
        0.0
    }
}

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

pub fn bleu(prediction: &str, target: &str) -> Result<f64, MetricError> {
    let reference: Vec<String> = target.split_whitespace().map(str::to_lowercase).collect();
    if reference.is_empty() {
        return Err(MetricError::EmptyTarget);
    }
    let hypothesis: Vec<String> = prediction.split_whitespace().map(str::to_lowercase).collect();
    if hypothesis.is_empty() {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let hyp = ngram_counts(&hypothesis, n);
        let refc = ngram_counts(&reference, n);
        let matches: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let total = hypothesis.len().saturating_sub(n - 1);
        let p = if n == 1 {
            if matches == 0 {
                return Ok(0.0);
            }
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }

    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(bp * (log_sum / MAX_ORDER as f64).exp())
}
