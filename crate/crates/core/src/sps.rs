//! Silver passage sequences (SPS): greedy supervision targets for the bridge.
//!
//! Starting from the empty sequence, each round scores every retrieved
//! candidate not yet in the sequence by appending it and calling the
//! generator. The best candidate is tracked with a strict `>` comparison, so
//! among equal rewards the earliest in retriever order wins. It is appended
//! only if it strictly beats the current sequence's reward; otherwise the
//! search stops. The sequence therefore grows only at its tail, never holds
//! a duplicate, and stops after at most `k` rounds.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluator::{EvalError, Evaluate, PassageSequence, TaskExample};
use crate::jsonl::{self, JsonlError};
use crate::retrieval::RankedList;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverRecord {
    pub example_id: String,
    pub sps: PassageSequence,
    /// `R(∅)` followed by the reward after each accepted passage.
    pub reward_trace: Vec<f64>,
}

impl SilverRecord {
    pub fn final_reward(&self) -> f64 {
        *self.reward_trace.last().expect("trace starts with R(empty)")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpsError {
    #[error("example {0}: no retrieved candidates")]
    NoCandidates(String),
    #[error("evaluator failed after {} accepted passages: {source}", partial.sps.len())]
    Evaluator {
        #[source]
        source: EvalError,
        partial: Box<SilverRecord>,
    },
    #[error("brute-force search over k = {k}, max_len = {max_len} exceeds the supported bound (k <= 6, max_len <= k)")]
    SearchSpaceExceeded { k: usize, max_len: usize },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

pub fn synthesize_sps<E: Evaluate + ?Sized>(
    example: &TaskExample,
    retrieved: &RankedList,
    evaluate: &E,
) -> Result<SilverRecord, SpsError> {
    if retrieved.is_empty() {
        return Err(SpsError::NoCandidates(example.example_id.clone()));
    }
    let mut record = SilverRecord {
        example_id: example.example_id.clone(),
        sps: PassageSequence::empty(),
        reward_trace: Vec::new(),
    };
    macro_rules! eval {
        ($seq:expr) => {
            match evaluate.evaluate(example, $seq) {
                Ok(r) => r.reward,
                Err(source) => {
                    return Err(SpsError::Evaluator {
                        source,
                        partial: Box::new(record),
                    })
                }
            }
        };
    }

    let mut r_silver = eval!(&record.sps);
    record.reward_trace.push(r_silver);
    loop {
        let mut best: Option<&str> = None;
        let mut r_best = f64::NEG_INFINITY;
        for c in retrieved.ids().filter(|c| !record.sps.contains(c)) {
            let r_cur = eval!(&record.sps.with(c));
            if r_cur > r_best {
                best = Some(c);
                r_best = r_cur;
            }
        }
        match best {
            Some(c) if r_best > r_silver => {
                record.sps.push(c);
                r_silver = r_best;
                record.reward_trace.push(r_silver);
            }
            _ => break,
        }
    }
    Ok(record)
}

/// Synthesize for many examples in parallel; output order follows input order.
pub fn synthesize_all<E: Evaluate + ?Sized>(
    examples: &[TaskExample],
    retrieved: &[RankedList],
    evaluate: &E,
) -> Result<Vec<SilverRecord>, SpsError> {
    examples
        .par_iter()
        .zip(retrieved)
        .map(|(ex, r)| synthesize_sps(ex, r, evaluate))
        .collect()
}

/// Exhaustive search over duplicate-free sequences of length `0..=max_len`.
///
/// Returns the highest-reward sequence; ties go to the lexicographically
/// smallest id list. Test oracle only: limited to `k <= 6`.
pub fn brute_force_best_sequence<E: Evaluate + ?Sized>(
    example: &TaskExample,
    retrieved: &RankedList,
    evaluate: &E,
    max_len: usize,
) -> Result<(PassageSequence, f64), SpsError> {
    let ids: Vec<&str> = retrieved.ids().collect();
    if ids.len() > 6 || max_len > ids.len() {
        return Err(SpsError::SearchSpaceExceeded {
            k: ids.len(),
            max_len,
        });
    }
    let mut best: Option<(PassageSequence, f64)> = None;
    let mut stack = vec![PassageSequence::empty()];
    while let Some(seq) = stack.pop() {
        let r = evaluate
            .evaluate(example, &seq)
            .map_err(|source| SpsError::Evaluator {
                source,
                partial: Box::new(SilverRecord {
                    example_id: example.example_id.clone(),
                    sps: seq.clone(),
                    reward_trace: vec![],
                }),
            })?
            .reward;
        let better = match &best {
            None => true,
            Some((b, rb)) => r > *rb || (r == *rb && seq < *b),
        };
        if seq.len() < max_len {
            for id in ids.iter().filter(|id| !seq.contains(id)) {
                stack.push(seq.with(id));
            }
        }
        if better {
            best = Some((seq, r));
        }
    }
    Ok(best.expect("empty sequence is always evaluated"))
}

pub fn save_records(path: &Path, records: &[SilverRecord]) -> Result<(), SpsError> {
    Ok(jsonl::write(path, records)?)
}

pub fn load_records(path: &Path) -> Result<Vec<SilverRecord>, SpsError> {
    Ok(jsonl::read(path)?)
}
