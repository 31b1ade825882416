use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::HarnessError;
use crate::evaluator::{EvalError, Evaluate, PassageSequence, TaskExample};
use crate::policy::{decode_beam, DecodeOptions, Instance, PolicyParams};
use crate::retrieval::RankedList;
use crate::rng::SplitMix64;

/// A way of turning retrieved candidates into the sequence the generator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum System {
    /// No passages.
    Naive,
    /// A seeded permutation of the top-K.
    Random,
    /// The top-K in retriever order.
    Gtr,
    /// All candidates sorted by pointwise score.
    Psr,
    /// The first `k'` candidates after pointwise sorting.
    PsrTop(usize),
    /// Beam-decoded bridge output.
    Bgm,
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            System::Naive => f.write_str("naive"),
            System::Random => f.write_str("random"),
            System::Gtr => f.write_str("gtr"),
            System::Psr => f.write_str("psr"),
            System::PsrTop(k) => write!(f, "psr_top{k}"),
            System::Bgm => f.write_str("bgm"),
        }
    }
}

impl FromStr for System {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "naive" => System::Naive,
            "random" => System::Random,
            "gtr" => System::Gtr,
            "psr" => System::Psr,
            "bgm" => System::Bgm,
            other => match other.strip_prefix("psr_top").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => System::PsrTop(k),
                _ => return Err(HarnessError::UnknownSystem(s.to_string())),
            },
        })
    }
}

/// A trained bridge and the encoded inputs for the examples being scored.
pub struct Bridge<'a> {
    pub params: &'a PolicyParams,
    pub instances: &'a [Instance],
    pub decode: DecodeOptions,
}

/// Inputs shared by every system.
pub struct SystemInputs<'a, E: ?Sized> {
    pub examples: &'a [TaskExample],
    pub retrieved: &'a [RankedList],
    pub evaluate: &'a E,
    pub bridge: Option<Bridge<'a>>,
    pub seed: u64,
}

fn eval_err(example: &TaskExample, source: EvalError) -> HarnessError {
    HarnessError::Evaluator {
        example_id: example.example_id.clone(),
        source,
    }
}

/// Candidates sorted by pointwise score, highest first.
///
/// The score is the generator's negative perplexity of the target when the
/// backend provides it, otherwise the reward of the single-passage sequence.
/// Ties keep retriever order.
pub fn psr_rank<E: Evaluate + ?Sized>(
    example: &TaskExample,
    retrieved: &RankedList,
    evaluate: &E,
) -> Result<Vec<(String, f64)>, HarnessError> {
    if retrieved.is_empty() {
        return Err(HarnessError::Missing(format!("example {}: no candidates", example.example_id)));
    }
    let mut scored = Vec::with_capacity(retrieved.len());
    for id in retrieved.ids() {
        let seq = PassageSequence(vec![id.to_string()]);
        let score = match evaluate.negative_perplexity(example, &seq) {
            Some(r) => r.map_err(|e| eval_err(example, e))?,
            None => evaluate.evaluate(example, &seq).map_err(|e| eval_err(example, e))?.reward,
        };
        scored.push((id.to_string(), score));
    }
    // Stable sort: equal scores stay in retriever order (score desc, then id).
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

/// The sequence `system` feeds the generator for example `i`.
pub fn system_sequence<E: Evaluate + ?Sized>(
    system: System,
    inputs: &SystemInputs<'_, E>,
    i: usize,
) -> Result<PassageSequence, HarnessError> {
    let example = &inputs.examples[i];
    let ids = || inputs.retrieved[i].ids().map(str::to_string);
    Ok(match system {
        System::Naive => PassageSequence::empty(),
        System::Gtr => ids().collect(),
        System::Random => {
            let mut v: Vec<String> = ids().collect();
            SplitMix64::for_key(inputs.seed, &example.example_id).shuffle(&mut v);
            PassageSequence(v)
        }
        System::Psr | System::PsrTop(_) => {
            let ranked = psr_rank(example, &inputs.retrieved[i], inputs.evaluate)?;
            let n = match system {
                System::PsrTop(k) => k,
                _ => ranked.len(),
            };
            ranked.into_iter().take(n).map(|(id, _)| id).collect()
        }
        System::Bgm => {
            let bridge = inputs.bridge.as_ref().ok_or(HarnessError::MissingCheckpoint)?;
            let inst = &bridge.instances[i];
            let (slots, _) = decode_beam(bridge.params, inst, bridge.decode)?;
            inst.ids_of(&slots)
        }
    })
}

/// Per-example sequences and rewards of one system, in example order.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemRun {
    pub system: System,
    pub sequences: Vec<PassageSequence>,
    pub rewards: Vec<f64>,
}

impl SystemRun {
    pub fn mean(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        }
    }
}

pub fn run_baseline<E: Evaluate + ?Sized>(system: System, inputs: &SystemInputs<'_, E>) -> Result<SystemRun, HarnessError> {
    if system == System::Bgm && inputs.bridge.is_none() {
        return Err(HarnessError::MissingCheckpoint);
    }
    let results: Vec<Result<(PassageSequence, f64), HarnessError>> = (0..inputs.examples.len())
        .into_par_iter()
        .map(|i| {
            let seq = system_sequence(system, inputs, i)?;
            let ex = &inputs.examples[i];
            let r = inputs.evaluate.evaluate(ex, &seq).map_err(|e| eval_err(ex, e))?;
            Ok((seq, r.reward))
        })
        .collect();
    let mut run = SystemRun {
        system,
        sequences: Vec::with_capacity(results.len()),
        rewards: Vec::with_capacity(results.len()),
    };
    for r in results {
        let (s, x) = r?;
        run.sequences.push(s);
        run.rewards.push(x);
    }
    Ok(run)
}
