//! Ranking versus selection sensitivity.
//!
//! For each example, draw `n_permutations` seeded permutations of its top-5.
//! Condition A feeds the whole permuted list; condition B feeds only its first
//! element. For each condition and permutation index the dataset-level mean
//! reward is computed, and the spread `(max - min) / gtr_mean` is reported as
//! a percentage, where `gtr_mean` is the mean reward of the unpermuted top-5.

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use super::HarnessError;
use crate::evaluator::{Evaluate, PassageSequence, TaskExample};
use crate::retrieval::RankedList;
use crate::rng::SplitMix64;

pub const GAP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub n_examples: usize,
    pub n_permutations: usize,
    pub seed: u64,
    pub gtr_mean: f64,
    /// Dataset mean per permutation index, full permuted list.
    pub full_means: Vec<f64>,
    /// Dataset mean per permutation index, first element only.
    pub top1_means: Vec<f64>,
    pub full_spread_pct: f64,
    pub top1_spread_pct: f64,
}

impl GapReport {
    /// Top-1 spread over full-list spread; `None` when the full-list spread is zero.
    pub fn ratio(&self) -> Option<f64> {
        (self.full_spread_pct > 0.0).then(|| self.top1_spread_pct / self.full_spread_pct)
    }

    pub fn to_markdown(&self) -> String {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ratio = match self.ratio() {
            Some(r) => format!("{r:.2}"),
            None => "inf".to_string(),
        };
        format!(
            "# Ranking vs. selection\n\n\
             {} examples, {} permutations of the top-{GAP_K}, seed {}.\n\
             Unpermuted top-{GAP_K} mean: {:.2}\n\n\
             | Condition | Mean | Min | Max | Spread (% of top-{GAP_K}) |\n\
             |---|---|---|---|---|\n\
             | A: permuted top-{GAP_K} | {:.2} | {:.2} | {:.2} | {:.2} |\n\
             | B: first of permutation | {:.2} | {:.2} | {:.2} | {:.2} |\n\n\
             Spread ratio B/A: {ratio}\n",
            self.n_examples,
            self.n_permutations,
            self.seed,
            100.0 * self.gtr_mean,
            100.0 * mean(&self.full_means),
            100.0 * min(&self.full_means),
            100.0 * max(&self.full_means),
            self.full_spread_pct,
            100.0 * mean(&self.top1_means),
            100.0 * min(&self.top1_means),
            100.0 * max(&self.top1_means),
            self.top1_spread_pct,
        )
    }
}

fn min(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn run_gap_experiment<E: Evaluate + ?Sized>(
    examples: &[TaskExample],
    retrieved: &[RankedList],
    evaluate: &E,
    n_permutations: usize,
    seed: u64,
) -> Result<GapReport, HarnessError> {
    if examples.is_empty() {
        return Err(HarnessError::Missing("gap experiment needs examples".into()));
    }
    if let Some((ex, list)) = examples.iter().zip(retrieved).find(|(_, l)| l.len() != GAP_K) {
        return Err(HarnessError::GapK {
            example_id: ex.example_id.clone(),
            k: list.len(),
        });
    }
    if n_permutations == 0 {
        return Err(HarnessError::Config("n_permutations must be at least 1".into()));
    }
    if n_permutations < 10 {
        warn!("gap experiment with {n_permutations} permutations; spreads are not meaningful below 10");
    }

    let eval = |ex: &TaskExample, seq: &PassageSequence| {
        evaluate
            .evaluate(ex, seq)
            .map(|r| r.reward)
            .map_err(|source| HarnessError::Evaluator {
                example_id: ex.example_id.clone(),
                source,
            })
    };
    // Per example: (gtr reward, [full reward per perm], [top1 reward per perm]).
    let per_example: Vec<Result<(f64, Vec<f64>, Vec<f64>), HarnessError>> = examples
        .par_iter()
        .zip(retrieved)
        .map(|(ex, list)| {
            let ids: Vec<String> = list.ids().map(str::to_string).collect();
            let gtr = eval(ex, &PassageSequence(ids.clone()))?;
            let mut full = Vec::with_capacity(n_permutations);
            let mut top1 = Vec::with_capacity(n_permutations);
            for p in 0..n_permutations {
                let mut perm = ids.clone();
                SplitMix64::for_key(seed, &format!("{}#{p}", ex.example_id)).shuffle(&mut perm);
                top1.push(eval(ex, &PassageSequence(vec![perm[0].clone()]))?);
                full.push(eval(ex, &PassageSequence(perm))?);
            }
            Ok((gtr, full, top1))
        })
        .collect();

    let n = examples.len() as f64;
    let mut gtr_sum = 0.0;
    let mut full_means = vec![0.0; n_permutations];
    let mut top1_means = vec![0.0; n_permutations];
    for r in per_example {
        let (g, f, t) = r?;
        gtr_sum += g;
        for p in 0..n_permutations {
            full_means[p] += f[p];
            top1_means[p] += t[p];
        }
    }
    full_means.iter_mut().chain(top1_means.iter_mut()).for_each(|x| *x /= n);
    let gtr_mean = gtr_sum / n;
    if gtr_mean <= 0.0 {
        return Err(HarnessError::ZeroBaseline);
    }
    let spread = |v: &[f64]| 100.0 * (max(v) - min(v)) / gtr_mean;
    Ok(GapReport {
        n_examples: examples.len(),
        n_permutations,
        seed,
        gtr_mean,
        full_spread_pct: spread(&full_means),
        top1_spread_pct: spread(&top1_means),
        full_means,
        top1_means,
    })
}
