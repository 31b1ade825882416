//! End-to-end steps shared by the CLI and the acceptance suite.

use std::ops::Range;

use log::info;
use rayon::prelude::*;

use super::baselines::{run_baseline, Bridge, System, SystemInputs, SystemRun};
use super::config::{BackendKind, ExperimentConfig};
use super::data::{build_instances, load_dataset, retrieve_all, split_ranges, Dataset, SplitRanges};
use super::report::{ResultRow, ResultTable};
use super::HarnessError;
use crate::evaluator::llm::{EndpointConfig, LlmAdapter};
use crate::evaluator::oracle::OracleEvaluator;
use crate::evaluator::{CachingEvaluator, EvalError, EvalResult, Evaluate, PassageSequence, TaskExample};
use crate::metrics::Metric;
use crate::policy::{
    decode_beam, train_supervised, DecodeOptions, Instance, PolicyParams, PolicyShape, SlReport, TrainExample,
};
use crate::retrieval::RankedList;
use crate::rl::{train_rl, RlExample, RlReport};
use crate::sps::{synthesize_all, SilverRecord};

/// The generator behind an experiment.
pub enum Backend<'a> {
    Oracle(OracleEvaluator<'a>),
    Llm(Box<CachingEvaluator<LlmAdapter<'a>>>),
}

impl Evaluate for Backend<'_> {
    fn evaluate(&self, example: &TaskExample, seq: &PassageSequence) -> Result<EvalResult, EvalError> {
        match self {
            Backend::Oracle(o) => o.evaluate(example, seq),
            Backend::Llm(l) => l.evaluate(example, seq),
        }
    }

    fn metric(&self) -> Metric {
        match self {
            Backend::Oracle(o) => o.metric(),
            Backend::Llm(l) => l.metric(),
        }
    }

    fn negative_perplexity(&self, example: &TaskExample, seq: &PassageSequence) -> Option<Result<f64, EvalError>> {
        match self {
            Backend::Oracle(o) => o.negative_perplexity(example, seq),
            Backend::Llm(l) => l.negative_perplexity(example, seq),
        }
    }
}

/// A dataset with its retrieval results, splits and policy inputs.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub retrieved: Vec<RankedList>,
    pub splits: SplitRanges,
    pub instances: Vec<Instance>,
}

impl Experiment {
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        let data = load_dataset(&cfg)?;
        Self::from_dataset(cfg, data)
    }

    pub fn from_dataset(cfg: ExperimentConfig, data: Dataset) -> Result<Self, HarnessError> {
        let retrieved = retrieve_all(&data.corpus, &data.examples, cfg.k)?;
        Self::from_parts(cfg, data, retrieved)
    }

    pub fn from_parts(cfg: ExperimentConfig, data: Dataset, retrieved: Vec<RankedList>) -> Result<Self, HarnessError> {
        let instances = build_instances(&data.corpus, &data.examples, &retrieved)?;
        let splits = split_ranges(data.examples.len(), cfg.splits);
        Ok(Self {
            cfg,
            data,
            retrieved,
            splits,
            instances,
        })
    }

    pub fn backend(&self) -> Result<Backend<'_>, HarnessError> {
        Ok(match self.cfg.backend {
            BackendKind::Oracle => Backend::Oracle(OracleEvaluator::new(&self.data.corpus, self.cfg.oracle.clone())?),
            BackendKind::Llm => {
                let endpoint = EndpointConfig::from_env().map_err(|e| HarnessError::Config(e.to_string()))?;
                Backend::Llm(Box::new(CachingEvaluator::new(LlmAdapter::new(
                    &self.data.corpus,
                    endpoint,
                    self.cfg.metric,
                ))))
            }
        })
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape::new(self.data.corpus.config().dim, self.cfg.policy.hidden, self.cfg.n_max())
    }

    pub fn range(&self, split: &str) -> Result<Range<usize>, HarnessError> {
        match split {
            "train" => Ok(self.splits.train.clone()),
            "val" => Ok(self.splits.val.clone()),
            "test" => Ok(self.splits.test.clone()),
            "all" => Ok(0..self.data.examples.len()),
            other => Err(HarnessError::Config(format!("unknown split `{other}`"))),
        }
    }

    /// Silver sequences for every example, in example order.
    pub fn synthesize<E: Evaluate + ?Sized>(&self, evaluate: &E) -> Result<Vec<SilverRecord>, HarnessError> {
        Ok(synthesize_all(&self.data.examples, &self.retrieved, evaluate)?)
    }

    /// Supervised pairs for `range`, matching records by example id.
    pub fn sl_examples(&self, records: &[SilverRecord], range: Range<usize>) -> Result<Vec<TrainExample>, HarnessError> {
        let by_id: std::collections::HashMap<&str, &SilverRecord> =
            records.iter().map(|r| (r.example_id.as_str(), r)).collect();
        range
            .map(|i| {
                let inst = &self.instances[i];
                let rec = by_id
                    .get(inst.example_id.as_str())
                    .ok_or_else(|| HarnessError::Missing(format!("no silver sequence for {}", inst.example_id)))?;
                Ok(TrainExample {
                    instance: inst.clone(),
                    target: inst.slots_of(&rec.sps)?,
                })
            })
            .collect()
    }

    pub fn rl_examples(&self, range: Range<usize>) -> Vec<RlExample> {
        range
            .map(|i| RlExample {
                example: self.data.examples[i].clone(),
                instance: self.instances[i].clone(),
            })
            .collect()
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.cfg.policy.beam,
            no_repeat: self.cfg.policy.no_repeat,
        }
    }

    pub fn train_sl(&self, records: &[SilverRecord]) -> Result<(PolicyParams, SlReport), HarnessError> {
        let train = self.sl_examples(records, self.splits.train.clone())?;
        let val = self.sl_examples(records, self.splits.val.clone())?;
        let init = PolicyParams::init(self.shape(), self.cfg.seed);
        info!(
            "sl: {} train / {} val examples, {} parameters",
            train.len(),
            val.len(),
            init.as_slice().len()
        );
        Ok(train_supervised(init, &train, &val, &self.cfg.sl)?)
    }

    pub fn train_rl<E: Evaluate + ?Sized>(
        &self,
        sl: &PolicyParams,
        evaluate: &E,
    ) -> Result<(PolicyParams, RlReport), HarnessError> {
        let train = self.rl_examples(self.splits.train.clone());
        let val = self.rl_examples(self.splits.val.clone());
        Ok(train_rl(sl.clone(), sl, &train, &val, evaluate, &self.cfg.rl)?)
    }

    /// Score every configured system on `split`.
    pub fn run_systems<E: Evaluate + ?Sized>(
        &self,
        evaluate: &E,
        bridge: Option<&PolicyParams>,
        split: &str,
    ) -> Result<(ResultTable, Vec<SystemRun>), HarnessError> {
        let range = self.range(split)?;
        let inputs = SystemInputs {
            examples: &self.data.examples[range.clone()],
            retrieved: &self.retrieved[range.clone()],
            evaluate,
            bridge: bridge.map(|params| Bridge {
                params,
                instances: &self.instances[range.clone()],
                decode: self.decode_options(),
            }),
            seed: self.cfg.seed,
        };
        let mut table = ResultTable::default();
        let mut runs = Vec::new();
        for system in self.cfg.parsed_systems() {
            if system == System::Bgm && bridge.is_none() {
                return Err(HarnessError::MissingCheckpoint);
            }
            let run = run_baseline(system, &inputs)?;
            info!("{system} on {split}: {:.2}", 100.0 * run.mean());
            table.push(ResultRow {
                system: system.to_string(),
                split: split.to_string(),
                metric: self.cfg.metric,
                value: 100.0 * run.mean(),
                n_examples: range.len(),
                seed: self.cfg.seed,
            });
            runs.push(run);
        }
        Ok((table, runs))
    }
}

/// Fraction of examples whose beam-decoded sequence equals the target exactly.
pub fn reproduction_rate(params: &PolicyParams, data: &[TrainExample], decode: DecodeOptions) -> Result<f64, HarnessError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool, HarnessError>> = data
        .par_iter()
        .map(|ex| Ok(decode_beam(params, &ex.instance, decode)?.0 == ex.target))
        .collect();
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / data.len() as f64)
}
