use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, Splits};
use super::HarnessError;
use crate::evaluator::oracle::{generate_dataset_with, GeneratorOptions};
use crate::evaluator::{ExampleRecord, TaskExample};
use crate::jsonl;
use crate::policy::Instance;
use crate::retrieval::{self, Corpus, EmbedConfig, RankedEntry, RankedList};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Corpus,
    pub examples: Vec<TaskExample>,
}

/// Load examples and corpus JSONL, checking ids.
pub fn ingest_dataset(examples_path: &Path, corpus_path: &Path, embed: EmbedConfig) -> Result<Dataset, HarnessError> {
    let corpus = Corpus::load_jsonl(corpus_path, embed)?;
    let records: Vec<ExampleRecord> = jsonl::read(examples_path)?;
    if records.is_empty() {
        return Err(HarnessError::NoExamples(examples_path.to_path_buf()));
    }
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let line = i + 1;
        if !seen.insert(rec.example_id.clone()) {
            return Err(HarnessError::DuplicateExample {
                path: examples_path.to_path_buf(),
                line,
                example_id: rec.example_id,
            });
        }
        let ids = rec.candidates.iter().flatten().chain(&rec.evidence_ids);
        if let Some(bad) = ids.into_iter().find(|id| !corpus.contains(id)) {
            return Err(HarnessError::DanglingPassage {
                path: examples_path.to_path_buf(),
                line,
                passage_id: bad.clone(),
            });
        }
        examples.push(TaskExample::from(rec));
    }
    Ok(Dataset { corpus, examples })
}

/// Build or load the dataset a config describes.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    match &cfg.data {
        DataSource::Oracle {
            n_examples,
            n_candidates,
        } => {
            let opts = GeneratorOptions {
                k: cfg.k,
                embed: cfg.embed,
                ..Default::default()
            };
            let (corpus, examples) = generate_dataset_with(&cfg.oracle, *n_examples, *n_candidates, &opts)?;
            Ok(Dataset { corpus, examples })
        }
        DataSource::Jsonl { examples, corpus } => ingest_dataset(examples, corpus, cfg.embed),
    }
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    ds.corpus.save_jsonl(&dir.join("corpus.jsonl"))?;
    crate::evaluator::save_examples(&dir.join("examples.jsonl"), &ds.examples)?;
    Ok(())
}

/// Index ranges of the contiguous train, validation and test splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_ranges(n: usize, s: Splits) -> SplitRanges {
    let n_train = ((n as f64) * s.train).round() as usize;
    let n_val = (((n as f64) * s.val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    SplitRanges {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..n,
    }
}

/// Candidate list for each example: its pre-retrieved ids if given, else the top `k`.
///
/// Pre-retrieved ids keep their listed order and carry their cosine score.
pub fn retrieve_all(corpus: &Corpus, examples: &[TaskExample], k: usize) -> Result<Vec<RankedList>, HarnessError> {
    examples
        .par_iter()
        .map(|ex| match &ex.candidates {
            None => Ok(retrieval::retrieve_top_k(&ex.query, corpus, k)?),
            Some(ids) => {
                let q = corpus.embed_query(&ex.query)?;
                let entries = ids
                    .iter()
                    .take(k)
                    .map(|id| {
                        let e = corpus.embedding(id).expect("ingestion checked ids");
                        Ok(RankedEntry {
                            passage_id: id.clone(),
                            score: retrieval::cosine_similarity(&q, e)?,
                        })
                    })
                    .collect::<Result<Vec<_>, retrieval::RetrievalError>>()?;
                Ok(RankedList { entries, k })
            }
        })
        .collect()
}

/// On-disk form of one ranked list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRecord {
    pub example_id: String,
    pub candidates: Vec<RankedEntry>,
}

pub fn save_retrieved(path: &Path, examples: &[TaskExample], lists: &[RankedList]) -> Result<(), HarnessError> {
    let recs: Vec<RetrievedRecord> = examples
        .iter()
        .zip(lists)
        .map(|(e, l)| RetrievedRecord {
            example_id: e.example_id.clone(),
            candidates: l.entries.clone(),
        })
        .collect();
    Ok(jsonl::write(path, &recs)?)
}

/// Load ranked lists and align them with `examples` by id.
pub fn load_retrieved(path: &Path, examples: &[TaskExample], k: usize) -> Result<Vec<RankedList>, HarnessError> {
    let recs: Vec<RetrievedRecord> = jsonl::read(path)?;
    let by_id: std::collections::HashMap<&str, &RetrievedRecord> =
        recs.iter().map(|r| (r.example_id.as_str(), r)).collect();
    examples
        .iter()
        .map(|e| {
            by_id
                .get(e.example_id.as_str())
                .map(|r| RankedList {
                    entries: r.candidates.clone(),
                    k,
                })
                .ok_or_else(|| HarnessError::Missing(format!("{}: no candidates for {}", path.display(), e.example_id)))
        })
        .collect()
}

/// Policy inputs: query embedding plus the embeddings of the ranked candidates.
pub fn build_instances(corpus: &Corpus, examples: &[TaskExample], lists: &[RankedList]) -> Result<Vec<Instance>, HarnessError> {
    examples
        .par_iter()
        .zip(lists)
        .map(|(ex, list)| {
            let ids: Vec<String> = list.ids().map(str::to_string).collect();
            let candidates = ids
                .iter()
                .map(|id| {
                    corpus.embedding(id).cloned().ok_or_else(|| {
                        HarnessError::Missing(format!("example {}: passage {id} not in corpus", ex.example_id))
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(Instance {
                example_id: ex.example_id.clone(),
                query: corpus.embed_query(&ex.query)?,
                candidates,
                candidate_ids: ids,
            })
        })
        .collect()
}
