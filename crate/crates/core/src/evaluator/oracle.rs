//! Rule-based stand-in for a frozen LLM, plus the synthetic dataset it scores.
//!
//! Every example's target is a space-joined list of unique fact tokens. An
//! evidence passage carries exactly one of them; a distractor carries none.
//! Given a passage sequence the oracle "generates" as follows:
//!
//! 1. Read only the first `context_budget` entries.
//! 2. Collect the example's fact tokens found in those passages. With
//!    `repeat_required`, a fact counts only once passages holding it have
//!    been read at least twice.
//! 3. Every passage read that holds no fact is a distractor. Remove
//!    `floor(distractor_penalty * distractors_read)` collected facts, taking
//!    the last ones first. "Last" is by target order, or by encounter order
//!    when `order_sensitive` is set, so an order-insensitive oracle depends
//!    only on the multiset of ids read.
//! 4. Emit the surviving facts (target order, or encounter order) and score
//!    the text against the target with the dataset metric.
//!
//! An empty sequence answers "from memory": the target for the examples whose
//! seeded memory flag is set, the empty string otherwise. Generated queries
//! of memory-known examples carry the word `famous`, and multi-fact queries
//! ask for `both codes`, so a policy can see which regime it is in.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalResult, Evaluate, PassageSequence, TaskExample};
use crate::metrics::Metric;
use crate::retrieval::{self, Corpus, EmbedConfig, Passage, Query, RetrievalError};
use crate::rng::{mix64, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n_facts_per_answer: usize,
    pub distractor_penalty: f64,
    /// Maximum number of passages the oracle reads.
    pub context_budget: usize,
    pub order_sensitive: bool,
    pub seed: u64,
    /// Fraction of examples answerable with no context.
    pub memory_rate: f64,
    /// Fraction of examples that need one extra fact.
    pub multi_hop_rate: f64,
    /// Facts count only when their passage is read at least twice.
    pub repeat_required: bool,
    pub metric: Metric,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n_facts_per_answer: 1,
            distractor_penalty: 0.3,
            context_budget: 5,
            order_sensitive: false,
            seed: 0,
            memory_rate: 0.3,
            multi_hop_rate: 0.5,
            repeat_required: false,
            metric: Metric::Em,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |msg: &str| Err(OracleError::InvalidConfig(msg.to_string()));
        if self.context_budget < 1 {
            return bad("context_budget must be at least 1");
        }
        if self.n_facts_per_answer < 1 {
            return bad("n_facts_per_answer must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.distractor_penalty) {
            return bad("distractor_penalty must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.memory_rate) || !(0.0..=1.0).contains(&self.multi_hop_rate) {
            return bad("rates must lie in [0, 1]");
        }
        Ok(())
    }

    fn max_facts(&self) -> usize {
        self.n_facts_per_answer + usize::from(self.multi_hop_rate > 0.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
    #[error(
        "infeasible config: only {rate:.3} of examples retrieve an evidence passage in the top {k} after {rounds} rounds"
    )]
    Infeasible { rate: f64, k: usize, rounds: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Deterministic per-example memory flag.
pub fn memory_known(seed: u64, example_id: &str, rate: f64) -> bool {
    SplitMix64::for_key(seed ^ 0x6d65_6d6f_7279, example_id).next_f64() < rate
}

/// Knobs for the generator that do not affect how sequences are scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorOptions {
    pub k: usize,
    pub embed: EmbedConfig,
    /// Required fraction of examples with an evidence passage in the top `k`.
    pub min_retrievable: f64,
    pub max_rounds: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            k: 5,
            embed: EmbedConfig::default(),
            min_retrievable: 0.9,
            max_rounds: 25,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

// None of these appear in query templates, so query/passage overlap comes
// only from topic words.
const FILLER: &[&str] = &[
    "river", "stone", "garden", "window", "market", "summer", "winter", "silver", "orange",
    "candle", "ladder", "pocket", "meadow", "harbor", "lantern", "blanket", "forest", "valley",
    "thunder", "pencil", "mirror", "basket", "bridge", "castle", "engine", "feather", "glacier",
    "hammer", "island", "jacket", "kettle", "lemon", "marble", "needle", "orchard", "pepper",
    "quiet", "ribbon", "saddle", "timber", "umbrella", "velvet", "wagon", "yellow", "zephyr",
    "anchor", "barrel", "cobalt", "desert", "ember", "fabric", "granite", "hollow", "ivory",
    "jungle", "kernel", "lizard", "mosaic", "nectar", "oyster", "parade", "quartz", "rocket",
    "shadow", "tunnel", "violet", "walnut", "crystal", "dolphin", "falcon", "ginger", "hazel",
    "indigo", "juniper", "lagoon", "mango", "nutmeg", "olive", "pillow", "raven", "saffron",
    "tulip", "willow", "canyon", "copper", "cotton", "dinner", "evening", "morning", "paper",
    "planet", "puzzle", "salad", "spring", "sugar", "teapot", "ticket", "travel", "village",
];
const EVIDENCE_PHRASES: &[&str] = &[
    "registry entry lists",
    "archive record states",
    "official ledger shows",
];
const DISTRACTOR_PHRASES: &[&str] = &[
    "travel notes mention",
    "old stories praise",
    "local gossip about",
];

fn pseudo_word(rng: &mut SplitMix64, syllables: usize) -> String {
    let mut w = String::with_capacity(2 * syllables + 2);
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.below(CONSONANTS.len())] as char);
        w.push(VOWELS[rng.below(VOWELS.len())] as char);
    }
    w
}

struct ExampleSkeleton {
    example_id: String,
    topics: Vec<String>,
    facts: Vec<String>,
    memory: bool,
}

fn draw_skeletons(cfg: &OracleConfig, n_examples: usize) -> Vec<ExampleSkeleton> {
    let mut rng = SplitMix64::new(mix64(cfg.seed ^ 0x736b_656c));
    let mut used: HashSet<String> = FILLER.iter().map(|s| s.to_string()).collect();
    let mut fresh = |rng: &mut SplitMix64, digits: bool| loop {
        let mut w = pseudo_word(rng, 3);
        if digits {
            w.push_str(&format!("{:02}", rng.below(100)));
        }
        if used.insert(w.clone()) {
            return w;
        }
    };
    (0..n_examples)
        .map(|i| {
            let example_id = format!("ex{i:05}");
            let n_facts = cfg.n_facts_per_answer + usize::from(rng.next_f64() < cfg.multi_hop_rate);
            let topics = (0..3).map(|_| fresh(&mut rng, false)).collect();
            let facts = (0..n_facts).map(|_| fresh(&mut rng, true)).collect();
            let memory = memory_known(cfg.seed, &example_id, cfg.memory_rate);
            ExampleSkeleton {
                example_id,
                topics,
                facts,
                memory,
            }
        })
        .collect()
}

fn passage_text(rng: &mut SplitMix64, topics: &[String], phrase: &str, fact: Option<&str>) -> String {
    let mut words: Vec<&str> = topics.iter().map(String::as_str).collect();
    rng.shuffle(&mut words);
    words.truncate(2 + rng.below(2));
    words.extend(phrase.split(' '));
    if let Some(f) = fact {
        words.push(f);
    }
    for _ in 0..3 + rng.below(6) {
        words.push(FILLER[rng.below(FILLER.len())]);
    }
    words.join(" ")
}

/// Passages for one example under a given salt; evidence ids come back in fact order.
fn build_passages(
    cfg: &OracleConfig,
    sk: &ExampleSkeleton,
    n_candidates: usize,
    salt: u64,
) -> (Vec<Passage>, Vec<String>) {
    let mut rng = SplitMix64::for_key(mix64(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)), &sk.example_id);
    let mut texts: Vec<(Option<usize>, String)> = Vec::with_capacity(n_candidates);
    for (fi, fact) in sk.facts.iter().enumerate() {
        let phrase = EVIDENCE_PHRASES[rng.below(EVIDENCE_PHRASES.len())];
        texts.push((Some(fi), passage_text(&mut rng, &sk.topics, phrase, Some(fact))));
    }
    while texts.len() < n_candidates {
        let phrase = DISTRACTOR_PHRASES[rng.below(DISTRACTOR_PHRASES.len())];
        texts.push((None, passage_text(&mut rng, &sk.topics, phrase, None)));
    }
    rng.shuffle(&mut texts);
    let mut evidence = vec![String::new(); sk.facts.len()];
    let passages = texts
        .into_iter()
        .enumerate()
        .map(|(j, (fact, text))| {
            let passage_id = format!("{}-p{j}", sk.example_id);
            if let Some(fi) = fact {
                evidence[fi] = passage_id.clone();
            }
            Passage { passage_id, text }
        })
        .collect();
    (passages, evidence)
}

fn query_text(sk: &ExampleSkeleton) -> String {
    let famous = if sk.memory { "famous " } else { "" };
    let head = if sk.facts.len() > 1 {
        format!("what are both {famous}codes for")
    } else {
        format!("what is the {famous}code for")
    };
    format!("{head} {}", sk.topics.join(" "))
}

pub fn generate_dataset(
    cfg: &OracleConfig,
    n_examples: usize,
    n_candidates_per_example: usize,
) -> Result<(Corpus, Vec<TaskExample>), OracleError> {
    generate_dataset_with(cfg, n_examples, n_candidates_per_example, &GeneratorOptions::default())
}

/// Generate a corpus and examples, re-salting the filler of examples whose
/// evidence falls outside the top `k` until the retrievable fraction reaches
/// `opts.min_retrievable`.
pub fn generate_dataset_with(
    cfg: &OracleConfig,
    n_examples: usize,
    n_candidates_per_example: usize,
    opts: &GeneratorOptions,
) -> Result<(Corpus, Vec<TaskExample>), OracleError> {
    cfg.validate()?;
    if n_candidates_per_example < cfg.max_facts() {
        return Err(OracleError::InvalidConfig(format!(
            "n_candidates_per_example ({n_candidates_per_example}) is below the number of facts per answer ({})",
            cfg.max_facts()
        )));
    }
    let skeletons = draw_skeletons(cfg, n_examples);
    let queries: Vec<Query> = skeletons
        .iter()
        .map(|sk| Query {
            query_id: sk.example_id.clone(),
            text: query_text(sk),
        })
        .collect();
    let mut salts = vec![0u64; n_examples];

    for round in 0..=opts.max_rounds {
        let built: Vec<_> = skeletons
            .iter()
            .zip(&salts)
            .map(|(sk, &salt)| build_passages(cfg, sk, n_candidates_per_example, salt))
            .collect();
        let corpus = Corpus::new(
            built.iter().flat_map(|(p, _)| p.iter().cloned()).collect(),
            opts.embed,
        )?;
        let hits: Vec<bool> = queries
            .par_iter()
            .zip(&built)
            .map(|(q, (_, evidence))| {
                let ranked = retrieval::retrieve_top_k(q, &corpus, opts.k)?;
                let hit = ranked.ids().any(|id| evidence.iter().any(|e| e == id));
                Ok(hit)
            })
            .collect::<Result<_, RetrievalError>>()?;
        let rate = if n_examples == 0 {
            1.0
        } else {
            hits.iter().filter(|h| **h).count() as f64 / n_examples as f64
        };
        if rate >= opts.min_retrievable {
            let examples = skeletons
                .iter()
                .zip(queries)
                .zip(built)
                .map(|((sk, query), (_, evidence_ids))| TaskExample {
                    example_id: sk.example_id.clone(),
                    query,
                    target: sk.facts.join(" "),
                    evidence_ids,
                    candidates: None,
                })
                .collect();
            return Ok((corpus, examples));
        }
        if round == opts.max_rounds {
            return Err(OracleError::Infeasible {
                rate,
                k: opts.k,
                rounds: opts.max_rounds,
            });
        }
        for (salt, hit) in salts.iter_mut().zip(&hits) {
            if !hit {
                *salt += 1;
            }
        }
    }
    unreachable!("loop returns on the final round")
}

/// Oracle backend bound to a corpus.
pub struct OracleEvaluator<'a> {
    corpus: &'a Corpus,
    cfg: OracleConfig,
}

impl<'a> OracleEvaluator<'a> {
    pub fn new(corpus: &'a Corpus, cfg: OracleConfig) -> Result<Self, OracleError> {
        cfg.validate()?;
        Ok(Self { corpus, cfg })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn is_memory_known(&self, example: &TaskExample) -> bool {
        memory_known(self.cfg.seed, &example.example_id, self.cfg.memory_rate)
    }

    /// The simulated generation, without scoring.
    pub fn generate(&self, example: &TaskExample, seq: &PassageSequence) -> Result<String, EvalError> {
        if seq.is_empty() {
            return Ok(if self.is_memory_known(example) {
                example.target.clone()
            } else {
                String::new()
            });
        }
        let facts: Vec<String> = example.target.split_whitespace().map(str::to_lowercase).collect();
        let threshold = if self.cfg.repeat_required { 2 } else { 1 };
        let mut reads: HashMap<usize, usize> = HashMap::new();
        let mut encountered: Vec<usize> = Vec::new();
        let mut distractors = 0usize;

        for id in seq.ids().iter().take(self.cfg.context_budget) {
            let passage = self.corpus.get(id).ok_or_else(|| EvalError::UnknownPassage {
                example_id: example.example_id.clone(),
                passage_id: id.clone(),
            })?;
            let tokens: HashSet<String> = retrieval::tokenize(&passage.text).collect();
            let mut any = false;
            for (fi, fact) in facts.iter().enumerate() {
                if tokens.contains(fact) {
                    any = true;
                    let n = reads.entry(fi).or_insert(0);
                    *n += 1;
                    if *n == threshold {
                        encountered.push(fi);
                    }
                }
            }
            if !any {
                distractors += 1;
            }
        }

        let mut kept = encountered;
        if !self.cfg.order_sensitive {
            kept.sort_unstable();
        }
        let removed = (self.cfg.distractor_penalty * distractors as f64).floor() as usize;
        kept.truncate(kept.len().saturating_sub(removed));
        Ok(kept.iter().map(|&fi| facts[fi].as_str()).collect::<Vec<_>>().join(" "))
    }
}

impl Evaluate for OracleEvaluator<'_> {
    fn evaluate(&self, example: &TaskExample, seq: &PassageSequence) -> Result<EvalResult, EvalError> {
        let output_text = self.generate(example, seq)?;
        let reward = self
            .cfg
            .metric
            .score(&output_text, &example.target)
            .map_err(|source| EvalError::Metric {
                example_id: example.example_id.clone(),
                source,
            })?;
        Ok(EvalResult {
            output_text,
            reward,
            metric: self.cfg.metric,
        })
    }

    fn metric(&self) -> Metric {
        self.cfg.metric
    }
}
