use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::baselines::System;
use super::HarnessError;
use crate::evaluator::oracle::OracleConfig;
use crate::metrics::Metric;
use crate::policy::SlConfig;
use crate::retrieval::EmbedConfig;
use crate::rl::RlConfig;

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "source", deny_unknown_fields)]
pub enum DataSource {
    /// Generate with the oracle's synthetic task.
    Oracle {
        #[serde(default = "default_n_examples")]
        n_examples: usize,
        #[serde(default = "default_n_candidates")]
        n_candidates: usize,
    },
    /// Load examples and corpus JSONL files.
    Jsonl { examples: PathBuf, corpus: PathBuf },
}

fn default_n_examples() -> usize {
    500
}

fn default_n_candidates() -> usize {
    7
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Oracle {
            n_examples: default_n_examples(),
            n_candidates: default_n_candidates(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// The rule-based generator.
    #[default]
    Oracle,
    /// An HTTP generator configured through `BGM_LLM_URL` / `BGM_LLM_KEY`.
    Llm,
}

/// Contiguous train/validation/test fractions; the test split takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: f64,
    pub val: f64,
}

impl Default for Splits {
    fn default() -> Self {
        Self { train: 0.6, val: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Longest emitted sequence; 0 means `2 * k`.
    pub n_max: usize,
    pub beam: usize,
    pub no_repeat: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            n_max: 0,
            beam: 4,
            no_repeat: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub n_permutations: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self { n_permutations: 20 }
    }
}

/// One experiment, loaded from a TOML file. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub k: usize,
    pub metric: Metric,
    /// Systems to evaluate, in report order.
    pub systems: Vec<String>,
    pub out: PathBuf,
    pub backend: BackendKind,
    pub data: DataSource,
    pub splits: Splits,
    pub embed: EmbedConfig,
    pub oracle: OracleConfig,
    pub policy: PolicyConfig,
    pub sl: SlConfig,
    pub rl: RlConfig,
    pub gap: GapConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            k: 5,
            metric: Metric::Em,
            systems: ["naive", "random", "gtr", "psr", "psr_top1", "psr_top2", "psr_top3", "psr_top4", "bgm"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            out: PathBuf::from("out"),
            backend: BackendKind::Oracle,
            data: DataSource::default(),
            splits: Splits::default(),
            embed: EmbedConfig::default(),
            oracle: OracleConfig::default(),
            policy: PolicyConfig::default(),
            sl: SlConfig::default(),
            rl: RlConfig::default(),
            gap: GapConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagate the top-level seed and metric into the sub-configs that carry their own.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sl.seed = seed;
        self.rl.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.k < 1 {
            return Err(HarnessError::Config("k must be at least 1".into()));
        }
        if self.oracle.metric != self.metric {
            return Err(HarnessError::Config(format!(
                "oracle.metric ({}) differs from metric ({})",
                self.oracle.metric, self.metric
            )));
        }
        let s = self.splits;
        if !(s.train > 0.0 && s.val >= 0.0 && s.train + s.val <= 1.0) {
            return Err(HarnessError::Config("splits must satisfy 0 < train, 0 <= val, train + val <= 1".into()));
        }
        if self.policy.hidden == 0 || self.policy.beam == 0 {
            return Err(HarnessError::Config("policy.hidden and policy.beam must be >= 1".into()));
        }
        for s in &self.systems {
            System::from_str(s)?;
        }
        self.oracle.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.rl.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn n_max(&self) -> usize {
        if self.policy.n_max == 0 {
            2 * self.k
        } else {
            self.policy.n_max
        }
    }

    pub fn parsed_systems(&self) -> Vec<System> {
        self.systems
            .iter()
            .map(|s| System::from_str(s).expect("validated"))
            .collect()
    }
}
