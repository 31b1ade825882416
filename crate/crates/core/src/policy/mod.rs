//! The bridge policy: an autoregressive pointer network over candidate slots
//! plus a STOP action.
//!
//! For a query embedding `x` and candidate embeddings `e_1..e_k`:
//!
//! ```text
//! q   = x W_q                      context vector        (h)
//! C_j = e_j W_p                    candidate rows        (k x h)
//! hist_t = sum of C_a over actions a chosen before step t
//! z_t = q + S[t] + hist_t W_h
//! score(j)    = z_t M C_j
//! score(STOP) = z_t . u
//! ```
//!
//! and the step distribution is the softmax over the `k + 1` scores. A
//! candidate stays selectable after it is chosen, so sequences may repeat
//! passages. At step `n_max` STOP is forced.
//!
//! Candidates enter only through their slot index and embedding; the policy
//! emits slot indices, never passage text.

mod decode;
mod gradcheck;
pub(crate) mod model;
mod train;

pub use decode::{decode_beam, decode_greedy, sample_sequence, DecodeOptions};
pub(crate) use decode::sample_encoded;
pub use gradcheck::{gradient_check, gradient_check_fn};
pub use model::{
    backward, encode_inputs, forward_trace, sequence_log_prob, sequence_log_prob_grad, step_logits,
    ActionDistribution, DecodeState, Encoded, Instance, StepTrace, Trace,
};
pub(crate) use model::log_prob_dscores;
pub use train::{
    train_supervised, Adam, OptimizerKind, Schedule, SlConfig, SlReport, TrainError, TrainExample,
};
pub(crate) use train::{Optimizer, CHUNK};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

/// Parameter tensors in flat storage order.
pub const PARAM_NAMES: [&str; 6] = ["w_p", "w_q", "w_h", "step", "m", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub embed_dim: usize,
    pub hidden: usize,
    pub n_max: usize,
}

impl PolicyShape {
    pub fn new(embed_dim: usize, hidden: usize, n_max: usize) -> Self {
        Self {
            embed_dim,
            hidden,
            n_max,
        }
    }

    /// Lengths of each named tensor, in [`PARAM_NAMES`] order.
    pub fn sizes(&self) -> [usize; 6] {
        let (d, h) = (self.embed_dim, self.hidden);
        [d * h, d * h, h * h, (self.n_max + 1) * h, h * h, h]
    }

    pub fn len(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offsets(&self) -> [usize; 7] {
        let s = self.sizes();
        let mut o = [0; 7];
        for i in 0..6 {
            o[i + 1] = o[i] + s[i];
        }
        o
    }
}

/// Flat parameter vector with named row-major views. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    data: Vec<f64>,
}

macro_rules! views {
    ($($name:ident, $name_mut:ident, $idx:expr);* $(;)?) => {
        $(
            pub fn $name(&self) -> &[f64] {
                let o = self.shape.offsets();
                &self.data[o[$idx]..o[$idx + 1]]
            }

            pub fn $name_mut(&mut self) -> &mut [f64] {
                let o = self.shape.offsets();
                &mut self.data[o[$idx]..o[$idx + 1]]
            }
        )*
    };
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Every coordinate drawn from uniform(-scale, scale).
    pub fn random(shape: PolicyShape, seed: u64, scale: f64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let data = (0..shape.len())
            .map(|_| (2.0 * rng.next_f64() - 1.0) * scale)
            .collect();
        Self { shape, data }
    }

    /// The default initialization: uniform(-0.05, 0.05).
    pub fn init(shape: PolicyShape, seed: u64) -> Self {
        Self::random(shape, seed, 0.05)
    }

    pub fn from_flat(shape: PolicyShape, data: Vec<f64>) -> Result<Self, CheckpointError> {
        if data.len() != shape.len() {
            return Err(CheckpointError::Shape(format!(
                "expected {} parameters, found {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    views! {
        w_p, w_p_mut, 0;
        w_q, w_q_mut, 1;
        w_h, w_h_mut, 2;
        step_embed, step_embed_mut, 3;
        m, m_mut, 4;
        u, u_mut, 5;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, alpha: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("example {0}: no candidates to encode")]
    EmptyCandidates(String),
    #[error("example {example_id}: passage `{passage_id}` is not among the candidates")]
    UnknownCandidate { example_id: String, passage_id: String },
    #[error("sequence of length {len} exceeds n_max = {n_max}")]
    TooLong { len: usize, n_max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
}

/// JSON manifest written next to the raw parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub n_max: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub step: u64,
    pub param_names: Vec<String>,
    pub param_sizes: Vec<usize>,
    /// File name of the little-endian f64 parameter blob, relative to the manifest.
    pub params_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub seed: u64,
    pub schedule: Schedule,
    pub step: u64,
}

impl Checkpoint {
    /// Write `<path>` (JSON manifest) and `<path stem>.bin` (parameters).
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let shape = self.params.shape();
        let bin_path = path.with_extension("bin");
        let manifest = CheckpointManifest {
            hidden_width: shape.hidden,
            embed_dim: shape.embed_dim,
            n_max: shape.n_max,
            seed: self.seed,
            schedule: self.schedule,
            step: self.step,
            param_names: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            param_sizes: shape.sizes().to_vec(),
            params_file: bin_path
                .file_name()
                .expect("checkpoint path has a file name")
                .to_string_lossy()
                .into_owned(),
        };
        let io_err = |p: &Path| {
            let p = p.to_path_buf();
            move |source| CheckpointError::Io { path: p, source }
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(io_err(path))?;
        let bytes: Vec<u8> = self
            .params
            .as_slice()
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect();
        fs::write(&bin_path, bytes).map_err(io_err(&bin_path))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest {
                path: path.to_path_buf(),
                source,
            })?;
        let shape = PolicyShape::new(manifest.embed_dim, manifest.hidden_width, manifest.n_max);
        if manifest.param_names != PARAM_NAMES || manifest.param_sizes != shape.sizes() {
            return Err(CheckpointError::Shape(format!(
                "manifest tensors {:?} {:?} do not match shape {shape:?}",
                manifest.param_names, manifest.param_sizes
            )));
        }
        let bin_path = path.with_file_name(&manifest.params_file);
        let bytes = fs::read(&bin_path).map_err(|source| CheckpointError::Io {
            path: bin_path.clone(),
            source,
        })?;
        if bytes.len() % 8 != 0 {
            return Err(CheckpointError::Shape(format!("{} bytes is not a whole number of f64", bytes.len())));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Checkpoint {
            params: PolicyParams::from_flat(shape, data)?,
            seed: manifest.seed,
            schedule: manifest.schedule,
            step: manifest.step,
        })
    }

    /// Fail unless the stored shape matches what the caller expects.
    pub fn expect_shape(&self, shape: PolicyShape) -> Result<(), CheckpointError> {
        if self.params.shape() != shape {
            return Err(CheckpointError::Shape(format!(
                "checkpoint has {:?}, run expects {shape:?}",
                self.params.shape()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn views_partition_the_flat_vector() {
        let shape = PolicyShape::new(8, 3, 2);
        let mut p = PolicyParams::zeros(shape);
        assert_eq!(p.as_slice().len(), 8 * 3 * 2 + 9 + 9 + 9 + 3);
        p.u_mut().fill(1.0);
        p.w_p_mut()[0] = 2.0;
        assert_eq!(p.as_slice()[0], 2.0);
        assert_eq!(&p.as_slice()[shape.len() - 3..], &[1.0, 1.0, 1.0]);
        assert_eq!(p.step_embed().len(), 9);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let shape = PolicyShape::new(16, 4, 3);
        let a = PolicyParams::init(shape, 5);
        assert!(a.as_slice().iter().all(|x| x.abs() < 0.05));
        assert_eq!(a, PolicyParams::init(shape, 5));
        assert_ne!(a, PolicyParams::init(shape, 6));
    }

    #[test]
    fn shape_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint {
            params: PolicyParams::init(PolicyShape::new(8, 2, 2), 1),
            seed: 1,
            schedule: Schedule::default(),
            step: 0,
        };
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(loaded.expect_shape(PolicyShape::new(8, 4, 2)).is_err());
        std::fs::write(dir.path().join("ck.bin"), [0u8; 12]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn checkpoint_round_trips_bit_exactly(seed in any::<u64>(), h in 1usize..6, n_max in 1usize..5, step in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("policy.json");
            let mut params = PolicyParams::random(PolicyShape::new(8, h, n_max), seed, 3.0);
            params.as_mut_slice()[0] = -0.0;
            params.as_mut_slice()[1] = f64::MIN_POSITIVE / 2.0;
            let ck = Checkpoint { params, seed, schedule: Schedule::default(), step };
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            let bits = |p: &PolicyParams| p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.params), bits(&ck.params));
            prop_assert_eq!(back.step, step);
            prop_assert_eq!(back.seed, seed);
        }
    }
}
