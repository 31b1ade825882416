pub mod evaluator;
pub mod harness;
pub mod jsonl;
pub mod metrics;
pub mod policy;
pub mod retrieval;
pub mod rl;
pub mod rng;
pub mod sps;
