//! The guide under `book/`, one module per chapter so `cargo test --doc`
//! runs every listing and a failure names its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/retrieval.md")]
pub mod retrieval {}
#[doc = include_str!("../../../book/src/oracle.md")]
pub mod oracle {}
#[doc = include_str!("../../../book/src/silver.md")]
pub mod silver {}
#[doc = include_str!("../../../book/src/policy.md")]
pub mod policy {}
#[doc = include_str!("../../../book/src/rl.md")]
pub mod rl {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
