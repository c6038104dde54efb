//! Exact-gradient laboratory for reinforcement learning with verifiable
//! rewards on synthetic two-stage (perception then reasoning) token tasks.
//!
//! The crate trains small softmax policies (tabular or one-hidden-layer MLP)
//! with group-relative policy optimization and variants that mix noisy
//! expert demonstrations into each rollout group, gate them on answer
//! correctness, and reweight their tokens by a normalized student-expert
//! discrepancy. Every loss has a hand-derived gradient checked against
//! finite differences, which makes the package suitable for auditing
//! algorithmic claims rather than for scale.

pub mod analysis;
pub mod config;
pub mod env;
pub mod error;
pub mod objective;
pub mod policy;
pub mod rollout;
pub mod trainer;

pub use error::{Error, Result};
