//! Desk-scale GRPO training bench.
//!
//! An autoregressive categorical policy emits low-rate "speech" token
//! sequences for text prompts; a simulated recognition channel transcribes
//! them back and yields a composite correctness/confidence reward; a
//! group-relative policy-optimization loop with exact gradients trains the
//! policy against that reward; an experiment harness makes every run a
//! reproducible, inspectable artifact.
//!
//! Module map:
//! - [`seqcore`]: vocabularies, token sequences, corpora, seeded randomness
//! - [`editdist`]: Levenshtein distance and error-rate aggregation
//! - [`asr_sim`]: frame-factorized recognition channel (transcribe + NLL)
//! - [`reward`]: bounded error/confidence rewards and their harmonic blend
//! - [`policy`]: the generator model: sampling, scoring, exact gradients
//! - [`grpo`]: advantages, KL estimator, objective, the update loop
//! - [`harness`]: configs, evaluation, correlation, run orchestration

pub mod asr_sim;
pub mod editdist;
pub mod error;
pub mod fsio;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod reward;
pub mod seqcore;

pub use error::{Error, Result};
