//! Self-speculative masked diffusion for discrete sequences.
//!
//! A hybrid model exposes two predictive distributions over the masked
//! positions of a partially revealed sequence: a factorized *draft*
//! computed by non-causal blocks, and an autoregressive *target* computed by
//! causal blocks stacked on top of the non-causal hidden states. Samplers
//! draft tokens from the first and verify them against the second with the
//! speculative accept/reject rule, revealing many tokens per non-causal pass.
//!
//! Module map:
//!
//! - [`types`], [`rng`], [`logspace`]: sequences, orderings, probability rows,
//!   reproducible random streams and log-space arithmetic.
//! - [`schedule`]: noise schedules, reveal probabilities and window functions.
//! - [`models`]: the draft/target model interface, the exact tabular backend
//!   and the trainable micro hybrid transformer.
//! - [`sampler`]: masked-diffusion baseline and speculative samplers with NFE
//!   accounting.
//! - [`likelihood`]: exact sample likelihood of the speculative sampler,
//!   rejection-count posterior, ELBO and brute-force oracles.
//! - [`train`]: masking distribution, loss, optimizer and training loop.
//! - [`eval`]: sample-quality metrics and NFE/quality sweeps.

pub mod error;
pub mod eval;
pub mod likelihood;
pub mod logspace;
pub mod models;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{EventTrace, Outcome, Ordering, ProbRow, RevealState, SequenceSpec, Token, TokenSequence};
