//! Generalized contrastive decoding over pluggable logits backends.
//!
//! The crate is organised around the data flow of one generation step:
//!
//! 1. [`backend`] produces next-token logits plus the per-head attention row
//!    for the current query (analytic, fixture-replay, and remote HTTP
//!    backends are bundled),
//! 2. [`pruning`] scores token importance from that attention row and builds
//!    the degraded inputs (sparsified visual tokens, least-important text),
//! 3. [`contrast`] combines the original and degraded log-probabilities
//!    (plain contrastive decoding, its multi-model generalisation, and the
//!    bundled method variants) and applies the plausibility mask,
//! 4. [`engine`] runs the autoregressive loop and records a per-step trace,
//! 5. [`eval`] scores traces and generations (dependency curves, object
//!    hallucination rates, binary VQA accuracy/F1).
//!
//! [`numerics`] holds the probability-vector primitives everything else is
//! built on. [`cli`] wires the library to the `gcd` binary.

pub mod backend;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod corpus;
pub mod engine;
pub mod eval;
pub mod numerics;
pub mod pruning;
pub mod trace;

pub use backend::{Backend, BackendDescriptor, BackendError, ForwardOutput, TokenId, TokenSequence};
pub use engine::{generate, GenerationConfig, GenerationResult, Method, StepTrace};
pub use numerics::{LogitVector, ProbDistribution};
