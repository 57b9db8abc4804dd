//! tempolab: a desk-scale laboratory for continual pretraining of masked
//! language models over temporal sequence corpora.
//!
//! The crate is organized around the lifecycle of a temporal-corpus
//! experiment:
//!
//! - [`corpus`] — ingest, validate and deduplicate yearly releases (FASTA or
//!   JSONL) into immutable snapshots.
//! - [`temporal`] — presence bitmasks across years, multiplicity, forget
//!   sets, intersections, multiplicity-weighted replay distributions, and
//!   global-alignment sequence identity.
//! - [`synthgen`] — synthetic temporal benchmarks with known ground truth
//!   (provenance labels, exact mutation-effect fitness).
//! - [`model`] — a small bidirectional masked LM with exact hand-derived
//!   gradients and flat parameter arithmetic.
//! - [`trainer`] — masking, AdamW, the warmup-stable-decay schedule, the
//!   pre-decay checkpoint-reset transition protocol, and step accounting.
//! - [`methods`] — six continual-learning strategies and three baselines as
//!   per-step loss composition, weight updates, and task-boundary hooks.
//! - [`eval`] — validation perplexity and sequence recovery, mutation-effect
//!   ranking with Spearman rho, win-rate aggregation, sequence statistics.
//! - [`runner`] — configuration-driven experiment orchestration and the
//!   pruning-based hyperparameter search.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `tempolab` binary for file-level subcommands.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod methods;
pub mod model;
pub mod rng;
pub mod runner;
pub mod synthgen;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
