//! Distillation-based two-stage inference.
//!
//! A lightweight student network is distilled from a frozen teacher so that it
//! answers easy instances itself and routes hard ones to the teacher. The crate
//! covers the whole loop:
//!
//! - [`nn`]: a small deterministic MLP with softmax/cross-entropy and SGD.
//! - [`distill`]: easy/hard partitions, per-variant pseudo-labels, and the
//!   combined distillation objective.
//! - [`cascade`]: student margins, delegation policies, two-stage prediction and
//!   the reject-option Bayes rule.
//! - [`eval`]: accuracy metrics, cost accounting, threshold sweeps, and CSV/SVG
//!   report emission.
//! - [`datagen`]: seeded long-tailed Gaussian-mixture benchmarks with exact
//!   posteriors.
//! - [`pipeline`]: the config-driven experiment runner behind the CLI.
//!
//! Per-instance work (batch forward passes, target construction, sweeps) runs
//! on rayon when the `parallel` feature is enabled and falls back to plain
//! iterators otherwise. Results are always collected in input order, so output
//! files do not depend on the thread count.

pub mod cascade;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nn;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
pub use nn::{LogitVector, Network, ProbDist, TrainSpec};
