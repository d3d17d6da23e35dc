//! Federated-learning simulation with an exact second-order autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`tape`] — dense `f64` tensors and a Wengert-list reverse-mode
//!   tape that also supports exact Hessian-vector products via a
//!   forward-over-reverse sweep.
//! * [`params`] — flat parameter vectors with a named layout, the currency all
//!   federated algorithms trade in.
//! * [`models`] — logistic regression, MLP and small CNN classifiers built on
//!   the tape, plus deterministic initialisation and evaluation.
//! * [`datasets`] — IDX loading, synthetic Gaussian-cluster generation, and
//!   IID / label-skew client partitioning.
//! * [`fed`] — client update rules (plain SGD, proximal SGD, keep-trace
//!   unbiased gradient computation), server-side aggregation and the meta
//!   update.
//! * [`orchestrator`] — the round loop: client selection, learning-rate
//!   schedules, metric records.
//! * [`config`] — JSON run configuration with strict validation.
//! * [`selftest`] — embedded oracle checks wired to the CLI `selftest` command.

pub mod config;
pub mod datasets;
pub mod error;
pub mod fed;
pub mod models;
pub mod orchestrator;
pub mod params;
pub mod selftest;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
