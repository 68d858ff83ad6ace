//! Sparse-autoencoder residual steering for report generators.
//!
//! The crate covers the whole offline pipeline: per-token activation
//! storage, Top-K SAE training, correlation and causal feature screening,
//! suppress/boost residual edits applied through a generation hook,
//! GREEN-style scoring with paired bootstrap tests, activation profiling and
//! a basis-free cross-model census. [`toy_world`] provides a planted
//! synthetic generator that exercises every stage end to end.

pub mod activation_store;
pub mod bootstrap;
pub mod census;
pub mod cli;
pub mod clinical_metrics;
pub mod error;
pub mod feature_select;
pub mod profiling;
pub mod steering;
pub mod topk_sae;
pub mod toy_world;

pub use error::{Error, Result};
