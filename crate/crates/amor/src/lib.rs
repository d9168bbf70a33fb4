//! AMOR: an entropy-gated hybrid of a GRU backbone and sparse top-k
//! attention over a Ghost KV cache, plus the synthetic-task harness used
//! to study it.
//!
//! The crate is organized around six pieces:
//!
//! - [`tensor`] — minimal f64 reverse-mode autodiff (tape based)
//! - [`tasks`] — seeded generators for the Simple Retrieval and
//!   NeedleHaystack tasks
//! - [`model`] — the gated architecture and its comparison baselines
//! - [`train`] — AdamW training loop with gradient clipping
//! - [`metrics`] — accuracies, gate confusion statistics, entropy gap
//! - [`experiments`] — seeded experiment commands with JSON/CSV results
//!
//! See the `examples/` directory for one runnable entry point per
//! experiment; the `amor` binary exposes the same commands as subcommands.

pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod train;
pub mod tensor;

pub use error::{AmorError, Result};
