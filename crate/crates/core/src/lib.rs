//! Desk-scale simulator for block-diffusion language-model decoding with
//! attention-guided token eviction.
//!
//! A block-diffusion decoder repeatedly forwards a whole block of masked
//! positions through the model and unmasks the few positions whose confidence
//! clears a threshold, so most of each forward pass is spent on tokens that
//! will not decode this step. This crate simulates an engine that prices that
//! redundancy and cuts it: a cheap early-layer signal (the change in pooled
//! attention mass between the first two layers) picks the positions worth
//! finishing, everything else is evicted after the second layer's projections,
//! and decoded tokens graduate into a paged KV cache once their state has
//! stabilised.
//!
//! Module map:
//!
//! * [`tensor`] - dense f64 matrix kernels with fixed summation order.
//! * [`model`] - a tiny pre-norm transformer plus the split prefix/suffix
//!   forward used by the eviction path, and a scripted stand-in backend.
//! * [`focus`] - importance scoring, retention budget, and token selection.
//! * [`cache`] - paged KV storage and the delayed commit state machine.
//! * [`scheduler`] - the per-step engine loop and iteration-level batching.
//! * [`metrics`] - FLOPs ledger, decode histograms, and run reports.
//! * [`theory`] - Gaussian detection model backing the eviction threshold.
//! * [`workload`] - request files and scripted-trace generation.

pub mod cache;
pub mod error;
pub mod focus;
pub mod metrics;
pub mod model;
pub mod scheduler;
pub mod tensor;
pub mod theory;
pub mod trace;
pub mod workload;

pub use error::{Error, Result};
