//! Multi-gate mixture-of-experts traffic classification.
//!
//! Flows are turned into fixed-length payload + header feature vectors,
//! per-task transformer experts are trained on them, and the experts are
//! fused under per-task gates and towers to classify several traffic
//! attributes in one pass.

pub mod container;
pub mod dataset;
pub mod diag;
pub mod error;
pub mod expert;
pub mod featfile;
pub mod fusion;
pub mod ingest;
pub mod nn;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
