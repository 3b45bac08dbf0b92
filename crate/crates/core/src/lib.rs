//! Concept-bottleneck estimation of the apnea-hypopnea index from single
//! channel oximetry.
//!
//! The pipeline: a 1 Hz SpO2 recording is preprocessed ([`preprocess`]),
//! a sequence model predicts ten interpretable sleep metrics ([`slam`]),
//! and a small MLP fuses them with clinical features to estimate AHI
//! ([`regressor`]). [`concepts`] computes the ground-truth metrics from
//! scored events and [`synth`] generates cohorts with known events.

pub mod concepts;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod preprocess;
pub mod regressor;
pub mod signal;
pub mod slam;
pub mod synth;

pub use error::{CoreError, Result};
