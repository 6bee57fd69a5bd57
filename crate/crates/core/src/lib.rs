//! Explainable anomaly detection for wearable-derived daily behaviour and
//! physiology.
//!
//! The pipeline labels normal and symptom-worsening periods from biweekly
//! PHQ-8/GAD-7 assessments, extracts three daily features (sleep duration,
//! total steps, resting heart rate) from minute-level streams, trains an LSTM
//! autoencoder on normal 7-day windows, flags windows whose reconstruction
//! error exceeds a validation percentile, evaluates detections with
//! event-adjusted precision/recall, and attributes anomaly scores to
//! individual window cells with Shapley values.

pub mod artifacts;
pub mod cohort;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod features;
pub mod labeling;
pub mod lstm;
pub mod par;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use par::Execution;
