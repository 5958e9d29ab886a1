//! Few-shot event detection with presence-keyed confidence elicitation.
//!
//! The pipeline builds one prompt per (event type, sentence), asks a chat
//! model to copy the sentence with a `|` before each event phrase and to rate
//! its confidence, recovers the marked tokens from the imperfect copy, and
//! scores the predictions with cumulative confidence sweeps and ROC AUC.
//!
//! Modules, in pipeline order:
//!
//! - [`corpus`]: ontology and corpus loading, eligibility filters
//! - [`sampler`]: few-shot selection by lexical type, test-cycle construction
//! - [`prompt`]: prompt templates and ablation variants
//! - [`gateway`]: chat-completion client, record store and replay
//! - [`parser`]: tolerant parsing of model output into triplets
//! - [`align`]: edit-distance alignment and pipe recovery
//! - [`score`]: matching, confidence sweeps, AUC, ROC points
//! - [`pipeline`] and [`report`]: orchestration and artifact emission

pub mod align;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gateway;
pub mod parser;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod sampler;
pub mod scalar;
pub mod score;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Exact rational used by audits and oracle comparisons.
pub type Exact = num_rational::Ratio<i128>;

pub type SweepRow = score::SweepRow<f64>;
pub type ExactSweepRow = score::SweepRow<Exact>;
pub type RocPoint = score::RocPoint<f64>;
pub type TopicScore = score::TopicScore<f64>;
