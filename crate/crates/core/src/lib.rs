//! Pool-based active learning workbench for rare-class short-text classification.
//!
//! The crate is organised around the round-based workflow used to build a
//! vaccine-safety signal classifier from emergency department triage notes:
//!
//! - [`corpus`]: record types, preprocessing and the keyword rule set.
//! - [`embed`]: pluggable text embedders (hashed n-grams by default).
//! - [`topics`]: centroid clustering, topic merging, keyword summaries.
//! - [`sampler`]: seed quota allocation and query batch strategies.
//! - [`classifier`]: probabilistic linear classifier with checkpointing.
//! - [`augment`]: counterfactual label-flip authoring and its ledger.
//! - [`evaluate`]: confusion matrices, metrics, AUC, active evaluation set.
//! - [`rounds`]: the event-sourced round state machine and project store.
//! - [`synth`]: deterministic synthetic corpus with a sealed oracle key.
//! - [`pipeline`]: scripted end-to-end runs driven by a simulated oracle.

pub mod augment;
pub mod classifier;
pub mod corpus;
pub mod embed;
pub mod evaluate;
pub mod jsonl;
pub mod pipeline;
pub mod rounds;
pub mod sampler;
pub mod synth;
pub mod topics;

pub use corpus::{FilterRuleSet, Label, LabelSource, Pool, RecordId, Sex, TriageRecord};
pub use embed::{EmbedderSpec, EmbeddingVector};
