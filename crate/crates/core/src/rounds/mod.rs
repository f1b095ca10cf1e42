//! Round state machine, labeled dataset versions and the event-sourced
//! project store.
//!
//! A round moves through training, checkpoint evaluation, pool prediction,
//! queue building, labeling and expansion. Every state change is an
//! [`Event`] appended to `events.jsonl`; folding the log with
//! [`ProjectState::apply`] rebuilds the state exactly.

mod dataset;
mod labels;
mod oracle;
mod project;
mod state;

pub use dataset::{
    expand_dataset, seed_dataset, unit_hash, Candidate, ExpandOptions, Holdover, LabeledDataset,
    SplitCounts, AUTHORED_PRIORITY, DEFAULT_RATIO_CAP,
};
pub use labels::{LabelBook, LabelEntry, LabelStatus, OracleKind, Vote};
pub use oracle::SimulatedOracle;
pub use project::{Clock, Conflict, CounterfactualRequest, LabelAck, Project, QueueItem, Status};
pub use state::{
    Comparison, ComparisonRow, Envelope, Event, Nomination, Phase, ProjectConfig, ProjectState,
    RoundMode, RoundOptions, RoundReport, RoundState, StoredBatch, RESUME, SCRATCH,
};

use crate::augment::AugmentError;
use crate::classifier::ClassifierError;
use crate::corpus::{CorpusError, RecordId};
use crate::embed::EmbedError;
use crate::evaluate::EvalError;
use crate::jsonl::JsonlError;
use crate::sampler::SamplerError;
use crate::topics::TopicError;

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("project is not initialized")]
    NotInitialized,
    #[error("project is already initialized")]
    AlreadyInitialized,
    #[error("no dataset version to train on")]
    NoDataset,
    #[error("round {0} is not complete")]
    PreviousIncomplete(u32),
    #[error("resuming needs a completed earlier round")]
    NoPreviousRound,
    #[error("no round is active")]
    NoActiveRound,
    #[error("unknown round {0}")]
    UnknownRound(u32),
    #[error("expected phase {expected:?}, found {found:?}")]
    WrongPhase {
        expected: state::Phase,
        found: state::Phase,
    },
    #[error("the round is already complete")]
    RoundComplete,
    #[error("{remaining} queued record(s) still need a final label")]
    QueueIncomplete { remaining: usize },
    #[error("unknown record {0}")]
    UnknownRecord(RecordId),
    #[error("record {0} is unlabeled")]
    Unlabeled(RecordId),
    #[error("record {0} already exists")]
    DuplicateRecord(RecordId),
    #[error("unknown checkpoint {0}")]
    UnknownCheckpoint(String),
    #[error("unknown batch {0}")]
    UnknownBatch(usize),
    #[error("labels for {id} disagree; waiting for adjudication (event {seq})")]
    ConflictPending { id: RecordId, seq: u64 },
    #[error("no topic model with flagged topics has been recorded")]
    NoTopicModel,
    #[error("the ratio cap cannot hold without positives")]
    RatioUnreachable,
    #[error("dataset v{version} has {negative} negatives for {positive} positives, over the cap")]
    RatioViolated {
        version: u32,
        positive: usize,
        negative: usize,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid request: {0}")]
    InvalidOption(String),
    #[error("project store is locked by another process ({0})")]
    Locked(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

impl LoopError {
    /// True for violations of a data invariant, as opposed to bad input,
    /// missing files or remote failures.
    pub fn is_invariant(&self) -> bool {
        matches!(
            self,
            LoopError::Invariant(_)
                | LoopError::RatioViolated { .. }
                | LoopError::RatioUnreachable
                | LoopError::Eval(EvalError::LeakageDetected(_))
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            LoopError::Io { .. }
                | LoopError::Json { .. }
                | LoopError::Jsonl(_)
                | LoopError::Locked(_)
        )
    }
}
