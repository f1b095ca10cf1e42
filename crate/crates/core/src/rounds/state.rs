use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, DEFAULT_RATIO_CAP};
use super::labels::{LabelBook, LabelStatus, OracleKind, Vote};
use super::LoopError;
use crate::augment::{CounterfactualLedger, CounterfactualPair};
use crate::classifier::{Checkpoint, TrainConfig};
use crate::corpus::{FilterRuleSet, Label, LabelSource, Pool, RecordId, TriageRecord};
use crate::embed::EmbedderSpec;
use crate::evaluate::{
    evaluate_on, metrics, ConfusionMatrix, EvaluationEntry, EvaluationSet, MetricReport,
    DEFAULT_BETA,
};
use crate::sampler::{Predictions, QueryBatch};
use crate::topics::TopicModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub rules: FilterRuleSet,
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub strip_patterns: Vec<String>,
    pub train: TrainConfig,
    pub ratio_cap: f64,
    /// Negative-class confidence below which a negative counts as uncertain.
    pub uncertainty_threshold: f64,
    /// Checkpoints kept per lineage after validation ranking.
    pub top_k: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            rules: FilterRuleSet::starter(),
            embedder: EmbedderSpec::default(),
            strip_patterns: Vec::new(),
            train: TrainConfig::default(),
            ratio_cap: DEFAULT_RATIO_CAP,
            uncertainty_threshold: 0.9,
            top_k: 2,
            beta: DEFAULT_BETA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundMode {
    FromScratch,
    ResumeBest,
    /// Train both lineages side by side.
    Both,
}

impl RoundMode {
    pub fn lineages(self) -> &'static [&'static str] {
        match self {
            RoundMode::FromScratch => &[SCRATCH],
            RoundMode::ResumeBest => &[RESUME],
            RoundMode::Both => &[SCRATCH, RESUME],
        }
    }
}

pub const SCRATCH: &str = "scratch";
pub const RESUME: &str = "resume";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    CheckpointEval,
    PoolPredict,
    QueueBuild,
    Labeling,
    Expand,
    Complete,
}

impl Phase {
    pub fn next(self) -> Option<Phase> {
        use Phase::*;
        match self {
            Training => Some(CheckpointEval),
            CheckpointEval => Some(PoolPredict),
            PoolPredict => Some(QueueBuild),
            QueueBuild => Some(Labeling),
            Labeling => Some(Expand),
            Expand => Some(Complete),
            Complete => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundOptions {
    /// Share of newly labeled training candidates sent to validation.
    pub validation_share: f64,
    /// Share of labeled deployment records sent to training instead of the
    /// evaluation set.
    pub deployment_train_share: f64,
    /// Cap on each query batch, most probable records first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_per_batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl Default for RoundOptions {
    fn default() -> Self {
        RoundOptions {
            validation_share: 0.0,
            deployment_train_share: 0.0,
            max_per_batch: None,
            train: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub best_checkpoint: String,
    pub evaluation_size: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: u32,
    pub mode: RoundMode,
    pub phase: Phase,
    pub dataset_version: u32,
    pub options: RoundOptions,
    pub checkpoint_ids: Vec<String>,
    pub selected: Vec<String>,
    pub batch_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RoundReport>,
}

/// Checkpoint that put a record in a batch and its probability there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nomination {
    pub checkpoint_id: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBatch {
    pub id: usize,
    pub pool: Pool,
    pub batch: QueryBatch,
    #[serde(default)]
    pub nominations: BTreeMap<RecordId, Nomination>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_id: Option<String>,
    pub predictions: Predictions,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub beta: f64,
    pub evaluation_size: usize,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Event {
    ProjectInitialized {
        config: ProjectConfig,
    },
    RecordsIngested {
        records: Vec<TriageRecord>,
    },
    TopicModelRecorded {
        model: TopicModel,
    },
    BatchCreated {
        batch: StoredBatch,
    },
    LabelSubmitted {
        record_id: RecordId,
        label: Label,
        oracle_id: String,
        oracle_kind: OracleKind,
    },
    CounterfactualCreated {
        record: TriageRecord,
        pair: CounterfactualPair,
    },
    DatasetVersionCreated {
        dataset: LabeledDataset,
    },
    RoundStarted {
        round: u32,
        mode: RoundMode,
        dataset_version: u32,
        options: RoundOptions,
    },
    CheckpointsRecorded {
        round: u32,
        checkpoints: Vec<Checkpoint>,
    },
    CheckpointsSelected {
        round: u32,
        ids: Vec<String>,
    },
    PredictionsRecorded {
        round: u32,
        checkpoint_id: String,
        predictions: Predictions,
    },
    EvaluationExtended {
        round: u32,
        additions: Vec<(RecordId, EvaluationEntry)>,
    },
    ReportRecorded {
        round: u32,
        best_checkpoint: String,
        /// Predictions of the best checkpoint on the evaluation set.
        predictions: Predictions,
        confusion: ConfusionMatrix,
        metrics: MetricReport,
    },
    PhaseAdvanced {
        round: u32,
        to: Phase,
    },
    ComparisonRecorded {
        comparison: Comparison,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub event: Event,
}

/// Everything derivable from the event log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub config: Option<ProjectConfig>,
    pub records: BTreeMap<RecordId, TriageRecord>,
    pub topic_model: Option<TopicModel>,
    pub labels: LabelBook,
    pub counterfactuals: CounterfactualLedger,
    pub datasets: Vec<LabeledDataset>,
    pub evaluation: EvaluationSet,
    pub rounds: Vec<RoundState>,
    pub checkpoints: BTreeMap<String, Checkpoint>,
    pub predictions: BTreeMap<String, Predictions>,
    pub batches: Vec<StoredBatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    pub last_seq: u64,
}

impl ProjectState {
    pub fn config(&self) -> Result<&ProjectConfig, LoopError> {
        self.config.as_ref().ok_or(LoopError::NotInitialized)
    }

    pub fn current_round(&self) -> Option<&RoundState> {
        self.rounds.last()
    }

    pub fn latest_dataset(&self) -> Option<&LabeledDataset> {
        self.datasets.last()
    }

    pub fn label_of(&self, id: &RecordId) -> Option<bool> {
        match self.records.get(id)?.label {
            Label::Positive => Some(true),
            Label::Negative => Some(false),
            Label::Unlabeled => None,
        }
    }

    pub fn synthetic_ids(&self) -> BTreeSet<RecordId> {
        self.counterfactuals.synthetic_ids()
    }

    /// Union of every dataset version's ids.
    pub fn dataset_ids(&self) -> BTreeSet<RecordId> {
        self.datasets
            .iter()
            .flat_map(|d| d.ids().cloned())
            .collect()
    }

    pub fn round_mut(&mut self, round: u32) -> Result<&mut RoundState, LoopError> {
        self.rounds
            .iter_mut()
            .find(|r| r.round == round)
            .ok_or(LoopError::UnknownRound(round))
    }

    fn round_in_phase(&mut self, round: u32, phase: Phase) -> Result<&mut RoundState, LoopError> {
        let r = self.round_mut(round)?;
        if r.phase != phase {
            return Err(LoopError::WrongPhase {
                expected: phase,
                found: r.phase,
            });
        }
        Ok(r)
    }

    /// Fold one event into the state. Every check runs before any mutation,
    /// so a rejected event leaves the state untouched.
    pub fn apply(&mut self, env: &Envelope) -> Result<(), LoopError> {
        if env.seq != self.last_seq + 1 {
            return Err(LoopError::Invariant(format!(
                "event seq {} follows {}",
                env.seq, self.last_seq
            )));
        }
        if self.config.is_none() && !matches!(env.event, Event::ProjectInitialized { .. }) {
            return Err(LoopError::NotInitialized);
        }
        match &env.event {
            Event::ProjectInitialized { config } => {
                if self.config.is_some() {
                    return Err(LoopError::AlreadyInitialized);
                }
                self.config = Some(config.clone());
            }
            Event::RecordsIngested { records } => {
                let mut seen = BTreeSet::new();
                for r in records {
                    r.validate()?;
                    if self.records.contains_key(&r.id) || !seen.insert(&r.id) {
                        return Err(LoopError::DuplicateRecord(r.id.clone()));
                    }
                }
                for r in records {
                    self.records.insert(r.id.clone(), r.clone());
                }
            }
            Event::TopicModelRecorded { model } => {
                if let Some(id) = model
                    .assignment
                    .keys()
                    .find(|id| !self.records.contains_key(*id))
                {
                    return Err(LoopError::UnknownRecord(id.clone()));
                }
                self.topic_model = Some(model.clone());
            }
            Event::BatchCreated { batch } => {
                if batch.id != self.batches.len() {
                    return Err(LoopError::Invariant(format!(
                        "batch id {} out of sequence",
                        batch.id
                    )));
                }
                if let Some(id) = batch
                    .batch
                    .record_ids
                    .iter()
                    .find(|id| !self.records.contains_key(*id))
                {
                    return Err(LoopError::UnknownRecord(id.clone()));
                }
                let round = batch.batch.round;
                if round > 0 {
                    self.round_in_phase(round, Phase::QueueBuild)?
                        .batch_ids
                        .push(batch.id);
                }
                self.batches.push(batch.clone());
            }
            Event::LabelSubmitted {
                record_id,
                label,
                oracle_id,
                oracle_kind,
            } => {
                if *label == Label::Unlabeled {
                    return Err(LoopError::InvalidOption(
                        "a submitted label must be positive or negative".into(),
                    ));
                }
                let record = self
                    .records
                    .get(record_id)
                    .ok_or_else(|| LoopError::UnknownRecord(record_id.clone()))?;
                if record.pool == Pool::Synthetic {
                    return Err(LoopError::InvalidOption(format!(
                        "{record_id} is synthetic"
                    )));
                }
                let status = self.labels.record(
                    record_id.clone(),
                    Vote {
                        oracle_id: oracle_id.clone(),
                        kind: *oracle_kind,
                        label: *label,
                        seq: env.seq,
                    },
                );
                let deciding = self.labels.entries[record_id].deciding_kind();
                let record = self.records.get_mut(record_id).expect("checked above");
                match status {
                    LabelStatus::Final(l) => {
                        record.label = l;
                        record.label_source =
                            deciding.map_or(LabelSource::Human, OracleKind::source);
                    }
                    LabelStatus::Pending => {
                        record.label = Label::Unlabeled;
                        record.label_source = LabelSource::None;
                    }
                }
            }
            Event::CounterfactualCreated { record, pair } => {
                record.validate()?;
                if self.records.contains_key(&record.id) {
                    return Err(LoopError::DuplicateRecord(record.id.clone()));
                }
                let source = self
                    .records
                    .get(&pair.source_id)
                    .ok_or_else(|| LoopError::UnknownRecord(pair.source_id.clone()))?;
                if pair.synthetic_id != record.id
                    || pair.invert(&record.clean_text).as_deref()
                        != Some(source.clean_text.as_str())
                    || record.label != source.label.flipped()
                    || record.label == Label::Unlabeled
                {
                    return Err(LoopError::Invariant(format!(
                        "counterfactual {} does not invert to its source",
                        record.id
                    )));
                }
                self.counterfactuals.register(pair.clone())?;
                self.records.insert(record.id.clone(), record.clone());
            }
            Event::DatasetVersionCreated { dataset } => {
                let expected = self.datasets.last().map_or(1, |d| d.version + 1);
                if dataset.version != expected
                    || dataset.parent_version != self.datasets.last().map(|d| d.version)
                {
                    return Err(LoopError::Invariant(format!(
                        "dataset v{} breaks the version chain",
                        dataset.version
                    )));
                }
                let ratio_cap = self.config()?.ratio_cap;
                let synthetic = self.synthetic_ids();
                dataset.check(|id| self.label_of(id), &synthetic, ratio_cap)?;
                if let Some(prev) = self.datasets.last() {
                    if !prev.train.is_subset(&dataset.train)
                        || !prev.validation.is_subset(&dataset.validation)
                    {
                        return Err(LoopError::Invariant(format!(
                            "dataset v{} drops records",
                            dataset.version
                        )));
                    }
                }
                self.evaluation.assert_disjoint(dataset.ids())?;
                if let Some(r) = self.rounds.last() {
                    if r.phase != Phase::Expand {
                        return Err(LoopError::WrongPhase {
                            expected: Phase::Expand,
                            found: r.phase,
                        });
                    }
                }
                if let Some(r) = self.rounds.last_mut() {
                    r.output_version = Some(dataset.version);
                }
                self.datasets.push(dataset.clone());
            }
            Event::RoundStarted {
                round,
                mode,
                dataset_version,
                options,
            } => {
                if *round as usize != self.rounds.len() + 1 {
                    return Err(LoopError::Invariant(format!(
                        "round {round} out of sequence"
                    )));
                }
                if let Some(prev) = self.rounds.last() {
                    if prev.phase != Phase::Complete {
                        return Err(LoopError::PreviousIncomplete(prev.round));
                    }
                }
                if self.datasets.last().map(|d| d.version) != Some(*dataset_version) {
                    return Err(LoopError::NoDataset);
                }
                if *mode != RoundMode::FromScratch
                    && self.rounds.last().and_then(|r| r.report.as_ref()).is_none()
                {
                    return Err(LoopError::NoPreviousRound);
                }
                self.rounds.push(RoundState {
                    round: *round,
                    mode: *mode,
                    phase: Phase::Training,
                    dataset_version: *dataset_version,
                    options: options.clone(),
                    checkpoint_ids: Vec::new(),
                    selected: Vec::new(),
                    batch_ids: Vec::new(),
                    output_version: None,
                    report: None,
                });
            }
            Event::CheckpointsRecorded { round, checkpoints } => {
                if let Some(c) = checkpoints
                    .iter()
                    .find(|c| self.checkpoints.contains_key(&c.id))
                {
                    return Err(LoopError::Invariant(format!(
                        "checkpoint {} recorded twice",
                        c.id
                    )));
                }
                let r = self.round_in_phase(*round, Phase::Training)?;
                r.checkpoint_ids
                    .extend(checkpoints.iter().map(|c| c.id.clone()));
                for c in checkpoints {
                    self.checkpoints.insert(c.id.clone(), c.clone());
                }
            }
            Event::CheckpointsSelected { round, ids } => {
                let r = self.round_in_phase(*round, Phase::CheckpointEval)?;
                if let Some(id) = ids.iter().find(|id| !r.checkpoint_ids.contains(id)) {
                    return Err(LoopError::UnknownCheckpoint(id.clone()));
                }
                r.selected = ids.clone();
            }
            Event::PredictionsRecorded {
                round,
                checkpoint_id,
                predictions,
            } => {
                if let Some(id) = predictions.keys().find(|id| self.labels.is_touched(id)) {
                    return Err(LoopError::Invariant(format!(
                        "labeled record {id} was predicted as unlabeled pool"
                    )));
                }
                let r = self.round_in_phase(*round, Phase::PoolPredict)?;
                if !r.selected.contains(checkpoint_id) {
                    return Err(LoopError::UnknownCheckpoint(checkpoint_id.clone()));
                }
                self.predictions
                    .insert(checkpoint_id.clone(), predictions.clone());
            }
            Event::EvaluationExtended { round, additions } => {
                self.round_in_phase(*round, Phase::Expand)?;
                for (id, entry) in additions {
                    if self.label_of(id) != Some(entry.positive) {
                        return Err(LoopError::Invariant(format!(
                            "evaluation label of {id} disagrees with its record"
                        )));
                    }
                }
                let used = self.dataset_ids();
                self.evaluation.extend(additions.iter().cloned(), &used)?;
            }
            Event::ReportRecorded {
                round,
                best_checkpoint,
                predictions,
                confusion,
                metrics: m,
            } => {
                let (cm, recomputed) = if self.evaluation.is_empty() {
                    (
                        ConfusionMatrix::default(),
                        metrics(&ConfusionMatrix::default(), m.beta),
                    )
                } else {
                    evaluate_on(&self.evaluation, predictions, m.beta)?
                };
                if cm != *confusion || recomputed != *m {
                    return Err(LoopError::Invariant(format!(
                        "report for round {round} does not match its predictions"
                    )));
                }
                let evaluation_size = self.evaluation.len();
                let r = self.round_in_phase(*round, Phase::Expand)?;
                if !r.selected.contains(best_checkpoint) {
                    return Err(LoopError::UnknownCheckpoint(best_checkpoint.clone()));
                }
                r.report = Some(RoundReport {
                    round: *round,
                    best_checkpoint: best_checkpoint.clone(),
                    evaluation_size,
                    confusion: *confusion,
                    metrics: *m,
                });
            }
            Event::PhaseAdvanced { round, to } => {
                let r = self.round_mut(*round)?;
                if r.phase.next() != Some(*to) {
                    return Err(LoopError::WrongPhase {
                        expected: r.phase.next().unwrap_or(Phase::Complete),
                        found: *to,
                    });
                }
                let ready = match *to {
                    Phase::CheckpointEval => !r.checkpoint_ids.is_empty(),
                    Phase::PoolPredict => !r.selected.is_empty(),
                    Phase::Complete => r.output_version.is_some() && r.report.is_some(),
                    _ => true,
                };
                if !ready {
                    return Err(LoopError::Invariant(format!(
                        "round {round} is not ready for {to:?}"
                    )));
                }
                r.phase = *to;
            }
            Event::ComparisonRecorded { comparison } => {
                for row in &comparison.rows {
                    let (cm, m) = evaluate_on(&self.evaluation, &row.predictions, comparison.beta)?;
                    if cm != row.confusion || m != row.metrics {
                        return Err(LoopError::Invariant(format!(
                            "comparison row {} does not match",
                            row.model
                        )));
                    }
                }
                self.comparison = Some(comparison.clone());
            }
        }
        self.last_seq = env.seq;
        Ok(())
    }
}
