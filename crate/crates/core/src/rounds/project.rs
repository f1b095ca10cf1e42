use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::dataset::{
    expand_dataset, seed_dataset, unit_hash, Candidate, ExpandOptions, AUTHORED_PRIORITY,
};
use super::labels::{LabelEntry, LabelStatus, OracleKind};
use super::state::{
    Comparison, ComparisonRow, Envelope, Event, Nomination, Phase, ProjectConfig, ProjectState,
    RoundMode, RoundOptions, StoredBatch, RESUME, SCRATCH,
};
use super::LoopError;
use crate::augment::{flip_to_negative, flip_to_positive, CounterfactualPair, Direction, Split};
use crate::classifier::{
    select_checkpoints, Checkpoint, CheckpointTag, ClassifierBackend, Example, LabeledVector,
    TrainingSet,
};
use crate::corpus::{preprocess, Label, Pool, RecordId, TriageRecord};
use crate::embed::{embedder_from_spec, EmbeddingVector};
use crate::evaluate::{
    evaluate_on, pattern_predictions, render_table, ConfusionMatrix, EvaluationEntry, MetricReport,
    ReportRow,
};
use crate::jsonl;
use crate::sampler::{
    diversity_seed, mine_false_negatives, positive_predictions, uncertain_negatives, BatchContext,
    Predictions, QueryBatch, QuotaPlan, Strategy,
};
use crate::topics::{cluster, english_stopwords, reduce_topics, summarize, TopicError, TopicModel};

const EVENTS_FILE: &str = "events.jsonl";
const SNAPSHOT_DIR: &str = "snapshots";
const DEPLOYMENT_SALT: u64 = 0xde91_0e0d;

/// Source of event timestamps. `Logical` stamps event `n` at
/// `start + n * step_seconds`, so scripted runs are reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Clock {
    System,
    Logical {
        start: DateTime<Utc>,
        step_seconds: i64,
    },
}

impl Clock {
    pub fn logical() -> Self {
        Clock::Logical {
            start: DateTime::from_timestamp(1_700_000_000, 0).expect("valid timestamp"),
            step_seconds: 1,
        }
    }

    fn at(&self, seq: u64) -> DateTime<Utc> {
        match *self {
            Clock::System => Utc::now(),
            Clock::Logical {
                start,
                step_seconds,
            } => start + Duration::seconds(step_seconds * seq as i64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAck {
    pub event_seq: u64,
    pub status: LabelStatus,
    /// The same oracle already gave this label; nothing was recorded.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRequest {
    pub source_id: RecordId,
    pub direction: Direction,
    pub span: String,
    /// Token index for insertions.
    #[serde(default)]
    pub position: Option<usize>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub record: TriageRecord,
    pub batch_id: usize,
    pub strategy: Strategy,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_id: Option<String>,
    pub pattern_match: bool,
    pub topic_keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub record_id: RecordId,
    pub entry: LabelEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub round: Option<u32>,
    pub phase: Option<Phase>,
    pub dataset_version: Option<u32>,
    pub queue_remaining: usize,
    pub pending_conflicts: usize,
    pub evaluation_size: usize,
    pub events: u64,
}

/// Queue order across strategies: likely misses first.
fn strategy_rank(s: Strategy) -> u8 {
    match s {
        Strategy::FnMining => 0,
        Strategy::PositivePrediction => 1,
        Strategy::UncertainNegative => 2,
        Strategy::DiversitySeed => 3,
    }
}

/// A project: the folded state plus the log it came from.
pub struct Project {
    dir: Option<PathBuf>,
    state: ProjectState,
    clock: Clock,
    features: HashMap<RecordId, Vec<f64>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LoopError + '_ {
    move |source| LoopError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Project {
    pub fn in_memory(config: ProjectConfig, clock: Clock) -> Result<Self, LoopError> {
        let mut p = Project {
            dir: None,
            state: ProjectState::default(),
            clock,
            features: HashMap::new(),
        };
        p.commit(Event::ProjectInitialized { config })?;
        Ok(p)
    }

    /// New project in `dir`. Fails if `dir` already holds an event log.
    pub fn create(dir: &Path, config: ProjectConfig, clock: Clock) -> Result<Self, LoopError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log = dir.join(EVENTS_FILE);
        if log.exists() {
            return Err(LoopError::AlreadyInitialized);
        }
        let mut p = Project {
            dir: Some(dir.to_path_buf()),
            state: ProjectState::default(),
            clock,
            features: HashMap::new(),
        };
        p.commit(Event::ProjectInitialized { config })?;
        Ok(p)
    }

    /// Load the newest snapshot, if any, and fold the rest of the log.
    pub fn open(dir: &Path, clock: Clock) -> Result<Self, LoopError> {
        let events = Self::read_log(dir)?;
        let mut state = Self::latest_snapshot(dir)?
            .filter(|s| s.last_seq as usize <= events.len())
            .unwrap_or_default();
        for env in events.iter().skip(state.last_seq as usize) {
            state.apply(env)?;
        }
        Ok(Project {
            dir: Some(dir.to_path_buf()),
            state,
            clock,
            features: HashMap::new(),
        })
    }

    pub fn read_log(dir: &Path) -> Result<Vec<Envelope>, LoopError> {
        let path = dir.join(EVENTS_FILE);
        if !path.exists() {
            return Err(LoopError::NotInitialized);
        }
        Ok(jsonl::read(&path)?)
    }

    /// Fold `events` from an empty state.
    pub fn replay(events: &[Envelope]) -> Result<ProjectState, LoopError> {
        let mut state = ProjectState::default();
        for env in events {
            state.apply(env)?;
        }
        Ok(state)
    }

    fn latest_snapshot(dir: &Path) -> Result<Option<ProjectState>, LoopError> {
        let snap_dir = dir.join(SNAPSHOT_DIR);
        if !snap_dir.exists() {
            return Ok(None);
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&snap_dir)
            .map_err(io_err(&snap_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        let Some(path) = names.pop() else {
            return Ok(None);
        };
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let state = serde_json::from_str(&text).map_err(|source| LoopError::Json {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Some(state))
    }

    /// Write the folded state next to the log.
    pub fn snapshot(&self) -> Result<Option<PathBuf>, LoopError> {
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let snap_dir = dir.join(SNAPSHOT_DIR);
        fs::create_dir_all(&snap_dir).map_err(io_err(&snap_dir))?;
        let path = snap_dir.join(format!("state-{:08}.json", self.state.last_seq));
        let text = serde_json::to_string(&self.state).map_err(|source| LoopError::Json {
            path: path.display().to_string(),
            source,
        })?;
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(Some(path))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn state(&self) -> &ProjectState {
        &self.state
    }

    pub fn config(&self) -> &ProjectConfig {
        self.state
            .config
            .as_ref()
            .expect("projects are initialized on construction")
    }

    fn commit(&mut self, event: Event) -> Result<u64, LoopError> {
        let seq = self.state.last_seq + 1;
        let env = Envelope {
            seq,
            at: self.clock.at(seq),
            event,
        };
        self.state.apply(&env)?;
        if let Some(dir) = &self.dir {
            jsonl::append(&dir.join(EVENTS_FILE), &env)?;
        }
        Ok(seq)
    }

    /// Preprocess and add records. Returns how many were added.
    pub fn ingest(&mut self, records: Vec<TriageRecord>) -> Result<usize, LoopError> {
        let strip = self.config().strip_patterns.clone();
        let records = records
            .iter()
            .map(|r| preprocess(r, &strip))
            .collect::<Result<Vec<_>, _>>()?;
        let n = records.len();
        self.commit(Event::RecordsIngested { records })?;
        Ok(n)
    }

    fn ensure_features(&mut self, ids: &[&RecordId]) -> Result<(), LoopError> {
        let missing: Vec<&RecordId> = ids
            .iter()
            .copied()
            .filter(|id| !self.features.contains_key(*id))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let embedder = embedder_from_spec(&self.config().embedder)?;
        let texts: Vec<&str> = missing
            .iter()
            .map(|id| {
                self.state
                    .records
                    .get(*id)
                    .map(|r| r.clean_text.as_str())
                    .ok_or_else(|| LoopError::UnknownRecord((*id).clone()))
            })
            .collect::<Result<_, _>>()?;
        let vectors = embedder.embed_batch(&texts)?;
        for (id, v) in missing.into_iter().zip(vectors) {
            self.features.insert(id.clone(), v.values);
        }
        Ok(())
    }

    /// Embeddings of `ids`, in order.
    pub fn embeddings(
        &mut self,
        ids: &[RecordId],
    ) -> Result<Vec<(RecordId, EmbeddingVector)>, LoopError> {
        let refs: Vec<&RecordId> = ids.iter().collect();
        self.ensure_features(&refs)?;
        Ok(ids
            .iter()
            .map(|id| {
                let mut v = EmbeddingVector::zeros(0);
                v.values = self.features[id].clone();
                (id.clone(), v.normalized())
            })
            .collect())
    }

    /// Cluster the focused pool, optionally merge down to `reduce_to` topics,
    /// and attach keyword summaries. Nothing is recorded.
    pub fn build_topic_model(
        &mut self,
        k: usize,
        reduce_to: Option<usize>,
        seed: u64,
        top_n: usize,
    ) -> Result<TopicModel, LoopError> {
        let ids: Vec<RecordId> = self
            .state
            .records
            .values()
            .filter(|r| r.pool == Pool::Focused)
            .map(|r| r.id.clone())
            .collect();
        let points = self.embeddings(&ids)?;
        let mut model = match cluster(&points, k, seed) {
            Ok(m) => m,
            Err(TopicError::DegenerateInput { fallback }) => *fallback,
            Err(e) => return Err(e.into()),
        };
        if let Some(target) = reduce_to {
            if target < model.k {
                model = reduce_topics(&model, &points, target)?;
            }
        }
        let texts: BTreeMap<RecordId, String> = ids
            .iter()
            .map(|id| (id.clone(), self.state.records[id].clean_text.clone()))
            .collect();
        Ok(summarize(&model, &texts, top_n, &english_stopwords())?)
    }

    pub fn record_topic_model(&mut self, model: TopicModel) -> Result<u64, LoopError> {
        self.commit(Event::TopicModelRecorded { model })
    }

    fn batch_context(&self, round: u32) -> BatchContext {
        BatchContext {
            round,
            created_at: self.clock.at(self.state.last_seq + 1),
        }
    }

    /// Diversity sample for the seed set, recorded as a round-0 batch.
    pub fn sample_seed(&mut self, plan: &QuotaPlan) -> Result<usize, LoopError> {
        let model = self
            .state
            .topic_model
            .as_ref()
            .ok_or(LoopError::NoTopicModel)?;
        if model.flagged_topics().is_empty() {
            return Err(LoopError::NoTopicModel);
        }
        let batch = diversity_seed(model, plan, self.batch_context(0))?;
        self.record_batch(Pool::Focused, batch, BTreeMap::new())
    }

    fn record_batch(
        &mut self,
        pool: Pool,
        batch: QueryBatch,
        nominations: BTreeMap<RecordId, Nomination>,
    ) -> Result<usize, LoopError> {
        let id = self.state.batches.len();
        self.commit(Event::BatchCreated {
            batch: StoredBatch {
                id,
                pool,
                batch,
                nominations,
            },
        })?;
        Ok(id)
    }

    /// Store one oracle's label. Disagreement with another oracle is recorded
    /// and then reported as [`LoopError::ConflictPending`].
    pub fn submit_label(
        &mut self,
        record_id: &RecordId,
        label: Label,
        oracle_id: &str,
        oracle_kind: OracleKind,
    ) -> Result<LabelAck, LoopError> {
        if !self.state.records.contains_key(record_id) {
            return Err(LoopError::UnknownRecord(record_id.clone()));
        }
        if let Some(seq) = self.state.labels.duplicate_of(record_id, label, oracle_id) {
            return Ok(LabelAck {
                event_seq: seq,
                status: self.state.labels.entries[record_id].status,
                duplicate: true,
            });
        }
        let seq = self.commit(Event::LabelSubmitted {
            record_id: record_id.clone(),
            label,
            oracle_id: oracle_id.to_string(),
            oracle_kind,
        })?;
        let status = self.state.labels.entries[record_id].status;
        if status == LabelStatus::Pending {
            return Err(LoopError::ConflictPending {
                id: record_id.clone(),
                seq,
            });
        }
        Ok(LabelAck {
            event_seq: seq,
            status,
            duplicate: false,
        })
    }

    pub fn author_counterfactual(
        &mut self,
        req: &CounterfactualRequest,
    ) -> Result<CounterfactualPair, LoopError> {
        let source = self
            .state
            .records
            .get(&req.source_id)
            .ok_or_else(|| LoopError::UnknownRecord(req.source_id.clone()))?;
        if source.pool == Pool::Synthetic {
            return Err(LoopError::InvalidOption(format!(
                "{} is already synthetic",
                source.id
            )));
        }
        if self.state.evaluation.entries.contains_key(&source.id) {
            return Err(
                crate::evaluate::EvalError::LeakageDetected(vec![source.id.clone()]).into(),
            );
        }
        let round = self.state.current_round().map_or(0, |r| r.round);
        let ordinal = self.state.counterfactuals.next_ordinal(&source.id);
        let rules = &self.config().rules;
        let (record, mut pair) = match req.direction {
            Direction::ToNegative => flip_to_negative(source, &req.span, rules, round, ordinal)?,
            Direction::ToPositive => {
                let position = req.position.ok_or_else(|| {
                    LoopError::InvalidOption("an insertion needs a token position".into())
                })?;
                flip_to_positive(source, &req.span, position, rules, round, ordinal)?
            }
        };
        pair.split = req.split;
        self.commit(Event::CounterfactualCreated {
            record,
            pair: pair.clone(),
        })?;
        Ok(pair)
    }

    /// Dataset version 1 from the fully labeled seed batches.
    pub fn create_seed_dataset(&mut self, validation_share: f64) -> Result<u32, LoopError> {
        if !self.state.datasets.is_empty() {
            return Err(LoopError::InvalidOption(
                "the seed dataset already exists".into(),
            ));
        }
        let mut labeled = BTreeMap::new();
        let mut remaining = 0;
        for b in self.state.batches.iter().filter(|b| b.batch.round == 0) {
            for id in &b.batch.record_ids {
                match self.state.label_of(id) {
                    Some(l) => {
                        labeled.insert(id.clone(), l);
                    }
                    None => remaining += 1,
                }
            }
        }
        if remaining > 0 {
            return Err(LoopError::QueueIncomplete { remaining });
        }
        if labeled.is_empty() {
            return Err(LoopError::NoDataset);
        }
        let cfg = self.config();
        let dataset = seed_dataset(&labeled, validation_share, cfg.ratio_cap, cfg.seed)?;
        let v = dataset.version;
        self.commit(Event::DatasetVersionCreated { dataset })?;
        Ok(v)
    }

    pub fn start_round(
        &mut self,
        mode: RoundMode,
        options: RoundOptions,
    ) -> Result<u32, LoopError> {
        let dataset_version = self
            .state
            .latest_dataset()
            .ok_or(LoopError::NoDataset)?
            .version;
        if let Some(prev) = self.state.current_round() {
            if prev.phase != Phase::Complete {
                return Err(LoopError::PreviousIncomplete(prev.round));
            }
        } else if mode != RoundMode::FromScratch {
            return Err(LoopError::NoPreviousRound);
        }
        let round = self.state.rounds.len() as u32 + 1;
        self.commit(Event::RoundStarted {
            round,
            mode,
            dataset_version,
            options,
        })?;
        Ok(round)
    }

    /// Do the work of the current phase and move to the next one.
    pub fn advance(&mut self, backend: &dyn ClassifierBackend) -> Result<Phase, LoopError> {
        let r = self
            .state
            .current_round()
            .ok_or(LoopError::NoActiveRound)?
            .clone();
        match r.phase {
            Phase::Training => self.run_training(backend, r.round)?,
            Phase::CheckpointEval => self.run_selection(r.round)?,
            Phase::PoolPredict => self.run_pool_predictions(backend, r.round)?,
            Phase::QueueBuild => self.run_queue_build(r.round)?,
            Phase::Labeling => {
                let remaining = self.queue_remaining(r.round);
                if remaining > 0 {
                    return Err(LoopError::QueueIncomplete { remaining });
                }
            }
            Phase::Expand => self.run_expand(backend, r.round)?,
            Phase::Complete => return Err(LoopError::RoundComplete),
        }
        let to = r.phase.next().expect("complete handled above");
        self.commit(Event::PhaseAdvanced { round: r.round, to })?;
        Ok(to)
    }

    fn training_set(
        &mut self,
        version: u32,
    ) -> Result<(TrainingSet, BTreeMap<RecordId, String>), LoopError> {
        let ds = self
            .state
            .datasets
            .iter()
            .find(|d| d.version == version)
            .ok_or(LoopError::NoDataset)?
            .clone();
        let ids: Vec<&RecordId> = ds.ids().collect();
        self.ensure_features(&ids)?;
        let row = |id: &RecordId| -> Result<LabeledVector, LoopError> {
            Ok(LabeledVector {
                id: id.clone(),
                features: self.features[id].clone(),
                positive: self
                    .state
                    .label_of(id)
                    .ok_or_else(|| LoopError::Unlabeled(id.clone()))?,
            })
        };
        let set = TrainingSet {
            train: ds.train.iter().map(row).collect::<Result<_, _>>()?,
            validation: ds.validation.iter().map(row).collect::<Result<_, _>>()?,
        };
        let texts = ds
            .ids()
            .map(|id| (id.clone(), self.state.records[id].clean_text.clone()))
            .collect();
        Ok((set, texts))
    }

    fn run_training(
        &mut self,
        backend: &dyn ClassifierBackend,
        round: u32,
    ) -> Result<(), LoopError> {
        let r = self.state.current_round().expect("caller checked").clone();
        let (set, texts) = self.training_set(r.dataset_version)?;
        let config = r
            .options
            .train
            .clone()
            .unwrap_or_else(|| self.config().train.clone());
        let mut all = Vec::new();
        for lineage in r.mode.lineages() {
            let parent: Option<Checkpoint> = if *lineage == RESUME {
                let prev = self
                    .state
                    .rounds
                    .iter()
                    .rev()
                    .find_map(|p| p.report.as_ref())
                    .ok_or(LoopError::NoPreviousRound)?;
                Some(self.state.checkpoints[&prev.best_checkpoint].clone())
            } else {
                None
            };
            let tag = CheckpointTag {
                round,
                lineage: lineage.to_string(),
            };
            all.extend(backend.train(&set, &texts, &config, &tag, parent.as_ref())?);
        }
        self.commit(Event::CheckpointsRecorded {
            round,
            checkpoints: all,
        })?;
        Ok(())
    }

    fn run_selection(&mut self, round: u32) -> Result<(), LoopError> {
        let r = self.state.current_round().expect("caller checked");
        let top_k = self.config().top_k;
        let mut ids = Vec::new();
        for lineage in r.mode.lineages() {
            let cps: Vec<Checkpoint> = r
                .checkpoint_ids
                .iter()
                .map(|id| self.state.checkpoints[id].clone())
                .filter(|c| c.lineage == *lineage)
                .collect();
            ids.extend(select_checkpoints(&cps, top_k).into_iter().map(|c| c.id));
        }
        self.commit(Event::CheckpointsSelected { round, ids })?;
        Ok(())
    }

    /// Records from the focused and deployment pools that no oracle has
    /// touched yet.
    pub fn unlabeled_pool(&self) -> Vec<RecordId> {
        self.state
            .records
            .values()
            .filter(|r| r.pool != Pool::Synthetic && !self.state.labels.is_touched(&r.id))
            .map(|r| r.id.clone())
            .collect()
    }

    /// Probabilities from `checkpoint` for `ids`.
    pub fn predict(
        &mut self,
        backend: &dyn ClassifierBackend,
        checkpoint: &Checkpoint,
        ids: &[RecordId],
    ) -> Result<Predictions, LoopError> {
        let refs: Vec<&RecordId> = ids.iter().collect();
        self.ensure_features(&refs)?;
        let examples: Vec<Example<'_>> = ids
            .iter()
            .map(|id| Example {
                id,
                text: &self.state.records[id].clean_text,
                features: &self.features[id],
            })
            .collect();
        Ok(backend.predict(checkpoint, &examples)?)
    }

    fn run_pool_predictions(
        &mut self,
        backend: &dyn ClassifierBackend,
        round: u32,
    ) -> Result<(), LoopError> {
        let selected = self
            .state
            .current_round()
            .expect("caller checked")
            .selected
            .clone();
        let pool = self.unlabeled_pool();
        for id in selected {
            let cp = self.state.checkpoints[&id].clone();
            let predictions = self.predict(backend, &cp, &pool)?;
            self.commit(Event::PredictionsRecorded {
                round,
                checkpoint_id: id,
                predictions,
            })?;
        }
        Ok(())
    }

    fn run_queue_build(&mut self, round: u32) -> Result<(), LoopError> {
        let r = self.state.current_round().expect("caller checked").clone();
        let cfg = self.config().clone();
        let ctx = self.batch_context(round);
        let mut seen: BTreeSet<RecordId> = BTreeSet::new();
        let mut pending = Vec::new();
        for pool in [Pool::Focused, Pool::Deployment] {
            let texts: BTreeMap<RecordId, String> = self
                .state
                .records
                .values()
                .filter(|rec| rec.pool == pool)
                .map(|rec| (rec.id.clone(), rec.clean_text.clone()))
                .collect();
            for strategy in [
                Strategy::FnMining,
                Strategy::PositivePrediction,
                Strategy::UncertainNegative,
            ] {
                let mut nominations: BTreeMap<RecordId, Nomination> = BTreeMap::new();
                for cp in &r.selected {
                    let preds: Predictions = self.state.predictions[cp]
                        .iter()
                        .filter(|(id, _)| texts.contains_key(*id))
                        .map(|(id, p)| (id.clone(), *p))
                        .collect();
                    let batch = match strategy {
                        Strategy::FnMining => mine_false_negatives(
                            &preds,
                            &texts,
                            &cfg.rules,
                            cfg.uncertainty_threshold,
                            ctx,
                        ),
                        Strategy::PositivePrediction => positive_predictions(&preds, ctx),
                        _ => uncertain_negatives(&preds, cfg.uncertainty_threshold, ctx),
                    };
                    for id in batch.record_ids {
                        if !seen.contains(&id) && !nominations.contains_key(&id) {
                            let probability = preds[&id];
                            nominations.insert(
                                id,
                                Nomination {
                                    checkpoint_id: cp.clone(),
                                    probability,
                                },
                            );
                        }
                    }
                }
                let mut ordered: Vec<(RecordId, f64)> = nominations
                    .iter()
                    .map(|(id, n)| (id.clone(), n.probability))
                    .collect();
                ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                if let Some(cap) = r.options.max_per_batch {
                    ordered.truncate(cap);
                }
                nominations.retain(|id, _| ordered.iter().any(|(o, _)| o == id));
                let ids: Vec<RecordId> = ordered.into_iter().map(|(id, _)| id).collect();
                seen.extend(ids.iter().cloned());
                if !ids.is_empty() {
                    pending.push((pool, QueryBatch::new(strategy, ids, ctx)?, nominations));
                }
            }
        }
        for (pool, batch, nominations) in pending {
            self.record_batch(pool, batch, nominations)?;
        }
        Ok(())
    }

    fn round_batches(&self, round: u32) -> impl Iterator<Item = &StoredBatch> {
        self.state
            .batches
            .iter()
            .filter(move |b| b.batch.round == round)
    }

    fn queue_remaining(&self, round: u32) -> usize {
        let ids: BTreeSet<&RecordId> = self
            .round_batches(round)
            .flat_map(|b| &b.batch.record_ids)
            .collect();
        ids.into_iter()
            .filter(|id| self.state.label_of(id).is_none())
            .count()
    }

    fn run_expand(&mut self, backend: &dyn ClassifierBackend, round: u32) -> Result<(), LoopError> {
        let r = self.state.current_round().expect("caller checked").clone();
        let cfg = self.config().clone();
        let current = self
            .state
            .latest_dataset()
            .ok_or(LoopError::NoDataset)?
            .clone();
        let mut candidates = Vec::new();
        let mut eval_additions = Vec::new();
        let mut seen = BTreeSet::new();
        for b in self.round_batches(round) {
            for id in &b.batch.record_ids {
                if !seen.insert(id.clone()) {
                    continue;
                }
                let positive = self
                    .state
                    .label_of(id)
                    .ok_or_else(|| LoopError::Unlabeled(id.clone()))?;
                let priority = b.nominations.get(id).map_or(0.0, |n| n.probability);
                let to_training = b.pool != Pool::Deployment
                    || unit_hash(id, cfg.seed ^ DEPLOYMENT_SALT) < r.options.deployment_train_share;
                if to_training {
                    candidates.push(Candidate {
                        id: id.clone(),
                        positive,
                        priority,
                        split: None,
                    });
                } else {
                    eval_additions.push((
                        id.clone(),
                        EvaluationEntry {
                            positive,
                            pool: b.pool,
                            round,
                        },
                    ));
                }
            }
        }
        let used = self.state.dataset_ids();
        for pair in &self.state.counterfactuals.pairs {
            if !used.contains(&pair.synthetic_id) {
                candidates.push(Candidate {
                    id: pair.synthetic_id.clone(),
                    positive: self.state.label_of(&pair.synthetic_id) == Some(true),
                    priority: AUTHORED_PRIORITY,
                    split: Some(pair.split),
                });
            }
        }
        let opts = ExpandOptions {
            ratio_cap: cfg.ratio_cap,
            validation_share: r.options.validation_share,
            seed: cfg.seed.wrapping_add(round as u64),
        };
        let dataset = expand_dataset(&current, &candidates, &opts, &self.state.synthetic_ids())?;
        self.commit(Event::DatasetVersionCreated { dataset })?;
        self.commit(Event::EvaluationExtended {
            round,
            additions: eval_additions,
        })?;

        let (best, predictions, confusion, metrics) =
            self.best_on_evaluation(backend, &r.selected, cfg.beta)?;
        self.commit(Event::ReportRecorded {
            round,
            best_checkpoint: best,
            predictions,
            confusion,
            metrics,
        })?;
        Ok(())
    }

    fn evaluation_ids(&self) -> Vec<RecordId> {
        self.state.evaluation.entries.keys().cloned().collect()
    }

    /// The checkpoint among `candidates` with the highest F1 on the current
    /// evaluation set; earlier candidates win ties.
    fn best_on_evaluation(
        &mut self,
        backend: &dyn ClassifierBackend,
        candidates: &[String],
        beta: f64,
    ) -> Result<(String, Predictions, ConfusionMatrix, MetricReport), LoopError> {
        let ids = self.evaluation_ids();
        let mut best: Option<(String, Predictions, ConfusionMatrix, MetricReport)> = None;
        for id in candidates {
            let cp = self.state.checkpoints[id].clone();
            let predictions = self.predict(backend, &cp, &ids)?;
            let (cm, m) = if ids.is_empty() {
                (
                    ConfusionMatrix::default(),
                    crate::evaluate::metrics(&ConfusionMatrix::default(), beta),
                )
            } else {
                evaluate_on(&self.state.evaluation, &predictions, beta)?
            };
            if best.as_ref().is_none_or(|b| m.f1 > b.3.f1) {
                best = Some((id.clone(), predictions, cm, m));
            }
        }
        best.ok_or_else(|| LoopError::Invariant("no checkpoint was selected".into()))
    }

    /// Score every completed round's best checkpoint, each lineage of
    /// two-lineage rounds, and the keyword baseline on the current
    /// evaluation set, and record the table.
    pub fn compare(
        &mut self,
        backend: &dyn ClassifierBackend,
        beta: f64,
    ) -> Result<Comparison, LoopError> {
        if self.state.evaluation.is_empty() {
            return Err(LoopError::InvalidOption(
                "the evaluation set is empty".into(),
            ));
        }
        let mut rows = Vec::new();
        let rounds: Vec<_> = self
            .state
            .rounds
            .iter()
            .filter(|r| r.report.is_some())
            .cloned()
            .collect();
        let ids = self.evaluation_ids();
        for r in &rounds {
            let report = r.report.as_ref().expect("filtered");
            let cp = self.state.checkpoints[&report.best_checkpoint].clone();
            let predictions = self.predict(backend, &cp, &ids)?;
            rows.push(self.comparison_row(
                format!("Round {}", r.round),
                Some(cp.id),
                predictions,
                beta,
            )?);
            if r.mode == RoundMode::Both {
                for lineage in [RESUME, SCRATCH] {
                    let of_lineage: Vec<String> = r
                        .selected
                        .iter()
                        .filter(|id| self.state.checkpoints[*id].lineage == lineage)
                        .cloned()
                        .collect();
                    let (best, predictions, _, _) =
                        self.best_on_evaluation(backend, &of_lineage, beta)?;
                    rows.push(self.comparison_row(
                        format!("Round {} {lineage}", r.round),
                        Some(best),
                        predictions,
                        beta,
                    )?);
                }
            }
        }
        let baseline = pattern_predictions(
            ids.iter().map(|id| &self.state.records[id]),
            &self.config().rules,
        );
        rows.push(self.comparison_row("Pattern Matching".into(), None, baseline, beta)?);
        let comparison = Comparison {
            beta,
            evaluation_size: ids.len(),
            rows,
        };
        self.commit(Event::ComparisonRecorded {
            comparison: comparison.clone(),
        })?;
        Ok(comparison)
    }

    fn comparison_row(
        &self,
        model: String,
        checkpoint_id: Option<String>,
        predictions: Predictions,
        beta: f64,
    ) -> Result<ComparisonRow, LoopError> {
        let (confusion, metrics) = evaluate_on(&self.state.evaluation, &predictions, beta)?;
        Ok(ComparisonRow {
            model,
            checkpoint_id,
            predictions,
            confusion,
            metrics,
        })
    }

    /// Outstanding queue items, strategy order first.
    pub fn queue(&self, strategy: Option<Strategy>) -> Vec<QueueItem> {
        let round = self.state.current_round().map_or(0, |r| r.round);
        let cfg = self.config();
        let mut batches: Vec<&StoredBatch> = self
            .round_batches(round)
            .filter(|b| strategy.is_none_or(|s| b.batch.strategy == s))
            .collect();
        batches.sort_by_key(|b| (strategy_rank(b.batch.strategy), b.id));
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for b in batches {
            for id in &b.batch.record_ids {
                if self.state.labels.is_touched(id) || !seen.insert(id) {
                    continue;
                }
                let record = self.state.records[id].clone();
                let nomination = b.nominations.get(id);
                let topic_keywords = self
                    .state
                    .topic_model
                    .as_ref()
                    .and_then(|m| {
                        m.assignment
                            .get(id)
                            .map(|t| m.keywords[*t].iter().map(|k| k.ngram.clone()).collect())
                    })
                    .unwrap_or_default();
                out.push(QueueItem {
                    pattern_match: cfg.rules.matches_text(&record.clean_text),
                    record,
                    batch_id: b.id,
                    strategy: b.batch.strategy,
                    round,
                    probability: nomination.map(|n| n.probability),
                    checkpoint_id: nomination.map(|n| n.checkpoint_id.clone()),
                    topic_keywords,
                });
            }
        }
        out
    }

    pub fn queue_next(&self, strategy: Option<Strategy>) -> Option<QueueItem> {
        self.queue(strategy).into_iter().next()
    }

    pub fn conflicts(&self) -> Vec<Conflict> {
        self.state
            .labels
            .pending()
            .map(|(id, e)| Conflict {
                record_id: id.clone(),
                entry: e.clone(),
            })
            .collect()
    }

    pub fn status(&self) -> Status {
        let current = self.state.current_round();
        let round = current.map_or(0, |r| r.round);
        Status {
            round: current.map(|r| r.round),
            phase: current.map(|r| r.phase),
            dataset_version: self.state.latest_dataset().map(|d| d.version),
            queue_remaining: self.queue_remaining(round),
            pending_conflicts: self.state.labels.pending().count(),
            evaluation_size: self.state.evaluation.len(),
            events: self.state.last_seq,
        }
    }

    /// A round's report metrics recomputed at `beta`.
    pub fn metrics(&self, round: u32, beta: f64) -> Option<ReportRow> {
        let report = self
            .state
            .rounds
            .iter()
            .find(|r| r.round == round)?
            .report
            .as_ref()?;
        let mut row = ReportRow::new(format!("Round {round}"), report.confusion, beta);
        row.metrics.auc = report.metrics.auc;
        Some(row)
    }

    /// The recorded comparison as a text table at `beta`.
    pub fn comparison_table(&self, beta: f64) -> Option<String> {
        let c = self.state.comparison.as_ref()?;
        let rows: Vec<ReportRow> = c
            .rows
            .iter()
            .map(|r| ReportRow::new(r.model.clone(), r.confusion, beta))
            .collect();
        Some(render_table(&rows))
    }
}
