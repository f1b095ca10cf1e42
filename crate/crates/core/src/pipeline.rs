//! Scripted end-to-end runs: synthetic corpus, topic model, seed sample and
//! a fixed number of rounds, with every label supplied by a
//! [`SimulatedOracle`].

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentError, Direction, Split};
use crate::classifier::{ClassifierBackend, NativeBackend};
use crate::corpus::{keyword_filter, preprocess, RecordId};
use crate::evaluate::{render_table, ReportRow};
use crate::rounds::{
    Clock, Comparison, CounterfactualRequest, LoopError, OracleKind, Project, ProjectConfig,
    ProjectState, RoundMode, RoundOptions, SimulatedOracle,
};
use crate::sampler::{interval_indices, QuotaPlan};
use crate::synth::{generate, Category, CorpusSpec, SyntheticCorpus, INSERT_SPANS};
use crate::topics::TopicModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopicSettings {
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce_to: Option<usize>,
    pub top_n: usize,
    /// Records per topic, spread along the centroid-distance ranking, shown to
    /// the oracle when flagging topics.
    pub probe_per_topic: usize,
    /// Positive share among probed records at which a topic is flagged.
    pub flag_threshold: f64,
    pub seed: u64,
}

impl Default for TopicSettings {
    fn default() -> Self {
        TopicSettings {
            k: 30,
            reduce_to: Some(20),
            top_n: 8,
            probe_per_topic: 15,
            flag_threshold: 0.2,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub id: String,
    pub noise: f64,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            id: "sim-1".into(),
            noise: 0.0,
            seed: 5,
        }
    }
}

/// Counterfactuals authored while a round's queue is being labeled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPlan {
    /// Positives in the training set stripped of their vaccine-reaction span.
    #[serde(default)]
    pub to_negative: usize,
    /// Keyword-free negatives given an inserted vaccine-reaction span.
    #[serde(default)]
    pub to_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub mode: RoundMode,
    #[serde(default)]
    pub options: RoundOptions,
    #[serde(default)]
    pub counterfactuals: CounterfactualPlan,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: CorpusSpec,
    pub project: ProjectConfig,
    pub topics: TopicSettings,
    pub seed_plan: QuotaPlan,
    pub seed_validation_share: f64,
    /// Keep only focused-pool records the keyword rules retain.
    #[serde(default = "yes")]
    pub filter_focused: bool,
    pub oracle: OracleSettings,
    pub rounds: Vec<RoundPlan>,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    /// The four-round desk-scale run on the default synthetic corpus.
    pub fn desk_scale() -> Self {
        let mut project = ProjectConfig::default();
        project.train.epochs = 30;
        project.train.learning_rate = 0.5;
        project.seed = 3;
        let round = |mode, validation_share, cf: CounterfactualPlan| RoundPlan {
            mode,
            options: RoundOptions {
                validation_share,
                deployment_train_share: 0.5,
                max_per_batch: Some(120),
                train: None,
            },
            counterfactuals: cf,
        };
        PipelineConfig {
            corpus: CorpusSpec::default(),
            project,
            topics: TopicSettings::default(),
            seed_plan: QuotaPlan::new(250, 0.6, 3),
            seed_validation_share: 0.2,
            filter_focused: true,
            oracle: OracleSettings::default(),
            rounds: vec![
                round(
                    RoundMode::FromScratch,
                    0.0,
                    CounterfactualPlan {
                        to_negative: 30,
                        to_positive: 20,
                    },
                ),
                round(
                    RoundMode::FromScratch,
                    0.1,
                    CounterfactualPlan {
                        to_negative: 0,
                        to_positive: 20,
                    },
                ),
                round(
                    RoundMode::FromScratch,
                    0.1,
                    CounterfactualPlan {
                        to_negative: 0,
                        to_positive: 20,
                    },
                ),
                round(
                    RoundMode::Both,
                    0.0,
                    CounterfactualPlan {
                        to_negative: 0,
                        to_positive: 20,
                    },
                ),
            ],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("the oracle key has no entry for {0}")]
    MissingTruth(RecordId),
}

impl PipelineError {
    pub fn is_invariant(&self) -> bool {
        matches!(self, PipelineError::Loop(e) if e.is_invariant())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub dataset_version: u32,
    pub train_positive: usize,
    pub train_negative: usize,
    pub validation_positive: usize,
    pub validation_negative: usize,
    pub train_synthetic_percent: u32,
    pub labeled_this_round: usize,
    pub evaluation_size: usize,
    pub best_checkpoint: String,
    pub row: ReportRow,
}

pub struct PipelineOutcome {
    pub project: Project,
    pub rounds: Vec<RoundSummary>,
    pub comparison: Comparison,
    pub elapsed: Duration,
}

impl PipelineOutcome {
    pub fn state(&self) -> &ProjectState {
        self.project.state()
    }

    /// The comparison at the configured beta, in table form.
    pub fn table(&self) -> String {
        let rows: Vec<ReportRow> = self
            .comparison
            .rows
            .iter()
            .map(|r| ReportRow::new(r.model.clone(), r.confusion, self.comparison.beta))
            .collect();
        render_table(&rows)
    }
}

/// Evaluation set disjoint from every dataset version, every version within
/// the ratio cap with consistent counts, and training sets strictly growing.
pub fn check_invariants(state: &ProjectState) -> Result<(), LoopError> {
    let cfg = state.config()?;
    let synthetic = state.synthetic_ids();
    for ds in &state.datasets {
        state.evaluation.assert_disjoint(ds.ids())?;
        ds.check(|id| state.label_of(id), &synthetic, cfg.ratio_cap)?;
    }
    for pair in state.datasets.windows(2) {
        if pair[1].train.len() <= pair[0].train.len() {
            return Err(LoopError::Invariant(format!(
                "training set did not grow from v{} to v{}",
                pair[0].version, pair[1].version
            )));
        }
    }
    Ok(())
}

/// Oracle labels for up to `per_topic` members of each topic, spread over
/// the distance ranking. The oracle's truth stands in for a reviewer reading
/// a sample of notes from each topic.
pub fn oracle_probe(
    model: &TopicModel,
    oracle: &SimulatedOracle,
    per_topic: usize,
) -> Result<BTreeMap<RecordId, bool>, PipelineError> {
    let mut probe = BTreeMap::new();
    for t in 0..model.k {
        let members = model.members_by_distance(t);
        for i in interval_indices(members.len(), per_topic.min(members.len())) {
            let id = members[i].clone();
            let truth = oracle
                .truth(&id)
                .ok_or_else(|| PipelineError::MissingTruth(id.clone()))?;
            probe.insert(id, truth);
        }
    }
    Ok(probe)
}

struct Driver<'a> {
    project: Project,
    oracle: SimulatedOracle,
    corpus: &'a SyntheticCorpus,
}

impl Driver<'_> {
    fn label(&mut self, id: &RecordId) -> Result<(), PipelineError> {
        let label = self
            .oracle
            .label(id)
            .ok_or_else(|| PipelineError::MissingTruth(id.clone()))?;
        let oracle_id = self.oracle.id.clone();
        self.project
            .submit_label(id, label, &oracle_id, OracleKind::Simulated)?;
        Ok(())
    }

    fn label_queue(&mut self) -> Result<usize, PipelineError> {
        let items = self.project.queue(None);
        for item in &items {
            self.label(&item.record.id)?;
        }
        Ok(items.len())
    }

    fn flag_topics(&mut self, settings: &TopicSettings) -> Result<(), PipelineError> {
        let model = self.project.build_topic_model(
            settings.k,
            settings.reduce_to,
            settings.seed,
            settings.top_n,
        )?;
        let probe = oracle_probe(&model, &self.oracle, settings.probe_per_topic)?;
        let model = crate::topics::flag_target_topics(&model, &probe, settings.flag_threshold)
            .map_err(LoopError::from)?;
        self.project.record_topic_model(model)?;
        Ok(())
    }

    fn author(&mut self, plan: &CounterfactualPlan, round: u32) -> Result<(), PipelineError> {
        let state = self.project.state();
        let train: Vec<RecordId> = state
            .latest_dataset()
            .map(|d| d.train.iter().cloned().collect())
            .unwrap_or_default();
        let used_sources: std::collections::BTreeSet<RecordId> = state
            .counterfactuals
            .pairs
            .iter()
            .map(|p| p.source_id.clone())
            .collect();
        let mut requests = Vec::new();
        if plan.to_negative > 0 {
            for id in &train {
                if requests.len() == plan.to_negative {
                    break;
                }
                if used_sources.contains(id) || state.label_of(id) != Some(true) {
                    continue;
                }
                if let Some(span) = self.oracle.signal_span(id) {
                    requests.push(CounterfactualRequest {
                        source_id: id.clone(),
                        direction: Direction::ToNegative,
                        span: span.to_string(),
                        position: None,
                        split: Split::Train,
                    });
                }
            }
        }
        if plan.to_positive > 0 {
            let plain = self
                .oracle
                .key()
                .categories
                .iter()
                .filter(|(id, c)| **c == Category::Plain && state.label_of(id) == Some(false))
                .filter(|(id, _)| {
                    !used_sources.contains(*id) && !state.evaluation.entries.contains_key(*id)
                })
                .map(|(id, _)| id.clone())
                .take(plan.to_positive);
            for (i, id) in plain.enumerate() {
                let tokens = state.records[&id].clean_text.split(' ').count();
                requests.push(CounterfactualRequest {
                    source_id: id,
                    direction: Direction::ToPositive,
                    span: INSERT_SPANS[(i + round as usize) % INSERT_SPANS.len()].to_string(),
                    position: Some(tokens),
                    split: Split::Train,
                });
            }
        }
        for req in requests {
            match self.project.author_counterfactual(&req) {
                Ok(_) => {}
                // Some spans cannot be cut cleanly; a reviewer would skip those notes.
                Err(LoopError::Augment(
                    AugmentError::EmptyResidual
                    | AugmentError::AmbiguousSpan(_)
                    | AugmentError::SpanLacksSignal(_),
                )) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

/// Run the whole script. With `dir` the project is persisted there;
/// otherwise it lives in memory.
pub fn run(
    config: &PipelineConfig,
    dir: Option<&Path>,
    backend: &dyn ClassifierBackend,
) -> Result<PipelineOutcome, PipelineError> {
    let started = Instant::now();
    let corpus = generate(&config.corpus)?;
    let project = match dir {
        Some(d) => Project::create(d, config.project.clone(), Clock::logical())?,
        None => Project::in_memory(config.project.clone(), Clock::logical())?,
    };
    let oracle = SimulatedOracle::new(
        config.oracle.id.clone(),
        corpus.key.clone(),
        config.oracle.noise,
        config.oracle.seed,
    );
    let mut d = Driver {
        project,
        oracle,
        corpus: &corpus,
    };
    let focused = if config.filter_focused {
        let cleaned = d
            .corpus
            .focused
            .iter()
            .map(|r| preprocess(r, &config.project.strip_patterns))
            .collect::<Result<Vec<_>, _>>()
            .map_err(LoopError::from)?;
        keyword_filter(cleaned, &config.project.rules).0
    } else {
        d.corpus.focused.clone()
    };
    d.project.ingest(focused)?;
    d.project.ingest(d.corpus.deployment.clone())?;
    d.flag_topics(&config.topics)?;

    let seed_batch = d.project.sample_seed(&config.seed_plan)?;
    let seed_ids = d.project.state().batches[seed_batch]
        .batch
        .record_ids
        .clone();
    for id in &seed_ids {
        d.label(id)?;
    }
    d.project
        .create_seed_dataset(config.seed_validation_share)?;
    check_invariants(d.project.state())?;

    let mut summaries = Vec::new();
    for plan in &config.rounds {
        let round = d.project.start_round(plan.mode, plan.options.clone())?;
        while d.project.state().current_round().map(|r| r.phase)
            != Some(crate::rounds::Phase::Labeling)
        {
            d.project.advance(backend)?;
        }
        let labeled = d.label_queue()?;
        d.author(&plan.counterfactuals, round)?;
        d.project.advance(backend)?;
        d.project.advance(backend)?;
        let summary = summarize_round(&d.project, round, labeled);
        tracing::info!(
            round,
            version = summary.dataset_version,
            train_pos = summary.train_positive,
            train_neg = summary.train_negative,
            labeled,
            evaluation = summary.evaluation_size,
            f1 = summary.row.metrics.f1,
            "round complete"
        );
        check_invariants(d.project.state())?;
        summaries.push(summary);
    }
    let comparison = d.project.compare(backend, config.project.beta)?;
    if let Some(dir) = dir {
        d.project.snapshot()?;
        write_reports(dir, &summaries, &comparison)?;
    }
    Ok(PipelineOutcome {
        project: d.project,
        rounds: summaries,
        comparison,
        elapsed: started.elapsed(),
    })
}

/// [`run`] with the in-process classifier.
pub fn run_native(
    config: &PipelineConfig,
    dir: Option<&Path>,
) -> Result<PipelineOutcome, PipelineError> {
    run(config, dir, &NativeBackend)
}

fn summarize_round(project: &Project, round: u32, labeled: usize) -> RoundSummary {
    let state = project.state();
    let r = state
        .rounds
        .iter()
        .find(|r| r.round == round)
        .expect("round exists");
    let report = r.report.as_ref().expect("completed rounds carry a report");
    let ds = state
        .latest_dataset()
        .expect("expansion produced a version");
    let mut row = ReportRow::new(
        format!("Round {round}"),
        report.confusion,
        report.metrics.beta,
    );
    row.metrics.auc = report.metrics.auc;
    RoundSummary {
        round,
        dataset_version: ds.version,
        train_positive: ds.train_counts.positive,
        train_negative: ds.train_counts.negative,
        validation_positive: ds.validation_counts.positive,
        validation_negative: ds.validation_counts.negative,
        train_synthetic_percent: crate::augment::whole_percent(ds.synthetic_fraction(Split::Train)),
        labeled_this_round: labeled,
        evaluation_size: state.evaluation.len(),
        best_checkpoint: report.best_checkpoint.clone(),
        row,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), LoopError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| LoopError::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|source| LoopError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `reports/round-NN.json` per round plus `reports/comparison.json` and a
/// text table.
pub fn write_reports(
    dir: &Path,
    rounds: &[RoundSummary],
    comparison: &Comparison,
) -> Result<(), LoopError> {
    let reports = dir.join("reports");
    std::fs::create_dir_all(&reports).map_err(|source| LoopError::Io {
        path: reports.display().to_string(),
        source,
    })?;
    for r in rounds {
        write_json(&reports.join(format!("round-{:02}.json", r.round)), r)?;
    }
    write_json(&reports.join("comparison.json"), comparison)?;
    let rows: Vec<ReportRow> = comparison
        .rows
        .iter()
        .map(|r| ReportRow::new(r.model.clone(), r.confusion, comparison.beta))
        .collect();
    let path = reports.join("comparison.txt");
    std::fs::write(&path, render_table(&rows)).map_err(|source| LoopError::Io {
        path: path.display().to_string(),
        source,
    })
}
