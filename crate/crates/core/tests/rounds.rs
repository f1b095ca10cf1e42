use std::collections::{BTreeMap, BTreeSet};

use al_core::augment::{Direction, Split};
use al_core::classifier::{NativeBackend, TrainConfig};
use al_core::corpus::{keyword_filter, preprocess};
use al_core::evaluate::EvalError;
use al_core::rounds::{
    expand_dataset, Candidate, Clock, CounterfactualRequest, Envelope, Event, ExpandOptions,
    LabelStatus, LabeledDataset, LoopError, OracleKind, Phase, Project, ProjectConfig, RoundMode,
    RoundOptions, SimulatedOracle,
};
use al_core::sampler::QuotaPlan;
use al_core::synth::{generate, CorpusSpec};
use al_core::{Label, Pool, RecordId};
use chrono::DateTime;
use proptest::prelude::*;

fn config() -> ProjectConfig {
    ProjectConfig {
        train: TrainConfig {
            epochs: 10,
            learning_rate: 0.5,
            ..TrainConfig::default()
        },
        ..ProjectConfig::default()
    }
}

fn options() -> RoundOptions {
    RoundOptions {
        max_per_batch: Some(40),
        deployment_train_share: 0.5,
        ..RoundOptions::default()
    }
}

/// A small project with a labeled seed dataset, ready for round 1.
fn seeded(project: &mut Project) -> SimulatedOracle {
    let corpus = generate(&CorpusSpec {
        n_focused: 500,
        n_deployment: 600,
        ..CorpusSpec::default()
    })
    .unwrap();
    let rules = project.config().rules.clone();
    let cleaned = corpus.focused.iter().map(|r| preprocess(r, &[]).unwrap());
    let (focused, _) = keyword_filter(cleaned, &rules);
    project.ingest(focused).unwrap();
    project.ingest(corpus.deployment.clone()).unwrap();
    let oracle = SimulatedOracle::new("sim", corpus.key.clone(), 0.0, 1);

    let mut model = project.build_topic_model(6, None, 3, 5).unwrap();
    for t in 0..model.k {
        let members = model.members(t);
        let pos = members
            .iter()
            .filter(|id| oracle.truth(id) == Some(true))
            .count();
        model.target_flag[t] = pos * 3 >= members.len();
    }
    if model.target_flag.iter().all(|f| *f) {
        model.target_flag[0] = false;
    }
    if !model.target_flag.iter().any(|f| *f) {
        model.target_flag[0] = true;
    }
    project.record_topic_model(model).unwrap();
    let batch = project.sample_seed(&QuotaPlan::new(90, 0.6, 1)).unwrap();
    for id in project.state().batches[batch].batch.record_ids.clone() {
        let label = oracle.label(&id).unwrap();
        project
            .submit_label(&id, label, "sim", OracleKind::Simulated)
            .unwrap();
    }
    project.create_seed_dataset(0.2).unwrap();
    oracle
}

fn advance_to(project: &mut Project, phase: Phase) -> Vec<Phase> {
    let mut seen = Vec::new();
    while project.state().current_round().unwrap().phase != phase {
        seen.push(project.advance(&NativeBackend).unwrap());
    }
    seen
}

fn label_queue(project: &mut Project, oracle: &SimulatedOracle) -> usize {
    let mut n = 0;
    while let Some(item) = project.queue_next(None) {
        let label = oracle.label(&item.record.id).unwrap();
        project
            .submit_label(&item.record.id, label, "sim", OracleKind::Simulated)
            .unwrap();
        n += 1;
    }
    n
}

fn complete_round(project: &mut Project, oracle: &SimulatedOracle, mode: RoundMode) -> u32 {
    let round = project.start_round(mode, options()).unwrap();
    advance_to(project, Phase::Labeling);
    label_queue(project, oracle);
    advance_to(project, Phase::Complete);
    round
}

#[test]
fn rounds_need_a_dataset_and_resume_needs_a_prior_round() {
    let mut project = Project::in_memory(config(), Clock::logical()).unwrap();
    assert!(matches!(
        project.start_round(RoundMode::FromScratch, options()),
        Err(LoopError::NoDataset)
    ));
    seeded(&mut project);
    for mode in [RoundMode::ResumeBest, RoundMode::Both] {
        assert!(matches!(
            project.start_round(mode, options()),
            Err(LoopError::NoPreviousRound)
        ));
    }
}

#[test]
fn phases_run_in_order_and_labeling_gates_expansion() {
    let mut project = Project::in_memory(config(), Clock::logical()).unwrap();
    let oracle = seeded(&mut project);
    let before = project.unlabeled_pool().len();
    project
        .start_round(RoundMode::FromScratch, options())
        .unwrap();
    assert_eq!(project.status().phase, Some(Phase::Training));

    let seen = advance_to(&mut project, Phase::Labeling);
    assert_eq!(
        seen,
        [
            Phase::CheckpointEval,
            Phase::PoolPredict,
            Phase::QueueBuild,
            Phase::Labeling
        ]
    );
    assert!(matches!(
        project.start_round(RoundMode::FromScratch, options()),
        Err(LoopError::PreviousIncomplete(1))
    ));

    let queued = project.queue(None).len();
    assert!(queued > 0);
    assert!(matches!(
        project.advance(&NativeBackend),
        Err(LoopError::QueueIncomplete { remaining }) if remaining == queued
    ));

    // Prediction maps: one per selected checkpoint, covering both pools,
    // never containing a labeled record.
    let r = project.state().current_round().unwrap().clone();
    assert_eq!(r.selected.len(), 2);
    let labeled: BTreeSet<RecordId> = project.state().labels.entries.keys().cloned().collect();
    for cp in &r.selected {
        let preds = &project.state().predictions[cp];
        assert_eq!(preds.len(), before);
        let pools: BTreeSet<Pool> = preds
            .keys()
            .map(|id| project.state().records[id].pool)
            .collect();
        assert_eq!(pools, [Pool::Focused, Pool::Deployment].into());
        assert!(preds.keys().all(|id| !labeled.contains(id)));
    }

    assert_eq!(label_queue(&mut project, &oracle), queued);
    assert_eq!(project.advance(&NativeBackend).unwrap(), Phase::Expand);
    assert_eq!(project.advance(&NativeBackend).unwrap(), Phase::Complete);
    assert!(matches!(
        project.advance(&NativeBackend),
        Err(LoopError::RoundComplete)
    ));

    let r = project.state().current_round().unwrap();
    assert_eq!(r.output_version, Some(2));
    assert!(r.report.is_some());
    assert_eq!(project.unlabeled_pool().len(), before - queued);
    let ds = project.state().latest_dataset().unwrap();
    assert_eq!(ds.parent_version, Some(1));
}

#[test]
fn both_mode_records_two_lineages() {
    let mut project = Project::in_memory(config(), Clock::logical()).unwrap();
    let oracle = seeded(&mut project);
    complete_round(&mut project, &oracle, RoundMode::FromScratch);
    let round = project.start_round(RoundMode::Both, options()).unwrap();
    advance_to(&mut project, Phase::CheckpointEval);
    let r = project.state().current_round().unwrap();
    let lineages: BTreeSet<&str> = r
        .checkpoint_ids
        .iter()
        .map(|id| project.state().checkpoints[id].lineage.as_str())
        .collect();
    assert_eq!(lineages, ["resume", "scratch"].into());
    let best_r1 = project.state().rounds[0]
        .report
        .as_ref()
        .unwrap()
        .best_checkpoint
        .clone();
    assert!(r
        .checkpoint_ids
        .iter()
        .map(|id| &project.state().checkpoints[id])
        .filter(|cp| cp.lineage == "resume")
        .all(|cp| cp.parent.as_deref() == Some(best_r1.as_str()) && cp.round == round));
}

#[test]
fn disagreement_waits_for_adjudication() {
    let mut project = Project::in_memory(config(), Clock::logical()).unwrap();
    seeded(&mut project);
    let id = project.unlabeled_pool()[0].clone();

    let first = project
        .submit_label(&id, Label::Positive, "ann", OracleKind::Human)
        .unwrap();
    assert_eq!(first.status, LabelStatus::Final(Label::Positive));
    let err = project
        .submit_label(&id, Label::Negative, "bob", OracleKind::Human)
        .unwrap_err();
    assert!(matches!(err, LoopError::ConflictPending { .. }));
    assert_eq!(project.conflicts().len(), 1);
    assert_eq!(project.status().pending_conflicts, 1);
    assert_eq!(project.state().label_of(&id), None);

    let settled = project
        .submit_label(&id, Label::Negative, "lead", OracleKind::Adjudicator)
        .unwrap();
    assert_eq!(settled.status, LabelStatus::Final(Label::Negative));
    assert!(project.conflicts().is_empty());
    assert_eq!(project.state().label_of(&id), Some(false));

    let agreed = project.unlabeled_pool()[0].clone();
    project
        .submit_label(&agreed, Label::Negative, "ann", OracleKind::Human)
        .unwrap();
    let ack = project
        .submit_label(&agreed, Label::Negative, "bob", OracleKind::Human)
        .unwrap();
    assert_eq!(ack.status, LabelStatus::Final(Label::Negative));
}

#[test]
fn repeated_label_is_acknowledged_once() {
    let mut project = Project::in_memory(config(), Clock::logical()).unwrap();
    seeded(&mut project);
    let id = project.unlabeled_pool()[0].clone();
    let a = project
        .submit_label(&id, Label::Positive, "ann", OracleKind::Human)
        .unwrap();
    let events = project.state().last_seq;
    let b = project
        .submit_label(&id, Label::Positive, "ann", OracleKind::Human)
        .unwrap();
    assert!(b.duplicate && !a.duplicate);
    assert_eq!(a.event_seq, b.event_seq);
    assert_eq!(project.state().last_seq, events);
    assert!(matches!(
        project.submit_label(
            &RecordId::new("nope"),
            Label::Positive,
            "ann",
            OracleKind::Human
        ),
        Err(LoopError::UnknownRecord(_))
    ));
}

#[test]
fn evaluation_records_cannot_leak_into_training() {
    let mut project = Project::in_memory(config(), Clock::logical()).unwrap();
    let oracle = seeded(&mut project);
    complete_round(&mut project, &oracle, RoundMode::FromScratch);
    let eval_id = project
        .state()
        .evaluation
        .entries
        .keys()
        .next()
        .expect("round 1 labels some deployment records for evaluation")
        .clone();

    // Through the command API.
    let err = project
        .author_counterfactual(&CounterfactualRequest {
            source_id: eval_id.clone(),
            direction: Direction::ToPositive,
            span: "after flu vaccine".into(),
            position: Some(0),
            split: Split::Train,
        })
        .unwrap_err();
    assert!(matches!(
        err,
        LoopError::Eval(EvalError::LeakageDetected(_))
    ));

    // Through a forged log entry.
    let mut forged: LabeledDataset = project.state().latest_dataset().unwrap().clone();
    forged.version += 1;
    forged.parent_version = Some(forged.version - 1);
    forged.train.insert(eval_id.clone());
    forged.train_counts.negative += 1;
    let mut state = project.state().clone();
    let before = state.clone();
    let env = Envelope {
        seq: state.last_seq + 1,
        at: DateTime::from_timestamp(1_800_000_000, 0).unwrap(),
        event: Event::DatasetVersionCreated { dataset: forged },
    };
    let err = state.apply(&env).unwrap_err();
    assert!(err.is_invariant(), "{err}");
    assert_eq!(state, before);
}

#[test]
fn the_log_replays_to_the_live_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut project = Project::create(dir.path(), config(), Clock::logical()).unwrap();
    let oracle = seeded(&mut project);
    complete_round(&mut project, &oracle, RoundMode::FromScratch);
    project
        .start_round(RoundMode::ResumeBest, options())
        .unwrap();
    advance_to(&mut project, Phase::QueueBuild);

    let live = project.state().clone();
    let replayed = Project::replay(&Project::read_log(dir.path()).unwrap()).unwrap();
    assert_eq!(replayed, live);
    assert_eq!(
        serde_json::to_value(&replayed).unwrap(),
        serde_json::to_value(&live).unwrap()
    );

    project.snapshot().unwrap();
    project.advance(&NativeBackend).unwrap();
    let reopened = Project::open(dir.path(), Clock::logical()).unwrap();
    assert_eq!(reopened.state(), project.state());

    assert!(matches!(
        Project::create(dir.path(), config(), Clock::logical()),
        Err(LoopError::AlreadyInitialized)
    ));
}

#[test]
fn logical_clock_runs_are_identical() {
    let run = || {
        let mut project = Project::in_memory(config(), Clock::logical()).unwrap();
        let oracle = seeded(&mut project);
        complete_round(&mut project, &oracle, RoundMode::FromScratch);
        project.state().clone()
    };
    assert_eq!(run(), run());
}

fn candidate(i: usize, positive: bool, priority: f64, validation: bool) -> Candidate {
    Candidate {
        id: RecordId(format!("c{i:04}")),
        positive,
        priority,
        split: Some(if validation {
            Split::Validation
        } else {
            Split::Train
        }),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn expansion_keeps_the_ratio_and_the_splits_apart(
        batches in prop::collection::vec(
            prop::collection::vec((any::<bool>(), 0.0f64..1.0, prop::bool::weighted(0.2)), 0..60),
            1..5,
        ),
        cap in 1.0f64..3.0,
    ) {
        let mut ds = LabeledDataset::default();
        let mut labels = BTreeMap::new();
        let mut next_id = 0;
        let mut first = true;
        for batch in batches {
            let mut cands: Vec<Candidate> = batch
                .into_iter()
                .map(|(pos, pr, val)| {
                    next_id += 1;
                    candidate(next_id, pos, pr, val)
                })
                .collect();
            if first {
                // Keep the first version reachable.
                next_id += 1;
                cands.push(candidate(next_id, true, 1.0, false));
                first = false;
            }
            for c in &cands {
                labels.insert(c.id.clone(), c.positive);
            }
            let offered_neg: BTreeSet<RecordId> = cands
                .iter()
                .filter(|c| !c.positive && c.split == Some(Split::Train))
                .map(|c| c.id.clone())
                .chain(ds.holdover.iter().map(|h| h.id.clone()))
                .collect();
            let opts = ExpandOptions { ratio_cap: cap, ..ExpandOptions::default() };
            let next = expand_dataset(&ds, &cands, &opts, &BTreeSet::new()).unwrap();

            prop_assert_eq!(next.version, ds.version + 1);
            prop_assert!(next.train.is_disjoint(&next.validation));
            prop_assert!(next.train_counts.negative as f64 <= cap * next.train_counts.positive as f64);
            prop_assert!(ds.train.is_subset(&next.train));
            let held: BTreeSet<RecordId> = next.holdover.iter().map(|h| h.id.clone()).collect();
            let admitted: BTreeSet<RecordId> =
                offered_neg.iter().filter(|id| next.train.contains(*id)).cloned().collect();
            prop_assert!(held.is_disjoint(&admitted));
            prop_assert_eq!(held.len() + admitted.len(), offered_neg.len());
            next.check(|id| labels.get(id).copied(), &BTreeSet::new(), cap).unwrap();
            ds = next;
        }
    }
}
