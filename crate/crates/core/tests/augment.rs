use std::collections::BTreeMap;

use al_core::augment::{
    flip_to_negative, flip_to_positive, synthetic_fraction, whole_percent, AugmentError,
    CounterfactualLedger, Direction, EditKind,
};
use al_core::corpus::preprocess;
use al_core::synth::{generate, CorpusSpec, INSERT_SPANS};
use al_core::{FilterRuleSet, Label, LabelSource, Pool, RecordId, TriageRecord};
use proptest::prelude::*;

fn labeled(r: &TriageRecord, positive: bool) -> TriageRecord {
    let mut r = preprocess(r, &[]).unwrap();
    r.label = Label::from_bool(positive);
    r.label_source = LabelSource::Simulated;
    r
}

#[test]
fn two_hundred_synthetic_pairs_invert_exactly() {
    let rules = FilterRuleSet::starter();
    let corpus = generate(&CorpusSpec::default()).unwrap();
    let mut ledger = CounterfactualLedger::default();
    let mut records = BTreeMap::new();

    let positives = corpus
        .focused
        .iter()
        .filter(|r| corpus.key.truth[&r.id] && rules.matches_text(&r.raw_text.to_lowercase()));
    let mut made = 0;
    for src in positives {
        let source = labeled(src, true);
        let span = &corpus.key.signal_spans[&src.id];
        match flip_to_negative(&source, span, &rules, 1, ledger.next_ordinal(&source.id)) {
            Ok((syn, pair)) => {
                assert_eq!(pair.direction, Direction::ToNegative);
                assert_eq!(pair.edit_kind, EditKind::Removal);
                assert_eq!(syn.label, Label::Negative);
                assert_eq!(
                    pair.invert(&syn.clean_text).as_deref(),
                    Some(source.clean_text.as_str())
                );
                assert!(!syn.clean_text.contains("  "));
                ledger.register(pair).unwrap();
                records.insert(source.id.clone(), source);
                records.insert(syn.id.clone(), syn);
                made += 1;
            }
            Err(AugmentError::SpanLacksSignal { .. } | AugmentError::AmbiguousSpan { .. }) => {}
            Err(e) => panic!("{}: {e}", src.id),
        }
        if made == 100 {
            break;
        }
    }

    let negatives = corpus
        .focused
        .iter()
        .chain(&corpus.deployment)
        .filter(|r| !corpus.key.truth[&r.id])
        .take(100);
    for (i, src) in negatives.enumerate() {
        let source = labeled(src, false);
        let tokens = source.clean_text.split_whitespace().count();
        let span = INSERT_SPANS[i % INSERT_SPANS.len()];
        let (syn, pair) = flip_to_positive(&source, span, i % (tokens + 1), &rules, 2, 0).unwrap();
        assert_eq!(pair.edit_kind, EditKind::Insertion);
        assert_eq!(syn.label, Label::Positive);
        assert_eq!(syn.pool, Pool::Synthetic);
        assert_eq!(
            pair.invert(&syn.clean_text).as_deref(),
            Some(source.clean_text.as_str())
        );
        ledger.register(pair).unwrap();
        records.insert(source.id.clone(), source);
        records.insert(syn.id.clone(), syn);
        made += 1;
    }
    assert_eq!(made, 200);
    ledger.verify(&records).unwrap();
    assert_eq!(ledger.synthetic_ids().len(), 200);
}

#[test]
fn published_examples_reproduce() {
    let rules = FilterRuleSet::starter();
    let mut neg = TriageRecord::new(
        "a",
        "abdominal pain for 1/52 - onset 30 minutes post flu vaccine. 1 x vomit and 2 x loose stools",
        Pool::Focused,
    );
    neg.clean_text = neg.raw_text.clone();
    neg.label = Label::Positive;
    neg.label_source = LabelSource::Human;
    let (syn, _) = flip_to_negative(&neg, "post flu vaccine", &rules, 2, 0).unwrap();
    assert_eq!(
        syn.clean_text,
        "abdominal pain for 1/52 - onset 30 minutes. 1 x vomit and 2 x loose stools"
    );

    let mut pos = TriageRecord::new(
        "b",
        "flu sx for 1/52, today pain when coughing",
        Pool::Focused,
    );
    pos.clean_text = pos.raw_text.clone();
    pos.label = Label::Negative;
    pos.label_source = LabelSource::Human;
    let (syn, _) = flip_to_positive(&pos, "had flu vaccine 1/52.", 4, &rules, 3, 0).unwrap();
    assert_eq!(
        syn.clean_text,
        "flu sx for 1/52, had flu vaccine 1/52. today pain when coughing"
    );
}

#[test]
fn synthetic_shares_follow_the_published_table() {
    let ids = |n: usize| -> Vec<RecordId> { (0..n).map(|i| RecordId(format!("r{i}"))).collect() };
    let train = ids(1007);
    let synthetic = train.iter().take(100).cloned().collect();
    assert_eq!(whole_percent(synthetic_fraction(&train, &synthetic)), 9);

    let train = ids(1391);
    let synthetic = train.iter().take(183).cloned().collect();
    assert_eq!(whole_percent(synthetic_fraction(&train, &synthetic)), 13);

    assert_eq!(
        whole_percent(synthetic_fraction(&train, &Default::default())),
        0
    );
}

fn word() -> impl Strategy<Value = String> {
    "[a-z0-9/]{1,7}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn insertion_then_removal_round_trips(
        words in prop::collection::vec(word(), 1..15),
        pos_seed in 0usize..100,
        span_idx in 0usize..64,
    ) {
        let rules = FilterRuleSet::starter();
        let text = words.join(" ");
        prop_assume!(!rules.matches_text(&text));
        let mut src = TriageRecord::new("s", text.clone(), Pool::Focused);
        src.clean_text = text;
        src.label = Label::Negative;
        src.label_source = LabelSource::Human;
        let span = INSERT_SPANS[span_idx % INSERT_SPANS.len()];
        let position = pos_seed % (words.len() + 1);
        let (syn, pair) = flip_to_positive(&src, span, position, &rules, 1, 0).unwrap();
        prop_assert_ne!(syn.label, src.label);
        prop_assert_eq!(pair.invert(&syn.clean_text), Some(src.clean_text.clone()));

        // Removing the inserted span from the synthetic record flips it back.
        let mut back = syn.clone();
        back.pool = Pool::Focused;
        back.label_source = LabelSource::Human;
        if let Ok((again, _)) = flip_to_negative(&back, span, &rules, 1, 1) {
            prop_assert_eq!(again.clean_text, src.clean_text);
        }
    }
}
