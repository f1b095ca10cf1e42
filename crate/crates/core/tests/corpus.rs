use al_core::corpus::{keyword_filter, pattern_match, preprocess, read_records, write_records};
use al_core::synth::{generate, CorpusSpec};
use al_core::{FilterRuleSet, TriageRecord};

#[test]
fn pattern_match_agrees_with_the_filter_on_a_synthetic_corpus() {
    let rules = FilterRuleSet::starter();
    let corpus = generate(&CorpusSpec {
        n_focused: 100,
        n_deployment: 100,
        ..CorpusSpec::default()
    })
    .unwrap();
    let cleaned: Vec<TriageRecord> = corpus
        .focused
        .iter()
        .chain(&corpus.deployment)
        .map(|r| preprocess(r, &[]).unwrap())
        .collect();
    assert_eq!(cleaned.len(), 200);
    let by_match: Vec<_> = cleaned
        .iter()
        .filter(|r| pattern_match(r, &rules))
        .map(|r| r.id.clone())
        .collect();
    let (kept, rejected) = keyword_filter(cleaned.clone(), &rules);
    let kept: Vec<_> = kept.into_iter().map(|r| r.id).collect();
    assert_eq!(by_match, kept);
    assert_eq!(kept.len() + rejected.len(), 200);
    assert!(!kept.is_empty() && !rejected.is_empty());
}

#[test]
fn records_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let corpus = generate(&CorpusSpec {
        n_focused: 20,
        n_deployment: 20,
        ..CorpusSpec::default()
    })
    .unwrap();
    let records: Vec<TriageRecord> = corpus
        .focused
        .iter()
        .map(|r| preprocess(r, &["[redacted]".into()]).unwrap())
        .collect();
    write_records(&path, &records).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
}
