use std::collections::{BTreeMap, BTreeSet};

use al_core::corpus::{keyword_filter, preprocess};
use al_core::embed::{embed_batch, squared_euclidean, EmbedderSpec, EmbeddingVector, Norm};
use al_core::sampler::interval_indices;
use al_core::synth::{generate, CorpusSpec};
use al_core::topics::{
    cluster, english_stopwords, flag_target_topics, reduce_topics, summarize, TopicModel,
};
use al_core::{FilterRuleSet, RecordId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn vector(values: Vec<f64>) -> EmbeddingVector {
    EmbeddingVector {
        values,
        norm: Norm::Raw,
    }
}

fn assert_nearest_centroid(model: &TopicModel, points: &[(RecordId, EmbeddingVector)]) {
    for (id, v) in points {
        let own = squared_euclidean(&v.values, &model.centroids[model.assignment[id]]);
        for c in &model.centroids {
            assert!(own <= squared_euclidean(&v.values, c) + 1e-12, "{id}");
        }
        assert!((own.sqrt() - model.distances[id]).abs() < 1e-9);
    }
}

/// `n` points around each of the given centres; ids carry the planted group.
fn planted(centres: &[Vec<f64>], n: usize, sd: f64, seed: u64) -> Vec<(RecordId, EmbeddingVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).unwrap();
    let mut out = Vec::new();
    for (g, c) in centres.iter().enumerate() {
        for i in 0..n {
            let v = c.iter().map(|x| x + noise.sample(&mut rng)).collect();
            out.push((RecordId(format!("g{g}-{i:03}")), vector(v)));
        }
    }
    out
}

fn group_of(id: &RecordId) -> usize {
    id.0[1..2].parse().unwrap()
}

#[test]
fn planted_gaussians_are_recovered() {
    let centres = vec![
        vec![0.0, 0.0, 0.0],
        vec![4.0, 0.0, 0.0],
        vec![0.0, 4.0, 0.0],
        vec![0.0, 0.0, 4.0],
    ];
    let points = planted(&centres, 10, 0.6, 40);
    let model = cluster(&points, 4, 1).unwrap();
    assert_nearest_centroid(&model, &points);

    // Best permutation by majority vote per cluster.
    let mut votes = [[0usize; 4]; 4];
    for (id, _) in &points {
        votes[model.assignment[id]][group_of(id)] += 1;
    }
    let agree: usize = votes.iter().map(|v| *v.iter().max().unwrap()).sum();
    let majority: BTreeSet<usize> = votes
        .iter()
        .map(|v| (0..4).max_by_key(|g| v[*g]).unwrap())
        .collect();
    assert_eq!(majority.len(), 4, "clusters map one-to-one onto groups");
    assert!(agree as f64 >= 0.95 * 40.0, "{agree}/40");
}

#[test]
fn clustering_ignores_input_order() {
    let centres: Vec<Vec<f64>> = (0..5)
        .map(|i| vec![i as f64 * 3.0, (i % 2) as f64])
        .collect();
    let points = planted(&centres, 12, 0.8, 9);
    let mut shuffled = points.clone();
    shuffled.reverse();
    shuffled.rotate_left(17);
    let a = cluster(&points, 5, 3).unwrap();
    let b = cluster(&shuffled, 5, 3).unwrap();
    let canon = |m: &TopicModel| {
        let mut c: Vec<Vec<u64>> = m
            .centroids
            .iter()
            .map(|c| c.iter().map(|x| x.to_bits()).collect())
            .collect();
        c.sort();
        c
    };
    assert_eq!(canon(&a), canon(&b));
    for (id, _) in &points {
        assert_eq!(a.centroids[a.assignment[id]], b.centroids[b.assignment[id]]);
    }
}

#[test]
fn reducing_two_hundred_records_conserves_membership() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let centres: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..4).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let points = planted(&centres, 20, 1.0, 2);
    assert_eq!(points.len(), 200);
    let model = cluster(&points, 10, 4).unwrap();
    for target in [9, 6, 3, 1] {
        let reduced = reduce_topics(&model, &points, target).unwrap();
        assert_eq!(reduced.k, target);
        assert_eq!(reduced.member_counts().iter().sum::<usize>(), 200);
        assert_eq!(reduced.assignment.len(), 200);
        assert_nearest_centroid(&reduced, &points);
    }
}

fn synthetic_focused() -> (
    Vec<(RecordId, EmbeddingVector)>,
    BTreeMap<RecordId, bool>,
    BTreeMap<RecordId, String>,
) {
    let corpus = generate(&CorpusSpec::default()).unwrap();
    let cleaned = corpus.focused.iter().map(|r| preprocess(r, &[]).unwrap());
    let (kept, _) = keyword_filter(cleaned, &FilterRuleSet::starter());
    let texts: Vec<&str> = kept.iter().map(|r| r.clean_text.as_str()).collect();
    let vectors = embed_batch(&texts, &EmbedderSpec::default()).unwrap();
    let points = kept.iter().map(|r| r.id.clone()).zip(vectors).collect();
    let truth = kept
        .iter()
        .map(|r| (r.id.clone(), corpus.key.truth[&r.id]))
        .collect();
    let text_map = kept
        .iter()
        .map(|r| (r.id.clone(), r.clean_text.clone()))
        .collect();
    (points, truth, text_map)
}

#[test]
fn thirty_to_twenty_nine_removes_the_smallest_topic() {
    let (points, _, _) = synthetic_focused();
    let model = cluster(&points, 30, 11).unwrap();
    let counts = model.member_counts();
    let smallest = (0..30).min_by_key(|t| (counts[*t], *t)).unwrap();
    let orphans: Vec<RecordId> = model.members(smallest).into_iter().cloned().collect();

    let reduced = reduce_topics(&model, &points, 29).unwrap();
    assert_eq!(reduced.k, 29);
    assert_eq!(reduced.assignment.len(), points.len());
    let homes: BTreeSet<usize> = orphans.iter().map(|id| reduced.assignment[id]).collect();
    assert_eq!(homes.len(), 1, "orphans split across {homes:?}");
    assert_nearest_centroid(&reduced, &points);
}

#[test]
fn flags_on_the_synthetic_corpus_match_a_recount() {
    let (points, truth, texts) = synthetic_focused();
    let model = cluster(&points, 30, 11).unwrap();
    let model = reduce_topics(&model, &points, 29).unwrap();
    let model = summarize(&model, &texts, 8, &english_stopwords()).unwrap();

    let mut probe = BTreeMap::new();
    for t in 0..model.k {
        let members = model.members_by_distance(t);
        for i in interval_indices(members.len(), members.len().min(15)) {
            probe.insert(members[i].clone(), truth[&members[i]]);
        }
    }
    let flagged = flag_target_topics(&model, &probe, 0.5).unwrap();

    for t in 0..29 {
        let probed: Vec<bool> = probe
            .iter()
            .filter(|(id, _)| model.assignment[*id] == t)
            .map(|(_, p)| *p)
            .collect();
        let share = probed.iter().filter(|p| **p).count() as f64 / probed.len() as f64;
        assert_eq!(flagged.target_flag[t], share >= 0.5, "topic {t}");
    }
    let n = flagged.flagged_topics().len();
    assert!((1..29).contains(&n), "{n} of 29 flagged");
}

#[test]
fn toy_corpus_keywords_match_hand_scores() {
    // Topic 0: "flu vaccine fever" x2; topic 1: "flu cough"; topic 2: "fever rash".
    let ids: Vec<RecordId> = (0..4).map(|i| RecordId(format!("d{i}"))).collect();
    let assignment: BTreeMap<RecordId, usize> = ids.iter().cloned().zip([0, 0, 1, 2]).collect();
    let texts: BTreeMap<RecordId, String> = ids
        .iter()
        .cloned()
        .zip(
            [
                "flu vaccine fever",
                "flu vaccine fever",
                "flu cough",
                "fever rash",
            ]
            .map(String::from),
        )
        .collect();
    let model = TopicModel {
        k: 3,
        centroids: vec![vec![0.0]; 3],
        distances: ids.iter().map(|id| (id.clone(), 0.0)).collect(),
        assignment,
        keywords: vec![Vec::new(); 3],
        target_flag: vec![false; 3],
    };
    let out = summarize(&model, &texts, 10, &BTreeSet::new()).unwrap();

    // Topic 0 has 6 tokens. Counts: flu 2, vaccine 2, fever 2,
    // "flu vaccine" 2, "vaccine fever" 2. Topic spread: flu 2, fever 2,
    // vaccine 1, both bigrams 1.
    let ln3 = 3f64.ln();
    let ln15 = 1.5f64.ln();
    let want0 = [
        ("flu vaccine", 2.0 / 6.0 * ln3),
        ("vaccine", 2.0 / 6.0 * ln3),
        ("vaccine fever", 2.0 / 6.0 * ln3),
        ("fever", 2.0 / 6.0 * ln15),
        ("flu", 2.0 / 6.0 * ln15),
    ];
    let got0: Vec<(&str, f64)> = out.keywords[0]
        .iter()
        .map(|k| (k.ngram.as_str(), k.score))
        .collect();
    assert_eq!(got0.len(), want0.len());
    for ((g, gs), (w, ws)) in got0.iter().zip(want0) {
        assert_eq!(*g, w);
        assert!((gs - ws).abs() < 1e-12);
    }
    // Topic 1 has 2 tokens: cough 1, "flu cough" 1 (unique), flu 1 (shared).
    let got1: Vec<&str> = out.keywords[1].iter().map(|k| k.ngram.as_str()).collect();
    assert_eq!(got1, ["cough", "flu cough", "flu"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_record_sits_with_its_nearest_centroid(
        raw in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 8..60),
        k in 2usize..6,
        seed in 0u64..1000,
    ) {
        prop_assume!(raw.len() >= k);
        let points: Vec<(RecordId, EmbeddingVector)> = raw
            .into_iter()
            .enumerate()
            .map(|(i, v)| (RecordId(format!("p{i:03}")), vector(v)))
            .collect();
        let model = cluster(&points, k, seed).unwrap();
        prop_assert_eq!(model.member_counts().iter().sum::<usize>(), points.len());
        assert_nearest_centroid(&model, &points);
        if k > 2 {
            let reduced = reduce_topics(&model, &points, k - 1).unwrap();
            prop_assert_eq!(reduced.k, k - 1);
            prop_assert_eq!(reduced.member_counts().iter().sum::<usize>(), points.len());
            assert_nearest_centroid(&reduced, &points);
        }
    }
}
