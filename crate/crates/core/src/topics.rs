//! Topic model over embedded records: k-means clustering, merging of small
//! topics, class-based n-gram summaries and target-topic flags.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RecordId;
use crate::embed::{squared_euclidean, EmbeddingVector};

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, thiserror::Error)]
pub enum TopicError {
    #[error("need at least k = {k} records, got {n}")]
    TooFewRecords { n: usize, k: usize },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("all vectors are identical; returning a single populated cluster")]
    DegenerateInput { fallback: Box<TopicModel> },
    #[error("vector for {0} has a different dimension")]
    DimensionMismatch(RecordId),
    #[error("record {0} appears more than once")]
    DuplicateRecord(RecordId),
    #[error("invalid target topic count {target} for a model with k = {k}")]
    InvalidTarget { target: usize, k: usize },
    #[error("record {0} is not part of the model")]
    UnknownRecord(RecordId),
    #[error("topic {0} has no probed members")]
    UnprobedTopic(usize),
    #[error("top_n must be at least 1")]
    InvalidTopN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub ngram: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<RecordId, usize>,
    /// Euclidean distance of each record to its assigned centroid.
    pub distances: BTreeMap<RecordId, f64>,
    pub keywords: Vec<Vec<Keyword>>,
    pub target_flag: Vec<bool>,
}

impl TopicModel {
    pub fn members(&self, topic: usize) -> Vec<&RecordId> {
        self.assignment
            .iter()
            .filter(|(_, t)| **t == topic)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for t in self.assignment.values() {
            counts[*t] += 1;
        }
        counts
    }

    /// Members of `topic` ordered by ascending centroid distance (ties by id).
    pub fn members_by_distance(&self, topic: usize) -> Vec<RecordId> {
        let mut members: Vec<(&RecordId, f64)> = self
            .assignment
            .iter()
            .filter(|(_, t)| **t == topic)
            .map(|(id, _)| (id, self.distances[id]))
            .collect();
        members.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        members.into_iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn flagged_topics(&self) -> Vec<usize> {
        (0..self.k).filter(|t| self.target_flag[*t]).collect()
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_euclidean(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.par_iter().map(|p| nearest(p, centroids).0).collect()
}

fn member_means(
    points: &[&[f64]],
    assign: &[usize],
    k: usize,
    dim: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &t) in points.iter().zip(assign) {
        counts[t] += 1;
        for (s, v) in sums[t].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    (sums, counts)
}

/// Lloyd iterations from `centroids` until the assignment is a fixed point or
/// the iteration cap is hit. The returned assignment is always the
/// nearest-centroid assignment for the returned centroids.
fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assign = assign_all(points, &centroids);
    for _ in 0..MAX_ITERATIONS {
        let (mut means, counts) = member_means(points, &assign, k, dim);
        // Empty clusters take the point farthest from its current centroid.
        let mut taken = BTreeSet::new();
        for t in 0..k {
            if counts[t] == 0 {
                let far = (0..points.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| {
                        let da = squared_euclidean(points[a], &centroids[assign[a]]);
                        let db = squared_euclidean(points[b], &centroids[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    });
                match far {
                    Some(i) => {
                        taken.insert(i);
                        means[t] = points[i].to_vec();
                    }
                    None => means[t] = centroids[t].clone(),
                }
            }
        }
        centroids = means;
        let next = assign_all(points, &centroids);
        if next == assign {
            break;
        }
        assign = next;
    }
    (centroids, assign)
}

fn kmeans_plus_plus(points: &[&[f64]], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p, points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // Fewer distinct points than k: reuse the lowest unchosen index.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = squared_euclidean(p, points[next]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

fn canonical_points(
    points: &[(RecordId, EmbeddingVector)],
) -> Result<Vec<(&RecordId, &[f64])>, TopicError> {
    let mut sorted: Vec<(&RecordId, &[f64])> = points
        .iter()
        .map(|(id, v)| (id, v.values.as_slice()))
        .collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(TopicError::DuplicateRecord(w[0].0.clone()));
        }
    }
    if let Some((_, first)) = sorted.first() {
        let dim = first.len();
        if let Some((id, _)) = sorted.iter().find(|(_, v)| v.len() != dim) {
            return Err(TopicError::DimensionMismatch((*id).clone()));
        }
    }
    Ok(sorted)
}

fn build_model(
    ids: &[&RecordId],
    points: &[&[f64]],
    centroids: Vec<Vec<f64>>,
    assign: Vec<usize>,
) -> TopicModel {
    let k = centroids.len();
    let mut assignment = BTreeMap::new();
    let mut distances = BTreeMap::new();
    for ((id, p), t) in ids.iter().zip(points).zip(assign) {
        assignment.insert((*id).clone(), t);
        distances.insert((*id).clone(), squared_euclidean(p, &centroids[t]).sqrt());
    }
    TopicModel {
        k,
        centroids,
        assignment,
        distances,
        keywords: vec![Vec::new(); k],
        target_flag: vec![false; k],
    }
}

/// k-means with k-means++ seeding.
///
/// Records are processed in id order, so the result does not depend on the
/// order of `points`.
pub fn cluster(
    points: &[(RecordId, EmbeddingVector)],
    k: usize,
    seed: u64,
) -> Result<TopicModel, TopicError> {
    if k < 2 {
        return Err(TopicError::InvalidK(k));
    }
    if points.len() < k {
        return Err(TopicError::TooFewRecords { n: points.len(), k });
    }
    let sorted = canonical_points(points)?;
    let ids: Vec<&RecordId> = sorted.iter().map(|(id, _)| *id).collect();
    let vecs: Vec<&[f64]> = sorted.iter().map(|(_, v)| *v).collect();

    if vecs.iter().all(|v| v == &vecs[0]) {
        let centroids = vec![vecs[0].to_vec(); k];
        let model = build_model(&ids, &vecs, centroids, vec![0; vecs.len()]);
        return Err(TopicError::DegenerateInput {
            fallback: Box::new(model),
        });
    }

    let init = kmeans_plus_plus(&vecs, k, seed);
    let (centroids, assign) = lloyd(&vecs, init);
    Ok(build_model(&ids, &vecs, centroids, assign))
}

/// Merges the smallest topic into its nearest neighbour until `target_k`
/// topics remain, then re-settles assignments so every record sits with its
/// nearest centroid. Keywords and flags are reset and must be recomputed.
pub fn reduce_topics(
    model: &TopicModel,
    points: &[(RecordId, EmbeddingVector)],
    target_k: usize,
) -> Result<TopicModel, TopicError> {
    if target_k < 1 || target_k >= model.k {
        return Err(TopicError::InvalidTarget {
            target: target_k,
            k: model.k,
        });
    }
    let sorted = canonical_points(points)?;
    for (id, _) in &sorted {
        if !model.assignment.contains_key(*id) {
            return Err(TopicError::UnknownRecord((*id).clone()));
        }
    }
    let ids: Vec<&RecordId> = sorted.iter().map(|(id, _)| *id).collect();
    let vecs: Vec<&[f64]> = sorted.iter().map(|(_, v)| *v).collect();
    let dim = vecs.first().map(|v| v.len()).unwrap_or(0);

    let mut centroids = model.centroids.clone();
    let mut assign: Vec<usize> = ids.iter().map(|id| model.assignment[*id]).collect();

    while centroids.len() > target_k {
        let k = centroids.len();
        let mut counts = vec![0usize; k];
        for &t in &assign {
            counts[t] += 1;
        }
        let smallest = (0..k).min_by_key(|&t| (counts[t], t)).expect("k >= 2");
        let receiver = (0..k)
            .filter(|&t| t != smallest)
            .min_by(|&a, &b| {
                squared_euclidean(&centroids[smallest], &centroids[a])
                    .total_cmp(&squared_euclidean(&centroids[smallest], &centroids[b]))
                    .then(a.cmp(&b))
            })
            .expect("k >= 2");
        for t in assign.iter_mut() {
            if *t == smallest {
                *t = receiver;
            }
        }
        let mut sum = vec![0.0; dim];
        let mut n = 0usize;
        for (p, &t) in vecs.iter().zip(&assign) {
            if t == receiver {
                n += 1;
                for (s, v) in sum.iter_mut().zip(p.iter()) {
                    *s += v;
                }
            }
        }
        if n > 0 {
            centroids[receiver] = sum.into_iter().map(|s| s / n as f64).collect();
        }
        centroids.remove(smallest);
        for t in assign.iter_mut() {
            if *t > smallest {
                *t -= 1;
            }
        }
    }

    let (centroids, assign) = if vecs.is_empty() {
        (centroids, assign)
    } else {
        lloyd(&vecs, centroids)
    };
    Ok(build_model(&ids, &vecs, centroids, assign))
}

/// Lowercase alphanumeric tokens of two or more characters.
pub fn keyword_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_string)
        .collect()
}

/// Scores unigrams and bigrams per topic with a class-based TF-IDF:
/// `(count in topic / topic token count) * ln(k / topics containing the n-gram)`.
pub fn summarize(
    model: &TopicModel,
    texts: &BTreeMap<RecordId, String>,
    top_n: usize,
    stopwords: &BTreeSet<String>,
) -> Result<TopicModel, TopicError> {
    if top_n < 1 {
        return Err(TopicError::InvalidTopN);
    }
    let k = model.k;
    let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); k];
    let mut token_totals = vec![0usize; k];
    for (id, &topic) in &model.assignment {
        let Some(text) = texts.get(id) else { continue };
        let tokens: Vec<String> = keyword_tokens(text)
            .into_iter()
            .filter(|t| !stopwords.contains(t))
            .collect();
        token_totals[topic] += tokens.len();
        for t in &tokens {
            *counts[topic].entry(t.clone()).or_default() += 1;
        }
        for w in tokens.windows(2) {
            *counts[topic]
                .entry(format!("{} {}", w[0], w[1]))
                .or_default() += 1;
        }
    }
    let mut topic_freq: HashMap<&str, usize> = HashMap::new();
    for c in &counts {
        for g in c.keys() {
            *topic_freq.entry(g.as_str()).or_default() += 1;
        }
    }
    let mut out = model.clone();
    for t in 0..k {
        let mut scored: Vec<Keyword> = counts[t]
            .iter()
            .map(|(g, &c)| Keyword {
                ngram: g.clone(),
                score: (c as f64 / token_totals[t] as f64)
                    * (k as f64 / topic_freq[g.as_str()] as f64).ln(),
            })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.ngram.cmp(&b.ngram))
        });
        scored.truncate(top_n);
        out.keywords[t] = scored;
    }
    Ok(out)
}

/// Flags topics whose probed members are positive at least `threshold` of
/// the time.
pub fn flag_target_topics(
    model: &TopicModel,
    probe: &BTreeMap<RecordId, bool>,
    threshold: f64,
) -> Result<TopicModel, TopicError> {
    let mut hits = vec![0usize; model.k];
    let mut probed = vec![0usize; model.k];
    for (id, &topic) in &model.assignment {
        if let Some(&p) = probe.get(id) {
            probed[topic] += 1;
            if p {
                hits[topic] += 1;
            }
        }
    }
    let mut out = model.clone();
    for t in 0..model.k {
        if probed[t] == 0 {
            return Err(TopicError::UnprobedTopic(t));
        }
        out.target_flag[t] = hits[t] as f64 / probed[t] as f64 >= threshold;
    }
    Ok(out)
}

/// The NLTK English stop-word list.
pub const ENGLISH_STOPWORDS: &[&str] = &[
    "i",
    "me",
    "my",
    "myself",
    "we",
    "our",
    "ours",
    "ourselves",
    "you",
    "you're",
    "you've",
    "you'll",
    "you'd",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "he",
    "him",
    "his",
    "himself",
    "she",
    "she's",
    "her",
    "hers",
    "herself",
    "it",
    "it's",
    "its",
    "itself",
    "they",
    "them",
    "their",
    "theirs",
    "themselves",
    "what",
    "which",
    "who",
    "whom",
    "this",
    "that",
    "that'll",
    "these",
    "those",
    "am",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "have",
    "has",
    "had",
    "having",
    "do",
    "does",
    "did",
    "doing",
    "a",
    "an",
    "the",
    "and",
    "but",
    "if",
    "or",
    "because",
    "as",
    "until",
    "while",
    "of",
    "at",
    "by",
    "for",
    "with",
    "about",
    "against",
    "between",
    "into",
    "through",
    "during",
    "before",
    "after",
    "above",
    "below",
    "to",
    "from",
    "up",
    "down",
    "in",
    "out",
    "on",
    "off",
    "over",
    "under",
    "again",
    "further",
    "then",
    "once",
    "here",
    "there",
    "when",
    "where",
    "why",
    "how",
    "all",
    "any",
    "both",
    "each",
    "few",
    "more",
    "most",
    "other",
    "some",
    "such",
    "no",
    "nor",
    "not",
    "only",
    "own",
    "same",
    "so",
    "than",
    "too",
    "very",
    "s",
    "t",
    "can",
    "will",
    "just",
    "don",
    "don't",
    "should",
    "should've",
    "now",
    "d",
    "ll",
    "m",
    "o",
    "re",
    "ve",
    "y",
    "ain",
    "aren",
    "aren't",
    "couldn",
    "couldn't",
    "didn",
    "didn't",
    "doesn",
    "doesn't",
    "hadn",
    "hadn't",
    "hasn",
    "hasn't",
    "haven",
    "haven't",
    "isn",
    "isn't",
    "ma",
    "mightn",
    "mightn't",
    "mustn",
    "mustn't",
    "needn",
    "needn't",
    "shan",
    "shan't",
    "shouldn",
    "shouldn't",
    "wasn",
    "wasn't",
    "weren",
    "weren't",
    "won",
    "won't",
    "wouldn",
    "wouldn't",
];

pub fn english_stopwords() -> BTreeSet<String> {
    ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Norm;

    fn pt(id: &str, values: &[f64]) -> (RecordId, EmbeddingVector) {
        (
            RecordId::new(id),
            EmbeddingVector {
                values: values.to_vec(),
                norm: Norm::Raw,
            },
        )
    }

    fn assert_nearest(model: &TopicModel, points: &[(RecordId, EmbeddingVector)]) {
        for (id, v) in points {
            let t = model.assignment[id];
            let d = squared_euclidean(&v.values, &model.centroids[t]);
            for c in &model.centroids {
                assert!(d <= squared_euclidean(&v.values, c) + 1e-12);
            }
        }
    }

    #[test]
    fn separable_groups_form_their_own_clusters() {
        let points = vec![
            pt("a1", &[0.0, 0.0]),
            pt("a2", &[0.0, 0.2]),
            pt("a3", &[0.2, 0.0]),
            pt("b1", &[10.0, 10.0]),
            pt("b2", &[10.0, 10.2]),
            pt("b3", &[10.2, 10.0]),
        ];
        let m = cluster(&points, 2, 1).unwrap();
        let ta = m.assignment[&RecordId::new("a1")];
        let tb = m.assignment[&RecordId::new("b1")];
        assert_ne!(ta, tb);
        for c in ["a2", "a3"] {
            assert_eq!(m.assignment[&RecordId::new(c)], ta);
        }
        let mean_a = [0.2 / 3.0, 0.2 / 3.0];
        for (x, y) in m.centroids[ta].iter().zip(mean_a) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_nearest(&m, &points);
    }

    #[test]
    fn identical_vectors_are_degenerate() {
        let points: Vec<_> = (0..5).map(|i| pt(&format!("r{i}"), &[0.5, 0.5])).collect();
        match cluster(&points, 3, 0) {
            Err(TopicError::DegenerateInput { fallback }) => {
                assert_eq!(fallback.member_counts(), vec![5, 0, 0]);
            }
            other => panic!("expected degenerate input, got {other:?}"),
        }
    }

    #[test]
    fn cluster_rejects_bad_arguments() {
        let points = vec![pt("a", &[0.0]), pt("b", &[1.0])];
        assert!(matches!(
            cluster(&points, 1, 0),
            Err(TopicError::InvalidK(1))
        ));
        assert!(matches!(
            cluster(&points, 3, 0),
            Err(TopicError::TooFewRecords { .. })
        ));
        let dup = vec![pt("a", &[0.0]), pt("a", &[1.0])];
        assert!(matches!(
            cluster(&dup, 2, 0),
            Err(TopicError::DuplicateRecord(_))
        ));
    }

    #[test]
    fn reduce_rejects_non_reducing_targets() {
        let points = vec![pt("a", &[0.0]), pt("b", &[1.0]), pt("c", &[5.0])];
        let m = cluster(&points, 3, 0).unwrap();
        assert!(matches!(
            reduce_topics(&m, &points, 3),
            Err(TopicError::InvalidTarget { .. })
        ));
        assert!(matches!(
            reduce_topics(&m, &points, 0),
            Err(TopicError::InvalidTarget { .. })
        ));
    }

    #[test]
    fn unique_bigram_ranks_first() {
        let mut assignment = BTreeMap::new();
        let mut texts = BTreeMap::new();
        let docs = [
            ("a", 0, "fever after flu vaccine"),
            ("b", 0, "rash post flu vaccine"),
            ("c", 1, "flu symptoms and cough"),
            ("d", 1, "vaccine due, cough"),
        ];
        for (id, t, text) in docs {
            assignment.insert(RecordId::new(id), t);
            texts.insert(RecordId::new(id), text.to_string());
        }
        let model = TopicModel {
            k: 2,
            centroids: vec![vec![0.0], vec![1.0]],
            distances: assignment.keys().map(|id| (id.clone(), 0.0)).collect(),
            assignment,
            keywords: vec![vec![]; 2],
            target_flag: vec![false; 2],
        };
        let out = summarize(&model, &texts, 5, &english_stopwords()).unwrap();
        // "flu vaccine" scores 2/7 * ln 2; "flu" and "vaccine" occur in both topics.
        assert_eq!(out.keywords[0][0].ngram, "flu vaccine");
        assert!((out.keywords[0][0].score - 2.0 / 7.0 * 2f64.ln()).abs() < 1e-12);
        assert!(out.keywords[0].iter().all(|k| k.ngram != "flu"));
    }

    #[test]
    fn stopword_only_topic_has_no_keywords() {
        let mut assignment = BTreeMap::new();
        assignment.insert(RecordId::new("a"), 0);
        assignment.insert(RecordId::new("b"), 1);
        let texts: BTreeMap<_, _> = [
            (RecordId::new("a"), "the and of it".to_string()),
            (RecordId::new("b"), "fever".to_string()),
        ]
        .into();
        let model = TopicModel {
            k: 2,
            centroids: vec![vec![0.0], vec![1.0]],
            distances: assignment.keys().map(|id| (id.clone(), 0.0)).collect(),
            assignment,
            keywords: vec![vec![]; 2],
            target_flag: vec![false; 2],
        };
        let out = summarize(&model, &texts, 3, &english_stopwords()).unwrap();
        assert!(out.keywords[0].is_empty());
        assert!(matches!(
            summarize(&model, &texts, 0, &english_stopwords()),
            Err(TopicError::InvalidTopN)
        ));
    }

    #[test]
    fn flags_follow_probe_fractions() {
        let mut assignment = BTreeMap::new();
        let mut probe = BTreeMap::new();
        for i in 0..10 {
            assignment.insert(RecordId(format!("p{i}")), 0);
            probe.insert(RecordId(format!("p{i}")), true);
            assignment.insert(RecordId(format!("n{i}")), 1);
            probe.insert(RecordId(format!("n{i}")), false);
        }
        let model = TopicModel {
            k: 2,
            centroids: vec![vec![0.0], vec![1.0]],
            distances: assignment.keys().map(|id| (id.clone(), 0.0)).collect(),
            assignment,
            keywords: vec![vec![]; 2],
            target_flag: vec![false; 2],
        };
        let out = flag_target_topics(&model, &probe, 0.5).unwrap();
        assert_eq!(out.target_flag, vec![true, false]);
        let partial: BTreeMap<_, _> = probe
            .into_iter()
            .filter(|(id, _)| id.0.starts_with('p'))
            .collect();
        assert!(matches!(
            flag_target_topics(&model, &partial, 0.5),
            Err(TopicError::UnprobedTopic(1))
        ));
    }
}
