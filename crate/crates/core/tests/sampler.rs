use std::collections::{BTreeMap, BTreeSet};

use al_core::sampler::{
    allocate_quota, diversity_seed, interval_sample, is_confident_negative, mine_false_negatives,
    positive_predictions, uncertain_negatives, BatchContext, Predictions, QuotaPlan,
};
use al_core::topics::TopicModel;
use al_core::{FilterRuleSet, RecordId};
use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ctx() -> BatchContext {
    BatchContext {
        round: 1,
        created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
    }
}

/// A model with the given member counts and flags; distances grow with the
/// member index so the centroid order is known.
fn model(sizes: &[usize], flags: &[bool]) -> TopicModel {
    let mut assignment = BTreeMap::new();
    let mut distances = BTreeMap::new();
    for (t, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let id = RecordId(format!("t{t:02}-{i:04}"));
            assignment.insert(id.clone(), t);
            distances.insert(id, i as f64 * 0.01);
        }
    }
    TopicModel {
        k: sizes.len(),
        centroids: vec![vec![0.0]; sizes.len()],
        assignment,
        distances,
        keywords: vec![Vec::new(); sizes.len()],
        target_flag: flags.to_vec(),
    }
}

#[test]
fn interval_selection_spans_the_distance_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let n = rng.random_range(2..300);
        let q = rng.random_range(2..=n);
        // Ids are the ranks in ascending centroid distance.
        let ids: Vec<RecordId> = (0..n).map(|i| RecordId(format!("{i:04}"))).collect();
        let picked = interval_sample(&ids, q).unwrap();

        let ranks: Vec<usize> = picked.iter().map(|id| id.0.parse().unwrap()).collect();
        assert_eq!(ranks.len(), q);
        assert_eq!(ranks.iter().collect::<BTreeSet<_>>().len(), q);
        assert_eq!(ranks[0], 0, "closest record always first");
        let lo = *ranks.iter().min().unwrap();
        let hi = *ranks.iter().max().unwrap();
        let span = (hi - lo) as f64 / (n - 1) as f64;
        assert!(
            span >= (q - 1) as f64 / q as f64 - 1e-12,
            "n={n} q={q} span={span}"
        );
    }
}

#[test]
fn seed_of_700_over_nine_flagged_of_29_topics() {
    let sizes: Vec<usize> = (0..29).map(|t| 60 + (t * 37) % 90).collect();
    let flags: Vec<bool> = (0..29).map(|t| t % 3 == 0 && t != 27).collect();
    assert_eq!(flags.iter().filter(|f| **f).count(), 9);
    let m = model(&sizes, &flags);

    let quotas = allocate_quota(&m, &QuotaPlan::new(700, 0.6, 3)).unwrap();
    let flagged: usize = (0..29).filter(|t| flags[*t]).map(|t| quotas[&t]).sum();
    let unflagged: usize = (0..29).filter(|t| !flags[*t]).map(|t| quotas[&t]).sum();
    assert_eq!(flagged, 420);
    assert_eq!(unflagged, 280);

    let batch = diversity_seed(&m, &QuotaPlan::new(700, 0.6, 3), ctx()).unwrap();
    assert_eq!(batch.len(), 700);
    let unique: BTreeSet<_> = batch.record_ids.iter().collect();
    assert_eq!(unique.len(), 700);
}

#[test]
fn prediction_batches_partition_the_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rules = FilterRuleSet::starter();
    let mut preds = Predictions::new();
    let mut texts = BTreeMap::new();
    for i in 0..2000 {
        let id = RecordId(format!("r{i}"));
        // Spread mass near the boundaries.
        let p = match i % 4 {
            0 => rng.random::<f64>(),
            1 => rng.random::<f64>() * 0.15,
            2 => 0.45 + rng.random::<f64>() * 0.1,
            _ => [0.1, 0.5, 0.0999999, 0.4999999][rng.random_range(0..4)],
        };
        preds.insert(id.clone(), p);
        let text = if rng.random_bool(0.3) {
            "fever post vaccine"
        } else {
            "sore throat"
        };
        texts.insert(id, text.to_string());
    }
    let pos = positive_predictions(&preds, ctx());
    let unc = uncertain_negatives(&preds, 0.9, ctx());
    let fnm = mine_false_negatives(&preds, &texts, &rules, 0.9, ctx());
    let rest: BTreeSet<&RecordId> = preds
        .iter()
        .filter(|(id, p)| is_confident_negative(**p, 0.9) && !rules.matches_text(&texts[*id]))
        .map(|(id, _)| id)
        .collect();

    let mut seen = BTreeSet::new();
    for id in pos
        .record_ids
        .iter()
        .chain(&unc.record_ids)
        .chain(&fnm.record_ids)
        .chain(rest.iter().copied())
    {
        assert!(seen.insert(id.clone()), "{id} in two batches");
    }
    assert_eq!(seen.len(), preds.len());

    for b in [&pos, &unc, &fnm] {
        let ps: Vec<f64> = b.record_ids.iter().map(|id| preds[id]).collect();
        assert!(ps.windows(2).all(|w| w[0] >= w[1]), "descending order");
    }
}

fn plan_and_model() -> impl Strategy<Value = (Vec<usize>, Vec<bool>, usize, f64, usize)> {
    (2usize..20)
        .prop_flat_map(|k| {
            (
                prop::collection::vec(1usize..80, k),
                prop::collection::vec(any::<bool>(), k),
                1usize..400,
                0.05f64..0.95,
                0usize..5,
            )
        })
        .prop_filter("both flag kinds", |(_, f, ..)| {
            f.iter().any(|x| *x) && f.iter().any(|x| !*x)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn quotas_respect_total_membership_and_target(
        (sizes, flags, total, share, floor) in plan_and_model()
    ) {
        let m = model(&sizes, &flags);
        let pool: usize = sizes.iter().sum();
        let unflagged = flags.iter().filter(|f| !**f).count();
        let plan = QuotaPlan::new(total, share, floor);
        let res = allocate_quota(&m, &plan);
        if total > pool || floor * unflagged > total {
            prop_assert!(res.is_err());
            return Ok(());
        }
        let q = res.unwrap();
        let sum: usize = q.values().sum();
        prop_assert!(sum <= total && sum <= pool);
        for (t, n) in &q {
            prop_assert!(*n <= sizes[*t]);
        }
        // Deterministic.
        prop_assert_eq!(&allocate_quota(&m, &plan).unwrap(), &q);

        let floors: usize = (0..sizes.len())
            .filter(|t| !flags[*t])
            .map(|t| floor.min(sizes[t]))
            .sum();
        let flagged_pool: usize = (0..sizes.len()).filter(|t| flags[*t]).map(|t| sizes[t]).sum();
        let unflagged_pool = pool - flagged_pool;
        let target = (total as f64 * share).round() as usize;
        let flagged_sum: usize = (0..sizes.len()).filter(|t| flags[*t]).map(|t| q[&t]).sum();
        // Feasible when the flagged topics can absorb the target and the
        // unflagged ones can absorb the rest.
        if target <= flagged_pool && target + floors <= total && total - target <= unflagged_pool {
            prop_assert_eq!(flagged_sum, target);
            prop_assert_eq!(sum, total);
        }
    }
}
