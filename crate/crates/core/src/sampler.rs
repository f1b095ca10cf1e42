//! Record selection strategies: topic-quota seed sampling, interval sampling
//! along centroid distance, and the prediction-driven query batches.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{FilterRuleSet, RecordId};
use crate::topics::TopicModel;

/// Positive-class probability per record, as produced by one checkpoint.
pub type Predictions = BTreeMap<RecordId, f64>;

/// Probability at or above which a record counts as predicted positive.
pub const DECISION_CUTOFF: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("plan asks for {total} records but only {available} are available")]
    InfeasiblePlan { total: usize, available: usize },
    #[error("invalid quota plan: {0}")]
    InvalidPlan(String),
    #[error("quota {quota} exceeds cluster size {len}")]
    QuotaExceedsCluster { quota: usize, len: usize },
    #[error("record {0} appears twice in one batch")]
    DuplicateInBatch(RecordId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaPlan {
    pub total: usize,
    pub target_share: f64,
    pub per_nontarget_floor: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_topic_cap: Option<usize>,
    /// Spread any shortfall against `total` over the topics after the
    /// floors are applied.
    #[serde(default = "yes")]
    pub redistribute_residual: bool,
}

fn yes() -> bool {
    true
}

impl QuotaPlan {
    pub fn new(total: usize, target_share: f64, per_nontarget_floor: usize) -> Self {
        QuotaPlan {
            total,
            target_share,
            per_nontarget_floor,
            per_topic_cap: None,
            redistribute_residual: true,
        }
    }

    pub fn validate(&self, nontarget_topics: usize) -> Result<(), SamplerError> {
        if self.total == 0 {
            return Err(SamplerError::InvalidPlan("total must be positive".into()));
        }
        if !(self.target_share > 0.0 && self.target_share < 1.0) {
            return Err(SamplerError::InvalidPlan(format!(
                "target_share {} must lie in (0, 1)",
                self.target_share
            )));
        }
        if self.per_nontarget_floor * nontarget_topics > self.total {
            return Err(SamplerError::InvalidPlan(format!(
                "floor {} x {nontarget_topics} non-target topics exceeds total {}",
                self.per_nontarget_floor, self.total
            )));
        }
        if self.per_topic_cap == Some(0) {
            return Err(SamplerError::InvalidPlan(
                "per_topic_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DiversitySeed,
    FnMining,
    PositivePrediction,
    UncertainNegative,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DiversitySeed => "diversity_seed",
            Strategy::FnMining => "fn_mining",
            Strategy::PositivePrediction => "positive_prediction",
            Strategy::UncertainNegative => "uncertain_negative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Strategy::DiversitySeed,
            Strategy::FnMining,
            Strategy::PositivePrediction,
            Strategy::UncertainNegative,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
    }
}

/// Round number and timestamp stamped onto a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchContext {
    pub round: u32,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub strategy: Strategy,
    pub record_ids: Vec<RecordId>,
    pub round: u32,
    pub created_at: DateTime<Utc>,
}

impl QueryBatch {
    pub fn new(
        strategy: Strategy,
        record_ids: Vec<RecordId>,
        ctx: BatchContext,
    ) -> Result<Self, SamplerError> {
        let mut seen = BTreeSet::new();
        for id in &record_ids {
            if !seen.insert(id) {
                return Err(SamplerError::DuplicateInBatch(id.clone()));
            }
        }
        Ok(QueryBatch {
            strategy,
            record_ids,
            round: ctx.round,
            created_at: ctx.created_at,
        })
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }
}

/// Largest-remainder apportionment of `total` over `weights`, never giving an
/// entry more than its cap. Ties go to the lower index. Returns fewer than
/// `total` only when the caps are exhausted.
pub fn apportion(total: usize, weights: &[usize], caps: &[usize]) -> Vec<usize> {
    let mut alloc = vec![0usize; weights.len()];
    let mut remaining = total;
    loop {
        let open: Vec<usize> = (0..weights.len())
            .filter(|&i| alloc[i] < caps[i] && weights[i] > 0)
            .collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let weight_sum: usize = open.iter().map(|&i| weights[i]).sum();
        let mut given = 0usize;
        let mut remainders = Vec::with_capacity(open.len());
        for &i in &open {
            let exact = remaining as u128 * weights[i] as u128;
            let whole = (exact / weight_sum as u128) as usize;
            let room = caps[i] - alloc[i];
            let take = whole.min(room);
            alloc[i] += take;
            given += take;
            if take == whole && alloc[i] < caps[i] {
                remainders.push((exact % weight_sum as u128, i));
            }
        }
        let mut left = remaining - given;
        remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, i) in remainders {
            if left == 0 {
                break;
            }
            alloc[i] += 1;
            left -= 1;
        }
        if left == remaining {
            break;
        }
        remaining = left;
    }
    alloc
}

/// Per-topic sample sizes for the seed set.
pub fn allocate_quota(
    model: &TopicModel,
    plan: &QuotaPlan,
) -> Result<BTreeMap<usize, usize>, SamplerError> {
    let counts = model.member_counts();
    let flagged: Vec<usize> = (0..model.k).filter(|t| model.target_flag[*t]).collect();
    let unflagged: Vec<usize> = (0..model.k).filter(|t| !model.target_flag[*t]).collect();
    if flagged.is_empty() || unflagged.is_empty() {
        return Err(SamplerError::InvalidPlan(
            "model needs at least one flagged and one unflagged topic".into(),
        ));
    }
    plan.validate(unflagged.len())?;
    let available: usize = counts.iter().sum();
    if plan.total > available {
        return Err(SamplerError::InfeasiblePlan {
            total: plan.total,
            available,
        });
    }

    let mut quota = vec![0usize; model.k];
    let unflagged_floor: Vec<usize> = unflagged
        .iter()
        .map(|&t| plan.per_nontarget_floor.min(counts[t]))
        .collect();
    let floor_sum: usize = unflagged_floor.iter().sum();

    let target = (plan.total as f64 * plan.target_share).round() as usize;
    let flagged_target = target.min(plan.total - floor_sum);
    let fw: Vec<usize> = flagged.iter().map(|&t| counts[t]).collect();
    for (&t, q) in flagged.iter().zip(apportion(flagged_target, &fw, &fw)) {
        quota[t] = q;
    }
    for (&t, f) in unflagged.iter().zip(unflagged_floor) {
        quota[t] = f;
    }

    if plan.redistribute_residual {
        let cap = |t: usize| plan.per_topic_cap.map_or(counts[t], |c| c.min(counts[t]));
        let assigned: usize = quota.iter().sum();
        let residual = plan.total - assigned;
        if residual > 0 {
            let uw: Vec<usize> = unflagged.iter().map(|&t| counts[t]).collect();
            let room: Vec<usize> = unflagged
                .iter()
                .map(|&t| cap(t).saturating_sub(quota[t]))
                .collect();
            let extra = apportion(residual, &uw, &room);
            for (&t, e) in unflagged.iter().zip(&extra) {
                quota[t] += e;
            }
            let left = residual - extra.iter().sum::<usize>();
            if left > 0 {
                let room: Vec<usize> = flagged.iter().map(|&t| counts[t] - quota[t]).collect();
                for (&t, e) in flagged.iter().zip(apportion(left, &fw, &room)) {
                    quota[t] += e;
                }
            }
        }
    }

    Ok(quota.into_iter().enumerate().collect())
}

/// Evenly spaced picks along a distance-ordered list: index `floor(i * n / quota)`
/// for `i` in `0..quota`. When `quota` divides `n` this is a fixed stride of
/// `n / quota` starting at the closest record.
pub fn interval_sample(
    ordered_ids: &[RecordId],
    quota: usize,
) -> Result<Vec<RecordId>, SamplerError> {
    let n = ordered_ids.len();
    if quota > n {
        return Err(SamplerError::QuotaExceedsCluster { quota, len: n });
    }
    Ok(interval_indices(n, quota)
        .into_iter()
        .map(|i| ordered_ids[i].clone())
        .collect())
}

pub fn interval_indices(n: usize, quota: usize) -> Vec<usize> {
    (0..quota).map(|i| i * n / quota).collect()
}

/// Seed batch: topic quotas filled by interval sampling within each topic.
pub fn diversity_seed(
    model: &TopicModel,
    plan: &QuotaPlan,
    ctx: BatchContext,
) -> Result<QueryBatch, SamplerError> {
    let quotas = allocate_quota(model, plan)?;
    let mut ids = Vec::new();
    for (topic, quota) in quotas {
        ids.extend(interval_sample(&model.members_by_distance(topic), quota)?);
    }
    QueryBatch::new(Strategy::DiversitySeed, ids, ctx)
}

fn by_descending_probability<'a>(
    items: impl Iterator<Item = (&'a RecordId, &'a f64)>,
) -> Vec<RecordId> {
    let mut v: Vec<(&RecordId, f64)> = items.map(|(id, p)| (id, *p)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(id, _)| id.clone()).collect()
}

pub fn is_uncertain_negative(p: f64, threshold: f64) -> bool {
    p < DECISION_CUTOFF && (1.0 - p) < threshold
}

pub fn is_confident_negative(p: f64, threshold: f64) -> bool {
    p < DECISION_CUTOFF && (1.0 - p) >= threshold
}

/// Predicted negatives whose negative-class confidence is below `threshold`.
pub fn uncertain_negatives(
    predictions: &Predictions,
    threshold: f64,
    ctx: BatchContext,
) -> QueryBatch {
    let ids = by_descending_probability(
        predictions
            .iter()
            .filter(|(_, p)| is_uncertain_negative(**p, threshold)),
    );
    QueryBatch::new(Strategy::UncertainNegative, ids, ctx).expect("map keys are unique")
}

pub fn positive_predictions(predictions: &Predictions, ctx: BatchContext) -> QueryBatch {
    let ids = by_descending_probability(predictions.iter().filter(|(_, p)| **p >= DECISION_CUTOFF));
    QueryBatch::new(Strategy::PositivePrediction, ids, ctx).expect("map keys are unique")
}

/// Confident negatives that the keyword rules flag as possible misses.
pub fn mine_false_negatives(
    predictions: &Predictions,
    texts: &BTreeMap<RecordId, String>,
    rules: &FilterRuleSet,
    threshold: f64,
    ctx: BatchContext,
) -> QueryBatch {
    let ids = by_descending_probability(predictions.iter().filter(|(id, p)| {
        is_confident_negative(**p, threshold)
            && texts.get(*id).is_some_and(|t| rules.matches_text(t))
    }));
    QueryBatch::new(Strategy::FnMining, ids, ctx).expect("map keys are unique")
}
