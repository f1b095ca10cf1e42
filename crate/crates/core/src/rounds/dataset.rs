use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use super::LoopError;
use crate::augment::Split;
use crate::corpus::RecordId;

pub const DEFAULT_RATIO_CAP: f64 = 1.5;

/// Priority given to counterfactual records so the cap defers them last.
pub const AUTHORED_PRIORITY: f64 = 2.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub positive: usize,
    pub negative: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.positive + self.negative
    }
}

/// A labeled negative kept out of training by the ratio cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holdover {
    pub id: RecordId,
    /// Model probability when the record was queried; lower means a more
    /// confident negative, which is deferred first.
    pub priority: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_version: Option<u32>,
    pub train: BTreeSet<RecordId>,
    pub validation: BTreeSet<RecordId>,
    pub train_counts: SplitCounts,
    pub validation_counts: SplitCounts,
    pub train_synthetic: usize,
    pub validation_synthetic: usize,
    #[serde(default)]
    pub holdover: Vec<Holdover>,
}

impl LabeledDataset {
    pub fn negative_ratio(&self) -> f64 {
        if self.train_counts.positive == 0 {
            f64::INFINITY
        } else {
            self.train_counts.negative as f64 / self.train_counts.positive as f64
        }
    }

    pub fn synthetic_fraction(&self, split: Split) -> f64 {
        let (syn, n) = match split {
            Split::Train => (self.train_synthetic, self.train.len()),
            Split::Validation => (self.validation_synthetic, self.validation.len()),
        };
        if n == 0 {
            0.0
        } else {
            syn as f64 / n as f64
        }
    }

    pub fn contains(&self, id: &RecordId) -> bool {
        self.train.contains(id) || self.validation.contains(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &RecordId> {
        self.train.iter().chain(&self.validation)
    }

    /// Recount both splits from `label_of` and `synthetic`.
    pub fn recount(
        &mut self,
        label_of: impl Fn(&RecordId) -> Option<bool>,
        synthetic: &BTreeSet<RecordId>,
    ) -> Result<(), LoopError> {
        let tally = |ids: &BTreeSet<RecordId>| -> Result<(SplitCounts, usize), LoopError> {
            let mut c = SplitCounts::default();
            for id in ids {
                match label_of(id) {
                    Some(true) => c.positive += 1,
                    Some(false) => c.negative += 1,
                    None => return Err(LoopError::Unlabeled(id.clone())),
                }
            }
            Ok((c, ids.iter().filter(|id| synthetic.contains(*id)).count()))
        };
        (self.train_counts, self.train_synthetic) = tally(&self.train)?;
        (self.validation_counts, self.validation_synthetic) = tally(&self.validation)?;
        Ok(())
    }

    /// Split disjointness, stored counts and the ratio cap.
    pub fn check(
        &self,
        label_of: impl Fn(&RecordId) -> Option<bool>,
        synthetic: &BTreeSet<RecordId>,
        ratio_cap: f64,
    ) -> Result<(), LoopError> {
        if let Some(id) = self.train.intersection(&self.validation).next() {
            return Err(LoopError::Invariant(format!(
                "{id} is in both train and validation of v{}",
                self.version
            )));
        }
        let mut recounted = self.clone();
        recounted.recount(label_of, synthetic)?;
        if recounted != *self {
            return Err(LoopError::Invariant(format!(
                "stored counts of v{} do not match its ids",
                self.version
            )));
        }
        if self.train_counts.negative as f64 > ratio_cap * self.train_counts.positive as f64 {
            return Err(LoopError::RatioViolated {
                version: self.version,
                positive: self.train_counts.positive,
                negative: self.train_counts.negative,
            });
        }
        Ok(())
    }
}

/// A newly labeled record offered to [`expand_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: RecordId,
    pub positive: bool,
    pub priority: f64,
    /// Forced split; `None` routes by `validation_share`.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandOptions {
    pub ratio_cap: f64,
    /// Share of unforced candidates routed to validation.
    pub validation_share: f64,
    pub seed: u64,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions {
            ratio_cap: DEFAULT_RATIO_CAP,
            validation_share: 0.0,
            seed: 0,
        }
    }
}

/// Deterministic value in [0, 1) per id and seed.
pub fn unit_hash(id: &RecordId, seed: u64) -> f64 {
    (xxh3_64_with_seed(id.as_str().as_bytes(), seed) >> 11) as f64 / (1u64 << 53) as f64
}

/// Next dataset version: all positives, and negatives up to `ratio_cap`
/// times the training positives. Negatives over the cap, most confident
/// first, wait in the holdover list and are retried on the next expansion.
pub fn expand_dataset(
    current: &LabeledDataset,
    candidates: &[Candidate],
    opts: &ExpandOptions,
    synthetic: &BTreeSet<RecordId>,
) -> Result<LabeledDataset, LoopError> {
    let mut pool: BTreeMap<RecordId, Candidate> = BTreeMap::new();
    for h in &current.holdover {
        pool.insert(
            h.id.clone(),
            Candidate {
                id: h.id.clone(),
                positive: false,
                priority: h.priority,
                split: Some(Split::Train),
            },
        );
    }
    for c in candidates {
        if !current.contains(&c.id) {
            pool.insert(c.id.clone(), c.clone());
        }
    }

    let mut next = LabeledDataset {
        version: current.version + 1,
        parent_version: Some(current.version),
        train: current.train.clone(),
        validation: current.validation.clone(),
        train_counts: current.train_counts,
        validation_counts: current.validation_counts,
        ..Default::default()
    };
    let mut train_negatives = Vec::new();
    for c in pool.into_values() {
        let split = c
            .split
            .unwrap_or(if unit_hash(&c.id, opts.seed) < opts.validation_share {
                Split::Validation
            } else {
                Split::Train
            });
        match (split, c.positive) {
            (Split::Validation, positive) => {
                next.validation.insert(c.id);
                if positive {
                    next.validation_counts.positive += 1;
                } else {
                    next.validation_counts.negative += 1;
                }
            }
            (Split::Train, true) => {
                next.train.insert(c.id);
                next.train_counts.positive += 1;
            }
            (Split::Train, false) => train_negatives.push(c),
        }
    }

    let positives = next.train_counts.positive;
    if positives == 0 {
        return Err(LoopError::RatioUnreachable);
    }
    let allowed = ((opts.ratio_cap * positives as f64).floor() as usize)
        .saturating_sub(next.train_counts.negative);
    train_negatives.sort_by(|a, b| {
        b.priority
            .total_cmp(&a.priority)
            .then_with(|| a.id.cmp(&b.id))
    });
    for (i, c) in train_negatives.into_iter().enumerate() {
        if i < allowed {
            next.train.insert(c.id);
            next.train_counts.negative += 1;
        } else {
            next.holdover.push(Holdover {
                id: c.id,
                priority: c.priority,
            });
        }
    }
    next.train_synthetic = next
        .train
        .iter()
        .filter(|id| synthetic.contains(*id))
        .count();
    next.validation_synthetic = next
        .validation
        .iter()
        .filter(|id| synthetic.contains(*id))
        .count();
    Ok(next)
}

/// First dataset version from the labeled seed batch, stratified so each
/// class sends `validation_share` of its records to validation.
pub fn seed_dataset(
    labeled: &BTreeMap<RecordId, bool>,
    validation_share: f64,
    ratio_cap: f64,
    seed: u64,
) -> Result<LabeledDataset, LoopError> {
    let mut candidates = Vec::new();
    for class in [true, false] {
        let mut ids: Vec<&RecordId> = labeled
            .iter()
            .filter(|(_, p)| **p == class)
            .map(|(id, _)| id)
            .collect();
        ids.sort_by(|a, b| {
            unit_hash(a, seed)
                .total_cmp(&unit_hash(b, seed))
                .then_with(|| a.cmp(b))
        });
        let n_val = (ids.len() as f64 * validation_share).round() as usize;
        for (i, id) in ids.into_iter().enumerate() {
            candidates.push(Candidate {
                id: id.clone(),
                positive: class,
                priority: 0.0,
                split: Some(if i < n_val {
                    Split::Validation
                } else {
                    Split::Train
                }),
            });
        }
    }
    let empty = LabeledDataset::default();
    let mut ds = expand_dataset(
        &empty,
        &candidates,
        &ExpandOptions {
            ratio_cap,
            validation_share: 0.0,
            seed,
        },
        &BTreeSet::new(),
    )?;
    ds.parent_version = None;
    Ok(ds)
}
