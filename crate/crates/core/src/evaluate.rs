//! Confusion matrices, precision/recall/F-scores, rank AUC, the accumulated
//! evaluation set and the deployment audit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{FilterRuleSet, Label, Pool, RecordId, TriageRecord};
use crate::sampler::{Predictions, DECISION_CUTOFF};

pub const DEFAULT_BETA: f64 = 1.3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("record {0} has a label but no prediction, or the reverse")]
    DomainMismatch(RecordId),
    #[error("AUC needs at least one record of each class")]
    SingleClass,
    #[error("{} evaluation id(s) already belong to a dataset version, first {}", .0.len(), .0[0])]
    LeakageDetected(Vec<RecordId>),
    #[error("record {0} is unlabeled")]
    Unlabeled(RecordId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fn_: u64, fp: u64) -> Self {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, actual: bool, predicted: bool) {
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Tally predictions against labels. Both maps must cover the same ids.
pub fn confusion(
    labels: &BTreeMap<RecordId, bool>,
    predictions: &Predictions,
    cutoff: f64,
) -> Result<ConfusionMatrix, EvalError> {
    if let Some(id) = labels
        .keys()
        .find(|id| !predictions.contains_key(*id))
        .or_else(|| predictions.keys().find(|id| !labels.contains_key(*id)))
    {
        return Err(EvalError::DomainMismatch(id.clone()));
    }
    let mut cm = ConfusionMatrix::default();
    for (id, &actual) in labels {
        cm.add(actual, predictions[id] >= cutoff);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fbeta: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    /// Set when tp + fp = 0; precision is then reported as 0.
    #[serde(default)]
    pub precision_undefined: bool,
    /// Set when tp + fn = 0; recall is then reported as 0.
    #[serde(default)]
    pub recall_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn f_score(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

pub fn metrics(cm: &ConfusionMatrix, beta: f64) -> MetricReport {
    assert!(beta > 0.0, "beta must be positive");
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    MetricReport {
        precision,
        recall,
        f1: f_score(precision, recall, 1.0),
        fbeta: f_score(precision, recall, beta),
        beta,
        auc: None,
        precision_undefined,
        recall_undefined,
    }
}

/// AUC from (score, is_positive) pairs via the Mann-Whitney U statistic with
/// average ranks for ties.
pub fn auc_from_scores(scored: &[(f64, bool)]) -> Result<f64, EvalError> {
    let n_pos = scored.iter().filter(|(_, p)| *p).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps tie averages integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u128;
        let pos_in_group = sorted[i..=j].iter().filter(|(_, p)| *p).count() as u128;
        rank_sum2 += avg2 * pos_in_group;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg as u128) as f64)
}

pub fn compute_auc(
    labels: &BTreeMap<RecordId, bool>,
    predictions: &Predictions,
) -> Result<f64, EvalError> {
    let mut scored = Vec::with_capacity(labels.len());
    for (id, &positive) in labels {
        let p = predictions
            .get(id)
            .ok_or_else(|| EvalError::DomainMismatch(id.clone()))?;
        scored.push((*p, positive));
    }
    auc_from_scores(&scored)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationEntry {
    pub positive: bool,
    pub pool: Pool,
    pub round: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationSet {
    pub entries: BTreeMap<RecordId, EvaluationEntry>,
    pub positive_count: usize,
    pub negative_count: usize,
}

impl EvaluationSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> BTreeMap<RecordId, bool> {
        self.entries
            .iter()
            .map(|(id, e)| (id.clone(), e.positive))
            .collect()
    }

    pub fn ids(&self) -> BTreeSet<RecordId> {
        self.entries.keys().cloned().collect()
    }

    /// Ids present both here and in `used`.
    pub fn overlap<'a>(&self, used: impl IntoIterator<Item = &'a RecordId>) -> Vec<RecordId> {
        let mut out: Vec<RecordId> = used
            .into_iter()
            .filter(|id| self.entries.contains_key(*id))
            .cloned()
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn assert_disjoint<'a>(
        &self,
        used: impl IntoIterator<Item = &'a RecordId>,
    ) -> Result<(), EvalError> {
        let overlap = self.overlap(used);
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(EvalError::LeakageDetected(overlap))
        }
    }

    /// Merge newly labeled records. Nothing is merged if any id is already in
    /// `used`, the union of every dataset version.
    pub fn extend(
        &mut self,
        additions: impl IntoIterator<Item = (RecordId, EvaluationEntry)>,
        used: &BTreeSet<RecordId>,
    ) -> Result<(), EvalError> {
        let additions: Vec<(RecordId, EvaluationEntry)> = additions.into_iter().collect();
        let mut leaked: Vec<RecordId> = additions
            .iter()
            .filter(|(id, _)| used.contains(id))
            .map(|(id, _)| id.clone())
            .collect();
        if !leaked.is_empty() {
            leaked.sort();
            return Err(EvalError::LeakageDetected(leaked));
        }
        for (id, entry) in additions {
            if let Some(old) = self.entries.insert(id, entry.clone()) {
                self.tally(old.positive, -1);
            }
            self.tally(entry.positive, 1);
        }
        Ok(())
    }

    fn tally(&mut self, positive: bool, delta: isize) {
        let slot = if positive {
            &mut self.positive_count
        } else {
            &mut self.negative_count
        };
        *slot = slot.checked_add_signed(delta).expect("count underflow");
    }
}

/// Confusion and metrics of `predictions` restricted to the evaluation set.
pub fn evaluate_on(
    set: &EvaluationSet,
    predictions: &Predictions,
    beta: f64,
) -> Result<(ConfusionMatrix, MetricReport), EvalError> {
    let labels = set.labels();
    let restricted: Predictions = labels
        .keys()
        .map(|id| {
            predictions
                .get(id)
                .map(|p| (id.clone(), *p))
                .ok_or_else(|| EvalError::DomainMismatch(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let cm = confusion(&labels, &restricted, DECISION_CUTOFF)?;
    let mut report = metrics(&cm, beta);
    report.auc = compute_auc(&labels, &restricted).ok();
    Ok((cm, report))
}

/// Keyword-rule predictions (1.0 on a match, 0.0 otherwise).
pub fn pattern_predictions<'a>(
    records: impl IntoIterator<Item = &'a TriageRecord>,
    rules: &FilterRuleSet,
) -> Predictions {
    records
        .into_iter()
        .map(|r| {
            (
                r.id.clone(),
                if rules.matches_text(&r.clean_text) {
                    1.0
                } else {
                    0.0
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records: usize,
    pub predicted_positive: usize,
    pub confirmed_positive: usize,
    pub false_positives: Vec<AuditItem>,
    /// Predicted negatives that the keyword rules match, for manual review.
    pub pattern_matched_negatives: Vec<AuditItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditItem {
    pub id: RecordId,
    pub probability: f64,
    pub text: String,
}

/// Review one month of deployment predictions. `oracle` labels each positive
/// prediction; negatives are only pattern-matched.
pub fn audit_month(
    records: &[TriageRecord],
    predictions: &Predictions,
    rules: &FilterRuleSet,
    mut oracle: impl FnMut(&TriageRecord) -> Label,
) -> Result<AuditReport, EvalError> {
    let mut report = AuditReport {
        records: records.len(),
        ..Default::default()
    };
    for r in records {
        let p = *predictions
            .get(&r.id)
            .ok_or_else(|| EvalError::DomainMismatch(r.id.clone()))?;
        let item = || AuditItem {
            id: r.id.clone(),
            probability: p,
            text: r.clean_text.clone(),
        };
        if p >= DECISION_CUTOFF {
            report.predicted_positive += 1;
            match oracle(r) {
                Label::Positive => report.confirmed_positive += 1,
                Label::Negative => report.false_positives.push(item()),
                Label::Unlabeled => return Err(EvalError::Unlabeled(r.id.clone())),
            }
        } else if rules.matches_text(&r.clean_text) {
            report.pattern_matched_negatives.push(item());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricReport,
}

impl ReportRow {
    pub fn new(model: impl Into<String>, confusion: ConfusionMatrix, beta: f64) -> Self {
        ReportRow {
            model: model.into(),
            confusion,
            metrics: metrics(&confusion, beta),
        }
    }
}

/// Plain-text table with columns Model, TP, TN, FN, FP, Precision, Recall,
/// F1, F1Beta.
pub fn render_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>5} | {:>5} | {:>5} | {:>5} | {:>9} | {:>6} | {:>5} | {:>6}",
        "Model", "TP", "TN", "FN", "FP", "Precision", "Recall", "F1", "F1Beta"
    );
    for r in rows {
        let (c, m) = (&r.confusion, &r.metrics);
        let _ = writeln!(
            out,
            "{:<width$} | {:>5} | {:>5} | {:>5} | {:>5} | {:>9.3} | {:>6.3} | {:>5.3} | {:>6.3}",
            r.model, c.tp, c.tn, c.fn_, c.fp, m.precision, m.recall, m.f1, m.fbeta
        );
    }
    out
}
