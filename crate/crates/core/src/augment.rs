//! Counterfactual label flips: remove the class-determining span from a
//! positive record, or insert one into a negative record, and keep a ledger
//! that can undo every edit exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    collapse_whitespace, FilterRuleSet, Label, LabelSource, Pool, RecordId, TriageRecord,
};
use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("span {0:?} does not occur in the record")]
    SpanNotFound(String),
    #[error("span {0:?} occurs more than once")]
    AmbiguousSpan(String),
    #[error("removing the span leaves no text")]
    EmptyResidual,
    #[error("span {0:?} contains no include term")]
    SpanLacksSignal(String),
    #[error("position {position} is outside 0..={tokens}")]
    PositionOutOfBounds { position: usize, tokens: usize },
    #[error("record {id} is {found:?}, expected {expected:?}")]
    WrongSourceLabel {
        id: RecordId,
        expected: Label,
        found: Label,
    },
    #[error("record {0} is already in the ledger")]
    DuplicateSynthetic(RecordId),
    #[error("synthetic record {0} has no ledger entry")]
    Unregistered(RecordId),
    #[error("edit of {0} does not invert cleanly")]
    InversionMismatch(RecordId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToNegative,
    ToPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Removal,
    Insertion,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub source_id: RecordId,
    pub synthetic_id: RecordId,
    pub direction: Direction,
    pub edit_span: String,
    pub edit_kind: EditKind,
    pub round: u32,
    /// Byte offset of `segment` in the longer of the two texts.
    pub offset: usize,
    /// Exact text removed or inserted, including the joining space.
    pub segment: String,
    #[serde(default)]
    pub split: Split,
}

impl CounterfactualPair {
    /// Apply the inverse edit to `synthetic_text`.
    pub fn invert(&self, synthetic_text: &str) -> Option<String> {
        match self.edit_kind {
            EditKind::Removal => {
                if !synthetic_text.is_char_boundary(self.offset) {
                    return None;
                }
                let mut s = String::with_capacity(synthetic_text.len() + self.segment.len());
                s.push_str(&synthetic_text[..self.offset]);
                s.push_str(&self.segment);
                s.push_str(&synthetic_text[self.offset..]);
                Some(s)
            }
            EditKind::Insertion => {
                let end = self.offset + self.segment.len();
                if synthetic_text.get(self.offset..end)? != self.segment {
                    return None;
                }
                Some(format!(
                    "{}{}",
                    &synthetic_text[..self.offset],
                    &synthetic_text[end..]
                ))
            }
        }
    }
}

pub fn synthetic_id(source: &RecordId, ordinal: usize) -> RecordId {
    RecordId(format!("{source}#cf{ordinal}"))
}

fn normalize_span(span: &str) -> String {
    collapse_whitespace(&span.to_lowercase())
}

fn require_label(source: &TriageRecord, expected: Label) -> Result<(), AugmentError> {
    if source.label != expected {
        return Err(AugmentError::WrongSourceLabel {
            id: source.id.clone(),
            expected,
            found: source.label,
        });
    }
    Ok(())
}

fn require_signal(span: &str, rules: &FilterRuleSet) -> Result<(), AugmentError> {
    if rules.matched_terms(span).is_empty() {
        return Err(AugmentError::SpanLacksSignal(span.to_string()));
    }
    Ok(())
}

fn synthetic_record(source: &TriageRecord, id: RecordId, text: String) -> TriageRecord {
    TriageRecord {
        id,
        raw_text: text.clone(),
        clean_text: text,
        pool: Pool::Synthetic,
        label: source.label.flipped(),
        label_source: LabelSource::Counterfactual,
        ..source.clone()
    }
}

/// Remove `span` (and the space joining it to its neighbour) from a positive
/// record. The result is labeled negative.
pub fn flip_to_negative(
    source: &TriageRecord,
    span: &str,
    rules: &FilterRuleSet,
    round: u32,
    ordinal: usize,
) -> Result<(TriageRecord, CounterfactualPair), AugmentError> {
    require_label(source, Label::Positive)?;
    let span = normalize_span(span);
    if span.is_empty() {
        return Err(AugmentError::SpanLacksSignal(span));
    }
    let text = &source.clean_text;
    let start = text
        .find(&span)
        .ok_or_else(|| AugmentError::SpanNotFound(span.clone()))?;
    let next = text
        .char_indices()
        .nth(text[..start].chars().count() + 1)
        .map(|(i, _)| i);
    if next.is_some_and(|n| text[n..].contains(&span)) {
        return Err(AugmentError::AmbiguousSpan(span));
    }
    require_signal(&span, rules)?;

    let end = start + span.len();
    let (cut_start, cut_end) = if text[..start].ends_with(' ') {
        (start - 1, end)
    } else if start == 0 && text[end..].starts_with(' ') {
        (start, end + 1)
    } else {
        (start, end)
    };
    let residual = format!("{}{}", &text[..cut_start], &text[cut_end..]);
    if residual.trim().is_empty() {
        return Err(AugmentError::EmptyResidual);
    }
    let sid = synthetic_id(&source.id, ordinal);
    let pair = CounterfactualPair {
        source_id: source.id.clone(),
        synthetic_id: sid.clone(),
        direction: Direction::ToNegative,
        edit_span: span,
        edit_kind: EditKind::Removal,
        round,
        offset: cut_start,
        segment: text[cut_start..cut_end].to_string(),
        split: Split::Train,
    };
    Ok((synthetic_record(source, sid, residual), pair))
}

/// Insert `span` before whitespace token `position` of a negative record
/// (`position` equal to the token count appends). The result is labeled
/// positive.
pub fn flip_to_positive(
    source: &TriageRecord,
    span: &str,
    position: usize,
    rules: &FilterRuleSet,
    round: u32,
    ordinal: usize,
) -> Result<(TriageRecord, CounterfactualPair), AugmentError> {
    require_label(source, Label::Negative)?;
    let span = normalize_span(span);
    require_signal(&span, rules)?;
    let text = &source.clean_text;
    let starts: Vec<usize> = text
        .char_indices()
        .filter(|&(i, c)| {
            !c.is_whitespace() && (i == 0 || text[..i].ends_with(char::is_whitespace))
        })
        .map(|(i, _)| i)
        .collect();
    if position > starts.len() {
        return Err(AugmentError::PositionOutOfBounds {
            position,
            tokens: starts.len(),
        });
    }
    let (offset, segment) = if position < starts.len() {
        (starts[position], format!("{span} "))
    } else {
        (text.len(), format!(" {span}"))
    };
    let new_text = format!("{}{}{}", &text[..offset], segment, &text[offset..]);
    let sid = synthetic_id(&source.id, ordinal);
    let pair = CounterfactualPair {
        source_id: source.id.clone(),
        synthetic_id: sid.clone(),
        direction: Direction::ToPositive,
        edit_span: span,
        edit_kind: EditKind::Insertion,
        round,
        offset,
        segment,
        split: Split::Train,
    };
    Ok((synthetic_record(source, sid, new_text), pair))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualLedger {
    pub pairs: Vec<CounterfactualPair>,
}

impl CounterfactualLedger {
    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        Ok(CounterfactualLedger {
            pairs: jsonl::read(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), JsonlError> {
        jsonl::write(path, &self.pairs)
    }

    pub fn register(&mut self, pair: CounterfactualPair) -> Result<(), AugmentError> {
        if self
            .pairs
            .iter()
            .any(|p| p.synthetic_id == pair.synthetic_id)
        {
            return Err(AugmentError::DuplicateSynthetic(pair.synthetic_id));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn get(&self, synthetic: &RecordId) -> Option<&CounterfactualPair> {
        self.pairs.iter().find(|p| &p.synthetic_id == synthetic)
    }

    /// Next free ordinal for synthetic ids derived from `source`.
    pub fn next_ordinal(&self, source: &RecordId) -> usize {
        self.pairs.iter().filter(|p| &p.source_id == source).count()
    }

    pub fn synthetic_ids(&self) -> BTreeSet<RecordId> {
        self.pairs.iter().map(|p| p.synthetic_id.clone()).collect()
    }

    /// Every synthetic record is registered, every edit inverts to its
    /// source text and every label is flipped.
    pub fn verify(&self, records: &BTreeMap<RecordId, TriageRecord>) -> Result<(), AugmentError> {
        for r in records.values().filter(|r| r.pool == Pool::Synthetic) {
            let pair = self
                .get(&r.id)
                .ok_or_else(|| AugmentError::Unregistered(r.id.clone()))?;
            let source = records
                .get(&pair.source_id)
                .ok_or_else(|| AugmentError::InversionMismatch(r.id.clone()))?;
            if pair.invert(&r.clean_text).as_deref() != Some(source.clean_text.as_str())
                || r.label != source.label.flipped()
            {
                return Err(AugmentError::InversionMismatch(r.id.clone()));
            }
        }
        Ok(())
    }
}

/// Share of `ids` that are synthetic.
pub fn synthetic_fraction<'a>(
    ids: impl IntoIterator<Item = &'a RecordId>,
    synthetic: &BTreeSet<RecordId>,
) -> f64 {
    let (mut n, mut syn) = (0usize, 0usize);
    for id in ids {
        n += 1;
        syn += usize::from(synthetic.contains(id));
    }
    if n == 0 {
        0.0
    } else {
        syn as f64 / n as f64
    }
}

/// Whole percent, truncated: 100 of 1007 reports as 9.
pub fn whole_percent(fraction: f64) -> u32 {
    (fraction * 100.0 + 1e-9).floor() as u32
}
