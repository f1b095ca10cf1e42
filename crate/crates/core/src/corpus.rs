//! Triage records, preprocessing and the keyword rule set.
//!
//! The same [`FilterRuleSet`] serves three purposes: building the focused
//! pool, probing confident negatives for missed positives, and acting as the
//! pattern-matching baseline classifier.

use std::fmt;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("record {0}: raw text is empty")]
    EmptyRawText(RecordId),
    #[error("record {0}: nothing left after stripping patterns")]
    EmptyAfterStrip(RecordId),
    #[error("record {id}: {reason}")]
    InvalidRecord { id: RecordId, reason: String },
    #[error("invalid filter rules: {0}")]
    InvalidRules(String),
    #[error("unsupported rule set version {0}")]
    UnsupportedVersion(u32),
    #[error("could not read rule set {path}: {reason}")]
    RulesIo { path: String, reason: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Opaque record identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub String);

impl RecordId {
    pub fn new(id: impl Into<String>) -> Self {
        RecordId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RecordId {
    fn from(s: &str) -> Self {
        RecordId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    #[serde(alias = "m", alias = "M")]
    Male,
    #[serde(alias = "f", alias = "F")]
    Female,
    #[default]
    Unknown,
}

impl Sex {
    fn word(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unk",
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    Focused,
    Deployment,
    Synthetic,
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pool::Focused => "focused",
            Pool::Deployment => "deployment",
            Pool::Synthetic => "synthetic",
        })
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    #[default]
    Unlabeled,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// Positive and negative swap; unlabeled stays unlabeled.
    pub fn flipped(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
            Label::Unlabeled => Label::Unlabeled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Human,
    Simulated,
    Counterfactual,
    #[default]
    None,
}

/// One emergency department triage note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageRecord {
    pub id: RecordId,
    pub raw_text: String,
    #[serde(default)]
    pub clean_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default)]
    pub sex: Sex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default)]
    pub pool: Pool,
    #[serde(default)]
    pub label: Label,
    #[serde(default)]
    pub label_source: LabelSource,
}

impl TriageRecord {
    /// An unlabeled, not yet preprocessed record.
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>, pool: Pool) -> Self {
        TriageRecord {
            id: RecordId::new(id),
            raw_text: raw_text.into(),
            clean_text: String::new(),
            age: None,
            sex: Sex::Unknown,
            site: None,
            timestamp: None,
            pool,
            label: Label::Unlabeled,
            label_source: LabelSource::None,
        }
    }

    /// Checks the record-level invariants that must hold once preprocessed.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: &str| {
            Err(CorpusError::InvalidRecord {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.clean_text.is_empty() {
            return fail("clean_text is empty");
        }
        if self.clean_text.contains(['\t', '\n', '\r']) {
            return fail("clean_text contains tab or newline");
        }
        if (self.label == Label::Unlabeled) != (self.label_source == LabelSource::None) {
            return fail("label and label_source disagree on labeled state");
        }
        if self.pool == Pool::Synthetic && self.label_source != LabelSource::Counterfactual {
            return fail("synthetic record without counterfactual provenance");
        }
        Ok(())
    }
}

/// Lowercases, removes `strip_patterns` and collapses whitespace.
///
/// Patterns are literal, matched case-insensitively, and removed until no
/// occurrence remains (removing one occurrence can expose another).
pub fn normalize_text(raw: &str, strip_patterns: &[String]) -> String {
    let mut text = raw.to_lowercase();
    for pattern in strip_patterns {
        let pattern = pattern.to_lowercase();
        if pattern.trim().is_empty() {
            continue;
        }
        while text.contains(&pattern) {
            text = text.replace(&pattern, " ");
        }
    }
    collapse_whitespace(&text)
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Produces `clean_text` as `"<age> <sex> <normalized raw text>"`.
pub fn preprocess(
    record: &TriageRecord,
    strip_patterns: &[String],
) -> Result<TriageRecord, CorpusError> {
    if record.raw_text.trim().is_empty() {
        return Err(CorpusError::EmptyRawText(record.id.clone()));
    }
    let body = normalize_text(&record.raw_text, strip_patterns);
    if body.is_empty() {
        return Err(CorpusError::EmptyAfterStrip(record.id.clone()));
    }
    let age = record
        .age
        .map(|a| a.to_string())
        .unwrap_or_else(|| "unk".to_string());
    let mut out = record.clone();
    out.clean_text = format!("{age} {} {body}", record.sex.word());
    Ok(out)
}

/// Current rule set file format version.
pub const RULES_VERSION: u32 = 1;

/// Keyword rules for pool construction and the pattern-matching baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRuleSet {
    #[serde(default = "default_rules_version")]
    pub version: u32,
    pub include_terms: Vec<String>,
    #[serde(default)]
    pub exclude_phrases: Vec<String>,
    #[serde(default = "default_min_length")]
    pub min_length: usize,
}

fn default_rules_version() -> u32 {
    RULES_VERSION
}

fn default_min_length() -> usize {
    3
}

/// Why [`keyword_filter`] rejected a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    TooShort,
    NoIncludeTerm,
    /// Every include term sat inside an exclusion phrase.
    ExclusionOnly,
}

impl FilterRuleSet {
    /// A documented starter list: generic vaccine stems plus vaccine brands
    /// and products licensed in Australia. Deployments are expected to
    /// replace it with the full brand and vaccine-preventable disease lists.
    pub fn starter() -> Self {
        let include = [
            "vacc",
            "vax",
            "immunis",
            "immuniz",
            "booster",
            "pfizer",
            "moderna",
            "astrazeneca",
            "comirnaty",
            "spikevax",
            "vaxzevria",
            "novavax",
            "nuvaxovid",
            "fluad",
            "fluarix",
            "influvac",
            "afluria",
            "flucelvax",
            "gardasil",
            "boostrix",
            "adacel",
            "infanrix",
            "priorix",
            "varilrix",
            "shingrix",
            "zostavax",
            "prevenar",
            "pneumovax",
            "bexsero",
            "nimenrix",
            "menquadfi",
            "rotarix",
            "arexvy",
            "abrysvo",
            "dukoral",
            "vivotif",
        ];
        let exclude = [
            "fully vaxed",
            "triple vaxed",
            "double vaxed",
            "covid vaccinated",
            "fully vaccinated",
            "vaccinations up to date",
            "vaccinations utd",
            "unvaccinated",
            "not vaccinated",
        ];
        FilterRuleSet {
            version: RULES_VERSION,
            include_terms: include.iter().map(|s| s.to_string()).collect(),
            exclude_phrases: exclude.iter().map(|s| s.to_string()).collect(),
            min_length: 3,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.version != RULES_VERSION {
            return Err(CorpusError::UnsupportedVersion(self.version));
        }
        if self.include_terms.iter().all(|t| t.trim().is_empty()) {
            return Err(CorpusError::InvalidRules("include_terms is empty".into()));
        }
        if self.min_length < 1 {
            return Err(CorpusError::InvalidRules(
                "min_length must be at least 1".into(),
            ));
        }
        for term in self.include_terms.iter().chain(&self.exclude_phrases) {
            if *term != term.to_lowercase() {
                return Err(CorpusError::InvalidRules(format!(
                    "term {term:?} is not lowercase"
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, CorpusError> {
        let rules: FilterRuleSet =
            toml::from_str(s).map_err(|e| CorpusError::InvalidRules(e.to_string()))?;
        rules.validate()?;
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::RulesIo {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("rule set serializes")
    }

    fn has_include_term(&self, text: &str) -> bool {
        self.include_terms
            .iter()
            .any(|t| !t.is_empty() && text.contains(t.as_str()))
    }

    /// Include terms that occur in `text`, in rule-set order.
    pub fn matched_terms<'a>(&'a self, text: &str) -> Vec<&'a str> {
        let text = text.to_lowercase();
        self.include_terms
            .iter()
            .filter(|t| !t.is_empty() && text.contains(t.as_str()))
            .map(String::as_str)
            .collect()
    }

    /// Applies the retention rule to already-normalized text.
    pub fn check(&self, text: &str) -> Result<(), RejectionReason> {
        let text = text.to_lowercase();
        if text.chars().count() < self.min_length {
            return Err(RejectionReason::TooShort);
        }
        if !self.has_include_term(&text) {
            return Err(RejectionReason::NoIncludeTerm);
        }
        let mut residual = text;
        for phrase in self.exclude_phrases.iter().filter(|p| !p.is_empty()) {
            if residual.contains(phrase.as_str()) {
                residual = residual.replace(phrase.as_str(), " ");
            }
        }
        if !self.has_include_term(&residual) {
            return Err(RejectionReason::ExclusionOnly);
        }
        Ok(())
    }

    pub fn matches_text(&self, text: &str) -> bool {
        self.check(text).is_ok()
    }
}

/// A record rejected by [`keyword_filter`], serialized with its reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    #[serde(flatten)]
    pub record: TriageRecord,
    pub rejection_reason: RejectionReason,
}

/// Splits preprocessed records into those the rules retain and reject.
pub fn keyword_filter(
    records: impl IntoIterator<Item = TriageRecord>,
    rules: &FilterRuleSet,
) -> (Vec<TriageRecord>, Vec<Rejected>) {
    let mut retained = Vec::new();
    let mut rejected = Vec::new();
    for record in records {
        match rules.check(&record.clean_text) {
            Ok(()) => retained.push(record),
            Err(reason) => rejected.push(Rejected {
                record,
                rejection_reason: reason,
            }),
        }
    }
    (retained, rejected)
}

/// True iff [`keyword_filter`] would retain this record on its own.
pub fn pattern_match(record: &TriageRecord, rules: &FilterRuleSet) -> bool {
    rules.matches_text(&record.clean_text)
}

pub fn read_records(path: &Path) -> Result<Vec<TriageRecord>, CorpusError> {
    Ok(jsonl::read(path)?)
}

pub fn write_records(path: &Path, records: &[TriageRecord]) -> Result<(), CorpusError> {
    Ok(jsonl::write(path, records)?)
}
