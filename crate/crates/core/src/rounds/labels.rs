use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabelSource, RecordId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Human,
    Simulated,
    /// Settles disagreements; its latest vote wins.
    Adjudicator,
}

impl OracleKind {
    pub fn source(self) -> LabelSource {
        match self {
            OracleKind::Simulated => LabelSource::Simulated,
            OracleKind::Human | OracleKind::Adjudicator => LabelSource::Human,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub oracle_id: String,
    pub kind: OracleKind,
    pub label: Label,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "label")]
pub enum LabelStatus {
    Final(Label),
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub votes: Vec<Vote>,
    pub status: LabelStatus,
}

impl LabelEntry {
    fn resolve(&mut self) {
        if let Some(adj) = self
            .votes
            .iter()
            .rev()
            .find(|v| v.kind == OracleKind::Adjudicator)
        {
            self.status = LabelStatus::Final(adj.label);
            return;
        }
        let first = self.votes[0].label;
        self.status = if self.votes.iter().all(|v| v.label == first) {
            LabelStatus::Final(first)
        } else {
            LabelStatus::Pending
        };
    }

    /// Kind of the oracle whose vote settled the label.
    pub fn deciding_kind(&self) -> Option<OracleKind> {
        match self.status {
            LabelStatus::Pending => None,
            LabelStatus::Final(_) => self
                .votes
                .iter()
                .rev()
                .find(|v| v.kind == OracleKind::Adjudicator)
                .or(self.votes.first())
                .map(|v| v.kind),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBook {
    pub entries: BTreeMap<RecordId, LabelEntry>,
}

impl LabelBook {
    /// Sequence number of an identical earlier vote, if any.
    pub fn duplicate_of(&self, id: &RecordId, label: Label, oracle_id: &str) -> Option<u64> {
        self.entries
            .get(id)?
            .votes
            .iter()
            .find(|v| v.oracle_id == oracle_id && v.label == label)
            .map(|v| v.seq)
    }

    /// Record a vote. A second vote from the same oracle replaces its first.
    pub fn record(&mut self, id: RecordId, vote: Vote) -> LabelStatus {
        let entry = self.entries.entry(id).or_insert_with(|| LabelEntry {
            votes: Vec::new(),
            status: LabelStatus::Pending,
        });
        entry.votes.retain(|v| v.oracle_id != vote.oracle_id);
        entry.votes.push(vote);
        entry.resolve();
        entry.status
    }

    pub fn final_label(&self, id: &RecordId) -> Option<Label> {
        match self.entries.get(id)?.status {
            LabelStatus::Final(l) => Some(l),
            LabelStatus::Pending => None,
        }
    }

    pub fn is_touched(&self, id: &RecordId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn pending(&self) -> impl Iterator<Item = (&RecordId, &LabelEntry)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.status == LabelStatus::Pending)
    }
}
