use serde::{Deserialize, Serialize};

use super::dataset::unit_hash;
use super::labels::OracleKind;
use crate::corpus::{Label, RecordId};
use crate::synth::OracleKey;

/// Labels records from a sealed ground-truth key, flipping a fixed,
/// seed-determined share of answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedOracle {
    pub id: String,
    pub noise: f64,
    pub seed: u64,
    key: OracleKey,
}

impl SimulatedOracle {
    pub fn new(id: impl Into<String>, key: OracleKey, noise: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&noise), "noise must lie in [0, 1]");
        SimulatedOracle {
            id: id.into(),
            noise,
            seed,
            key,
        }
    }

    pub fn kind(&self) -> OracleKind {
        OracleKind::Simulated
    }

    pub fn truth(&self, id: &RecordId) -> Option<bool> {
        self.key.truth.get(id).copied()
    }

    /// The oracle's answer; `None` for records outside the key.
    pub fn label(&self, id: &RecordId) -> Option<Label> {
        let truth = self.truth(id)?;
        let flip = self.noise > 0.0 && unit_hash(id, self.seed ^ 0x6f72_6163_6c65) < self.noise;
        Some(Label::from_bool(truth != flip))
    }

    pub fn signal_span(&self, id: &RecordId) -> Option<&str> {
        self.key.signal_spans.get(id).map(String::as_str)
    }

    pub fn key(&self) -> &OracleKey {
        &self.key
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(n: usize) -> OracleKey {
        OracleKey {
            truth: (0..n)
                .map(|i| (RecordId(format!("r{i}")), i % 3 == 0))
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn noise_free_matches_truth() {
        let o = SimulatedOracle::new("sim", key(200), 0.0, 1);
        for (id, t) in &o.key().truth.clone() {
            assert_eq!(o.label(id), Some(Label::from_bool(*t)));
        }
        assert_eq!(o.label(&RecordId::new("missing")), None);
    }

    #[test]
    fn noise_rate_is_close() {
        let o = SimulatedOracle::new("sim", key(5000), 0.1, 1);
        let flipped = o
            .key()
            .truth
            .iter()
            .filter(|(id, t)| o.label(id) != Some(Label::from_bool(**t)))
            .count();
        assert!((400..600).contains(&flipped), "{flipped}");
    }
}
