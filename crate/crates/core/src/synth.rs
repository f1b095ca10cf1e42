//! Template-generated triage notes with planted ground truth.
//!
//! Positives pair a symptom with a recent, linked vaccination. Keyword-bearing
//! negatives cover vaccination status, planned doses, remote history, animal
//! vaccines and "vacc" lookalikes. Keyword-free negatives include flu-like
//! presentations and non-vaccine injections. The ground truth and the span
//! carrying the vaccine link are kept in an [`OracleKey`] that only the
//! simulated oracle reads.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Pool, RecordId, Sex, TriageRecord};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("unknown template pack {0:?}")]
    UnknownTemplatePack(String),
    #[error("oracle key i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("oracle key json: {0}")]
    Json(#[from] serde_json::Error),
}

pub const TEMPLATE_PACK: &str = "triage-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_focused: usize,
    pub n_deployment: usize,
    pub prevalence_focused: f64,
    pub prevalence_deployment: f64,
    /// Share of the focused pool made of keyword-bearing negatives.
    pub keyword_negative_focused: f64,
    /// Share of the deployment pool made of keyword-bearing negatives.
    pub keyword_negative_deployment: f64,
    /// Share of positives whose only vaccine mention is an excluded phrase.
    pub hidden_positive_share: f64,
    pub seed: u64,
    pub template_pack: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_focused: 2_000,
            n_deployment: 10_000,
            prevalence_focused: 0.15,
            prevalence_deployment: 0.06,
            keyword_negative_focused: 0.25,
            keyword_negative_deployment: 0.02,
            hidden_positive_share: 0.15,
            seed: 7,
            template_pack: TEMPLATE_PACK.to_string(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.template_pack != TEMPLATE_PACK {
            return Err(SynthError::UnknownTemplatePack(self.template_pack.clone()));
        }
        for (name, v) in [
            ("prevalence_focused", self.prevalence_focused),
            ("prevalence_deployment", self.prevalence_deployment),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(SynthError::InvalidSpec(format!(
                    "{name} {v} must lie in (0, 1)"
                )));
            }
        }
        for (name, v) in [
            ("keyword_negative_focused", self.keyword_negative_focused),
            (
                "keyword_negative_deployment",
                self.keyword_negative_deployment,
            ),
            ("hidden_positive_share", self.hidden_positive_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidSpec(format!(
                    "{name} {v} must lie in [0, 1]"
                )));
            }
        }
        if self.prevalence_focused + self.keyword_negative_focused > 1.0
            || self.prevalence_deployment + self.keyword_negative_deployment > 1.0
        {
            return Err(SynthError::InvalidSpec("category shares exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LinkedPositive,
    HiddenPositive,
    StatusMention,
    PlannedDose,
    HistoryOnly,
    AnimalVaccine,
    Lookalike,
    Plain,
    FluLike,
    OtherInjection,
}

impl Category {
    pub fn is_positive(self) -> bool {
        matches!(self, Category::LinkedPositive | Category::HiddenPositive)
    }

    const KEYWORD_NEGATIVE: [(Category, f64); 5] = [
        (Category::StatusMention, 0.35),
        (Category::PlannedDose, 0.15),
        (Category::HistoryOnly, 0.2),
        (Category::AnimalVaccine, 0.15),
        (Category::Lookalike, 0.15),
    ];

    const KEYWORD_FREE: [(Category, f64); 3] = [
        (Category::Plain, 0.7),
        (Category::FluLike, 0.2),
        (Category::OtherInjection, 0.1),
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleKey {
    pub truth: BTreeMap<RecordId, bool>,
    /// Text carrying the vaccine link, present for positives.
    pub signal_spans: BTreeMap<RecordId, String>,
    pub categories: BTreeMap<RecordId, Category>,
}

impl OracleKey {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut out = BTreeMap::new();
        for c in self.categories.values() {
            *out.entry(*c).or_default() += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub focused: Vec<TriageRecord>,
    pub deployment: Vec<TriageRecord>,
    pub key: OracleKey,
}

const AEFI_SYMPTOMS: &[&str] = &[
    "injection site pain",
    "l) arm swelling",
    "r) arm redness",
    "fever",
    "rash to trunk",
    "hives",
    "chest pain",
    "palpitations",
    "syncopal episode",
    "headache",
    "myalgia",
    "lethargy",
    "vomiting",
    "facial swelling",
    "sob",
    "lip swelling",
];

const GENERAL_SYMPTOMS: &[&str] = &[
    "abdominal pain",
    "cough",
    "sore throat",
    "back pain",
    "dizziness",
    "nausea",
    "diarrhoea",
    "laceration to hand",
    "fall from standing",
    "ankle injury",
    "anxiety",
    "urinary symptoms",
    "ear pain",
    "knee pain",
    "epistaxis",
    "wrist injury",
];

const DURATIONS: &[&str] = &[
    "since this am",
    "for 2/7",
    "for 1/52",
    "overnight",
    "for 3 hours",
    "since yesterday",
    "for 4/7",
];

const OBSERVATIONS: &[&str] = &[
    "obs stable",
    "hr 96 bp 130/80",
    "sats 98% ra",
    "gcs 15",
    "afebrile",
    "t 38.2",
    "alert and orientated",
    "pain 6/10",
    "rr 20 sats 97",
    "ambulant to triage",
];

const VACCINES: &[&str] = &[
    "flu vaccine",
    "covid vaccine",
    "pfizer",
    "moderna",
    "astrazeneca",
    "mmr vaccine",
    "hpv vaccine",
    "tetanus booster",
    "boostrix",
    "shingrix",
    "prevenar",
    "fluad",
];

/// Vaccine families paired with the reactions typically reported after them.
struct Theme {
    vaccines: &'static [&'static str],
    symptoms: &'static [&'static str],
}

const THEMES: &[Theme] = &[
    Theme {
        vaccines: &["pfizer", "moderna", "covid vaccine", "astrazeneca"],
        symptoms: &["chest pain", "palpitations", "sob", "lethargy"],
    },
    Theme {
        vaccines: &["flu vaccine", "fluad"],
        symptoms: &["fever", "myalgia", "headache", "lethargy"],
    },
    Theme {
        vaccines: &["tetanus booster", "boostrix", "hpv vaccine", "prevenar"],
        symptoms: &["injection site pain", "l) arm swelling", "r) arm redness"],
    },
    Theme {
        vaccines: &["mmr vaccine", "shingrix", "covid vaccine", "flu vaccine"],
        symptoms: &["rash to trunk", "hives", "lip swelling", "facial swelling"],
    },
    Theme {
        vaccines: &["pfizer", "moderna", "hpv vaccine"],
        symptoms: &["syncopal episode", "vomiting", "headache"],
    },
];

const WHEN: &[&str] = &[
    "yesterday",
    "this am",
    "2/7 ago",
    "1/52 ago",
    "3/7 ago",
    "last night",
];

const DOSES: &[&str] = &["1st dose", "2nd dose", "3rd dose", "booster dose"];

/// Spans a simulated author inserts when writing a positive counterfactual.
pub const INSERT_SPANS: &[&str] = &[
    "had flu vaccine 1/52.",
    "post pfizer dose yesterday.",
    "onset after covid vaccine this am.",
    "had moderna booster 2/7 ago.",
    "symptoms started after mmr vaccine.",
    "reaction to tetanus booster given yesterday.",
];

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn pick<'a>(&mut self, items: &[&'a str]) -> &'a str {
        items[self.rng.random_range(0..items.len())]
    }

    fn weighted(&mut self, items: &[(Category, f64)]) -> Category {
        let total: f64 = items.iter().map(|(_, w)| w).sum();
        let mut x = self.rng.random::<f64>() * total;
        for (c, w) in items {
            if x < *w {
                return *c;
            }
            x -= w;
        }
        items[items.len() - 1].0
    }

    fn symptom(&mut self, aefi_bias: f64) -> &'static str {
        if self.rng.random::<f64>() < aefi_bias {
            self.pick(AEFI_SYMPTOMS)
        } else {
            self.pick(GENERAL_SYMPTOMS)
        }
    }

    fn complaint(&mut self, aefi_bias: f64) -> String {
        let first = self.symptom(aefi_bias);
        let dur = self.pick(DURATIONS);
        if self.rng.random::<f64>() < 0.5 {
            let mut second = self.symptom(aefi_bias);
            while second == first {
                second = self.symptom(aefi_bias);
            }
            format!("{first} and {second} {dur}")
        } else {
            format!("{first} {dur}")
        }
    }

    /// Trailing observations; present on a minority of notes.
    fn tail(&mut self) -> String {
        if self.rng.random::<f64>() < 0.35 {
            format!(". {}", self.pick(OBSERVATIONS))
        } else {
            String::new()
        }
    }

    fn themed_complaint(&mut self, theme: &Theme) -> String {
        let first = self.pick(theme.symptoms);
        let dur = self.pick(DURATIONS);
        if self.rng.random::<f64>() < 0.5 {
            let mut second = self.pick(theme.symptoms);
            while second == first {
                second = self.pick(theme.symptoms);
            }
            format!("{first} and {second} {dur}")
        } else {
            format!("{first} {dur}")
        }
    }

    fn link(&mut self, vaccines: &[&str]) -> String {
        let v = self.pick(vaccines);
        let when = self.pick(WHEN);
        match self.rng.random_range(0..7) {
            0 => format!("post {v} {when}"),
            1 => format!("onset {} hours after {v}", self.rng.random_range(2..30)),
            2 => format!("had {v} {when}, symptoms since"),
            3 => format!("received {} of {v} {when}", self.pick(DOSES)),
            4 => format!("reaction to {v} given {when}"),
            5 => format!("states started after {v} {when}"),
            _ => format!(
                "{} vaccinated {when}, unwell since",
                self.pick(&["flu", "pfizer", "moderna", "mmr", "hpv", "shingles"])
            ),
        }
    }

    /// Returns (text, signal span) for a positive of the given category.
    fn positive(&mut self, category: Category) -> (String, String) {
        let theme = &THEMES[self.rng.random_range(0..THEMES.len())];
        let complaint = self.themed_complaint(theme);
        let tail = self.tail();
        let span = if category == Category::HiddenPositive {
            format!("covid vaccinated {}, sx started after", self.pick(WHEN))
        } else {
            self.link(theme.vaccines)
        };
        let text = if self.rng.random::<f64>() < 0.5 {
            format!("{complaint}. {span}{tail}")
        } else {
            format!("{span}. {complaint}{tail}")
        };
        (text, span)
    }

    fn negative(&mut self, category: Category) -> String {
        let tail = self.tail();
        match category {
            Category::StatusMention => {
                let complaint = self.complaint(0.4);
                let status = match self.rng.random_range(0..7) {
                    0 => format!("covid vax x{}", self.rng.random_range(2..5)),
                    1 => "immunisations utd".to_string(),
                    2 => format!("vax status: {} doses covid", self.rng.random_range(1..5)),
                    3 => "fully vaxed".to_string(),
                    4 => "covid vaccinated x3".to_string(),
                    5 => "vaccinations up to date".to_string(),
                    _ => format!("{} given last season, nil concerns", self.pick(VACCINES)),
                };
                format!("{complaint}. {status}{tail}")
            }
            Category::PlannedDose => {
                let complaint = self.complaint(0.3);
                let plan = match self.rng.random_range(0..3) {
                    0 => format!("due for {} next week", self.pick(VACCINES)),
                    1 => format!(
                        "mother asking if {} can be given today",
                        self.pick(VACCINES)
                    ),
                    _ => "tetanus booster required".to_string(),
                };
                format!("{complaint}. {plan}{tail}")
            }
            Category::HistoryOnly => {
                let complaint = self.complaint(0.3);
                let v = self.pick(VACCINES);
                let hx = match self.rng.random_range(0..3) {
                    0 => format!("hx reaction to {v} as child"),
                    1 => format!("pmhx gbs after {v} in 2015"),
                    _ => format!("allergic to {v} per notes"),
                };
                format!("{hx}. presents with {complaint}{tail}")
            }
            Category::AnimalVaccine => match self.rng.random_range(0..3) {
                0 => format!("self-injected with campyvax while treating sheep, thumb pain{tail}"),
                1 => format!(
                    "{} bite to hand 1/52. had rabies vaccine 5/7 ago, here for 2nd dose{tail}",
                    self.pick(&["monkey", "dog", "bat"])
                ),
                _ => format!(
                    "needlestick from cattle vaccine gun, {} finger{tail}",
                    self.pick(&["l)", "r)"])
                ),
            },
            Category::Lookalike => {
                let injury =
                    self.pick(&["back pain", "fall on stairs", "wrist injury", "knee pain"]);
                match self.rng.random_range(0..2) {
                    0 => format!("{injury} while vaccuming {}{tail}", self.pick(DURATIONS)),
                    _ => format!("tripped over vaccum cord, {injury}{tail}"),
                }
            }
            Category::Plain => format!("{}{tail}", self.complaint(0.15)),
            Category::FluLike => {
                let lead = self.pick(&["flu sx", "viral sx", "coryzal sx", "?influenza"]);
                format!(
                    "{lead} {}, today {}{tail}",
                    self.pick(DURATIONS),
                    self.symptom(0.6)
                )
            }
            Category::OtherInjection => {
                let what = self.pick(&[
                    "had tequila shot last night",
                    "insulin injection this am",
                    "depo injection yesterday",
                    "cortisone injection to knee 2/7 ago",
                    "b12 injection yesterday",
                ]);
                format!("{what}, now {}{tail}", self.symptom(0.7))
            }
            Category::LinkedPositive | Category::HiddenPositive => {
                unreachable!("positive category")
            }
        }
    }
}

fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap()
}

fn generate_pool(
    g: &mut Gen,
    pool: Pool,
    n: usize,
    prevalence: f64,
    keyword_negative: f64,
    hidden_share: f64,
    key: &mut OracleKey,
) -> Vec<TriageRecord> {
    let prefix = match pool {
        Pool::Focused => "foc",
        Pool::Deployment => "dep",
        Pool::Synthetic => "syn",
    };
    let span_days = 365 * 2;
    (0..n)
        .map(|i| {
            let id = RecordId(format!("{prefix}-{i:05}"));
            let roll = g.rng.random::<f64>();
            let category = if roll < prevalence {
                if g.rng.random::<f64>() < hidden_share {
                    Category::HiddenPositive
                } else {
                    Category::LinkedPositive
                }
            } else if roll < prevalence + keyword_negative {
                g.weighted(&Category::KEYWORD_NEGATIVE)
            } else {
                g.weighted(&Category::KEYWORD_FREE)
            };
            let text = if category.is_positive() {
                let (text, span) = g.positive(category);
                key.signal_spans.insert(id.clone(), span);
                text
            } else {
                g.negative(category)
            };
            key.truth.insert(id.clone(), category.is_positive());
            key.categories.insert(id.clone(), category);
            let mut r = TriageRecord::new(id.as_str(), text, pool);
            r.age = Some(g.rng.random_range(16..90));
            r.sex = if g.rng.random::<bool>() {
                Sex::Female
            } else {
                Sex::Male
            };
            r.site = Some(format!("site-{:02}", g.rng.random_range(1..13)));
            r.timestamp =
                Some(base_time() + Duration::minutes(g.rng.random_range(0..span_days * 24 * 60)));
            r
        })
        .collect()
}

/// Deterministic corpus for `spec`. Records are unpreprocessed and unlabeled.
pub fn generate(spec: &CorpusSpec) -> Result<SyntheticCorpus, SynthError> {
    spec.validate()?;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut key = OracleKey::default();
    let focused = generate_pool(
        &mut g,
        Pool::Focused,
        spec.n_focused,
        spec.prevalence_focused,
        spec.keyword_negative_focused,
        spec.hidden_positive_share,
        &mut key,
    );
    let deployment = generate_pool(
        &mut g,
        Pool::Deployment,
        spec.n_deployment,
        spec.prevalence_deployment,
        spec.keyword_negative_deployment,
        spec.hidden_positive_share,
        &mut key,
    );
    Ok(SyntheticCorpus {
        focused,
        deployment,
        key,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FilterRuleSet;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_focused: 300,
            n_deployment: 500,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&CorpusSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.focused, c.focused);
    }

    #[test]
    fn spans_occur_once_and_carry_keywords() {
        let corpus = generate(&small()).unwrap();
        let rules = FilterRuleSet::starter();
        let texts: BTreeMap<_, _> = corpus
            .focused
            .iter()
            .chain(&corpus.deployment)
            .map(|r| (r.id.clone(), r.raw_text.clone()))
            .collect();
        for (id, span) in &corpus.key.signal_spans {
            let text = &texts[id];
            assert_eq!(text.matches(span.as_str()).count(), 1, "{text}");
            assert!(!rules.matched_terms(span).is_empty());
            if corpus.key.categories[id] == Category::LinkedPositive {
                assert!(rules.matches_text(text), "{text}");
            } else {
                assert!(!rules.matches_text(text), "{text}");
            }
        }
    }

    #[test]
    fn keyword_free_negatives_do_not_match() {
        let corpus = generate(&small()).unwrap();
        let rules = FilterRuleSet::starter();
        for r in corpus.focused.iter().chain(&corpus.deployment) {
            let c = corpus.key.categories[&r.id];
            if matches!(
                c,
                Category::Plain | Category::FluLike | Category::OtherInjection
            ) {
                assert!(
                    rules.matched_terms(&r.raw_text).is_empty(),
                    "{}",
                    r.raw_text
                );
            }
        }
    }

    #[test]
    fn insert_spans_carry_keywords() {
        let rules = FilterRuleSet::starter();
        assert!(INSERT_SPANS
            .iter()
            .all(|s| !rules.matched_terms(s).is_empty()));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&CorpusSpec {
            prevalence_focused: 0.0,
            ..small()
        })
        .is_err());
        assert!(matches!(
            generate(&CorpusSpec {
                template_pack: "x".into(),
                ..small()
            }),
            Err(SynthError::UnknownTemplatePack(_))
        ));
    }
}
