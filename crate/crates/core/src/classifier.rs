//! Binary logistic regression over embeddings, trained by mini-batch gradient
//! descent with periodic checkpoints, plus a client for a remote backend that
//! speaks the same train/predict contract.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::corpus::RecordId;
use crate::embed::dot;
use crate::evaluate::{auc_from_scores, f_score, metrics, ConfusionMatrix};
use crate::sampler::{Predictions, DECISION_CUTOFF};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("{split} data must contain both classes")]
    SingleClassDataset { split: &'static str },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("expected {expected} weights, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("unsupported checkpoint schema version {0}")]
    UnsupportedSchema(u32),
    #[error("backend request failed: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    /// Stop after this many steps even if epochs remain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 9,
            batch_size: 16,
            checkpoint_every: 10,
            learning_rate: 0.1,
            l2: 1e-4,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.steps_per_epoch(n) * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn validate(&self, n_train: usize) -> Result<(), ClassifierError> {
        let bad = |m: String| Err(ClassifierError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("epochs, batch_size and checkpoint_every must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 {} must be non-negative", self.l2));
        }
        let cap = self.steps_per_epoch(n_train) * self.epochs;
        if self.checkpoint_every > cap {
            return bad(format!(
                "checkpoint_every {} exceeds the {cap} steps available",
                self.checkpoint_every
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledVector {
    pub id: RecordId,
    pub features: Vec<f64>,
    pub positive: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub train: Vec<LabeledVector>,
    pub validation: Vec<LabeledVector>,
}

impl TrainingSet {
    pub fn dim(&self) -> Option<usize> {
        self.train.first().map(|v| v.features.len())
    }

    fn check(&self) -> Result<usize, ClassifierError> {
        for (split, rows) in [("training", &self.train), ("validation", &self.validation)] {
            if !(rows.iter().any(|r| r.positive) && rows.iter().any(|r| !r.positive)) {
                return Err(ClassifierError::SingleClassDataset { split });
            }
        }
        let dim = self.train[0].features.len();
        for r in self.train.iter().chain(&self.validation) {
            if r.features.len() != dim {
                return Err(ClassifierError::DimensionMismatch {
                    expected: dim,
                    found: r.features.len(),
                });
            }
        }
        Ok(dim)
    }
}

/// Which run a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointTag {
    pub round: u32,
    pub lineage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub id: String,
    pub round: u32,
    pub lineage: String,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Feature weights followed by the bias. Empty for remote checkpoints.
    pub weights: Vec<f64>,
    pub val_loss: f64,
    pub val_auc: f64,
    pub val_f1: f64,
}

impl Checkpoint {
    pub fn dim(&self) -> usize {
        self.weights.len().saturating_sub(1)
    }

    pub fn bias(&self) -> f64 {
        *self.weights.last().unwrap_or(&0.0)
    }

    pub fn from_json(s: &str) -> Result<Self, ClassifierError> {
        let cp: Checkpoint = serde_json::from_str(s)
            .map_err(|e| ClassifierError::InvalidConfig(format!("checkpoint json: {e}")))?;
        if cp.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(ClassifierError::UnsupportedSchema(cp.schema_version));
        }
        Ok(cp)
    }

    pub fn probability(&self, features: &[f64]) -> Result<f64, ClassifierError> {
        if features.len() != self.dim() {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dim(),
                found: features.len(),
            });
        }
        Ok(sigmoid(
            dot(&self.weights[..features.len()], features) + self.bias(),
        ))
    }
}

pub fn checkpoint_id(tag: &CheckpointTag, step: usize) -> String {
    format!("r{}-{}-s{}", tag.round, tag.lineage, step)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn logistic_loss(z: f64, positive: bool) -> f64 {
    if positive {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// Mean logistic loss over `rows` plus `l2 / 2 * |w|^2` (bias excluded), and
/// its gradient with respect to the weights and bias.
pub fn loss_and_gradient(weights: &[f64], rows: &[&LabeledVector], l2: f64) -> (f64, Vec<f64>) {
    let dim = weights.len() - 1;
    let bias = weights[dim];
    let mut grad = vec![0.0; dim + 1];
    let mut loss = 0.0;
    for r in rows {
        let z = dot(&weights[..dim], &r.features) + bias;
        loss += logistic_loss(z, r.positive);
        let residual = sigmoid(z) - if r.positive { 1.0 } else { 0.0 };
        for (g, x) in grad[..dim].iter_mut().zip(&r.features) {
            *g += residual * x;
        }
        grad[dim] += residual;
    }
    let n = rows.len() as f64;
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    let mut penalty = 0.0;
    for (g, w) in grad[..dim].iter_mut().zip(&weights[..dim]) {
        *g += l2 * w;
        penalty += w * w;
    }
    (loss + 0.5 * l2 * penalty, grad)
}

/// Mean unpenalized logistic loss.
pub fn mean_loss(weights: &[f64], rows: &[LabeledVector]) -> f64 {
    let dim = weights.len() - 1;
    rows.iter()
        .map(|r| logistic_loss(dot(&weights[..dim], &r.features) + weights[dim], r.positive))
        .sum::<f64>()
        / rows.len() as f64
}

fn validation_metrics(weights: &[f64], rows: &[LabeledVector]) -> (f64, f64, f64) {
    let dim = weights.len() - 1;
    let scored: Vec<(f64, bool)> = rows
        .iter()
        .map(|r| {
            (
                sigmoid(dot(&weights[..dim], &r.features) + weights[dim]),
                r.positive,
            )
        })
        .collect();
    let mut cm = ConfusionMatrix::default();
    for (p, actual) in &scored {
        cm.add(*actual, *p >= DECISION_CUTOFF);
    }
    let m = metrics(&cm, 1.0);
    let auc = auc_from_scores(&scored).unwrap_or(0.5);
    (
        mean_loss(weights, rows),
        auc,
        f_score(m.precision, m.recall, 1.0),
    )
}

fn run(
    set: &TrainingSet,
    config: &TrainConfig,
    tag: &CheckpointTag,
    init: Vec<f64>,
    parent: Option<String>,
) -> Result<Vec<Checkpoint>, ClassifierError> {
    config.validate(set.train.len())?;
    let mut weights = init;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..set.train.len()).collect();
    let total = config.total_steps(set.train.len());
    let snapshot = |weights: &Vec<f64>, step: usize| {
        let (val_loss, val_auc, val_f1) = validation_metrics(weights, &set.validation);
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            id: checkpoint_id(tag, step),
            round: tag.round,
            lineage: tag.lineage.clone(),
            step,
            parent: parent.clone(),
            weights: weights.clone(),
            val_loss,
            val_auc,
            val_f1,
        }
    };
    if total == 0 {
        return Ok(vec![snapshot(&weights, 0)]);
    }
    let mut out = Vec::new();
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if step == total {
                break 'epochs;
            }
            let rows: Vec<&LabeledVector> = chunk.iter().map(|&i| &set.train[i]).collect();
            let (loss, grad) = loss_and_gradient(&weights, &rows, config.l2);
            step += 1;
            if !loss.is_finite() {
                return Err(ClassifierError::NonFiniteLoss { step });
            }
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= config.learning_rate * g;
            }
            if weights.iter().any(|w| !w.is_finite()) {
                return Err(ClassifierError::NonFiniteLoss { step });
            }
            if step % config.checkpoint_every == 0 {
                out.push(snapshot(&weights, step));
            }
        }
    }
    Ok(out)
}

pub fn train(
    set: &TrainingSet,
    config: &TrainConfig,
    tag: &CheckpointTag,
) -> Result<Vec<Checkpoint>, ClassifierError> {
    let dim = set.check()?;
    run(set, config, tag, vec![0.0; dim + 1], None)
}

pub fn resume_train(
    from: &Checkpoint,
    set: &TrainingSet,
    config: &TrainConfig,
    tag: &CheckpointTag,
) -> Result<Vec<Checkpoint>, ClassifierError> {
    let dim = set.check()?;
    if from.weights.len() != dim + 1 {
        return Err(ClassifierError::DimensionMismatch {
            expected: dim + 1,
            found: from.weights.len(),
        });
    }
    run(
        set,
        config,
        tag,
        from.weights.clone(),
        Some(from.id.clone()),
    )
}

/// Score each `(id, features)` pair with one checkpoint.
pub fn predict(
    checkpoint: &Checkpoint,
    items: &[(RecordId, Vec<f64>)],
) -> Result<Predictions, ClassifierError> {
    items
        .par_iter()
        .map(|(id, x)| checkpoint.probability(x).map(|p| (id.clone(), p)))
        .collect()
}

/// Rank by validation F1 (desc), AUC (desc), loss (asc), then step.
pub fn select_checkpoints(checkpoints: &[Checkpoint], top_k: usize) -> Vec<Checkpoint> {
    let mut ranked: Vec<&Checkpoint> = checkpoints.iter().collect();
    ranked.sort_by(|a, b| {
        b.val_f1
            .total_cmp(&a.val_f1)
            .then(b.val_auc.total_cmp(&a.val_auc))
            .then(a.val_loss.total_cmp(&b.val_loss))
            .then(a.step.cmp(&b.step))
    });
    ranked.into_iter().take(top_k).cloned().collect()
}

/// One record as the backend sees it: text for remote models, features for
/// the native one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example<'a> {
    pub id: &'a RecordId,
    pub text: &'a str,
    pub features: &'a [f64],
}

pub trait ClassifierBackend: Send + Sync {
    /// Train from scratch, or continue from `parent` when given.
    fn train(
        &self,
        set: &TrainingSet,
        texts: &BTreeMap<RecordId, String>,
        config: &TrainConfig,
        tag: &CheckpointTag,
        parent: Option<&Checkpoint>,
    ) -> Result<Vec<Checkpoint>, ClassifierError>;

    fn predict(
        &self,
        checkpoint: &Checkpoint,
        items: &[Example<'_>],
    ) -> Result<Predictions, ClassifierError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NativeBackend;

impl ClassifierBackend for NativeBackend {
    fn train(
        &self,
        set: &TrainingSet,
        _texts: &BTreeMap<RecordId, String>,
        config: &TrainConfig,
        tag: &CheckpointTag,
        parent: Option<&Checkpoint>,
    ) -> Result<Vec<Checkpoint>, ClassifierError> {
        match parent {
            Some(p) => resume_train(p, set, config, tag),
            None => train(set, config, tag),
        }
    }

    fn predict(
        &self,
        checkpoint: &Checkpoint,
        items: &[Example<'_>],
    ) -> Result<Predictions, ClassifierError> {
        items
            .par_iter()
            .map(|e| {
                checkpoint
                    .probability(e.features)
                    .map(|p| (e.id.clone(), p))
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct RemoteTrainRequest<'a> {
    round: u32,
    lineage: &'a str,
    parent: Option<&'a str>,
    config: &'a TrainConfig,
    train: Vec<RemoteExample<'a>>,
    validation: Vec<RemoteExample<'a>>,
}

#[derive(Debug, Serialize)]
struct RemoteExample<'a> {
    id: &'a RecordId,
    text: &'a str,
    positive: bool,
}

#[derive(Debug, Deserialize)]
struct JobCreated {
    job_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
enum JobStatus {
    Running,
    Done { checkpoints: Vec<Checkpoint> },
    Failed { message: String },
}

#[derive(Debug, Serialize)]
struct RemotePredictRequest<'a> {
    checkpoint_id: &'a str,
    texts: Vec<&'a str>,
}

/// Client for a training service exposing `POST /train`, `GET /jobs/{id}`
/// and `POST /predict`. Checkpoints it returns carry no weights.
pub struct RemoteBackend {
    base: Url,
    client: reqwest::blocking::Client,
    poll_interval: Duration,
    max_polls: usize,
}

impl RemoteBackend {
    pub fn new(base: Url) -> Self {
        RemoteBackend {
            base,
            client: reqwest::blocking::Client::new(),
            poll_interval: Duration::from_millis(500),
            max_polls: 7200,
        }
    }

    pub fn with_polling(mut self, interval: Duration, max_polls: usize) -> Self {
        self.poll_interval = interval;
        self.max_polls = max_polls;
        self
    }

    fn url(&self, path: &str) -> Result<Url, ClassifierError> {
        self.base
            .join(path)
            .map_err(|e| ClassifierError::Backend(e.to_string()))
    }

    fn json<T: for<'de> Deserialize<'de>>(
        resp: reqwest::Result<reqwest::blocking::Response>,
    ) -> Result<T, ClassifierError> {
        let resp = resp.map_err(|e| ClassifierError::Backend(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClassifierError::Backend(format!("HTTP {status}")));
        }
        resp.json()
            .map_err(|e| ClassifierError::Backend(e.to_string()))
    }
}

fn remote_examples<'a>(
    rows: &'a [LabeledVector],
    texts: &'a BTreeMap<RecordId, String>,
) -> Vec<RemoteExample<'a>> {
    rows.iter()
        .map(|r| RemoteExample {
            id: &r.id,
            text: texts.get(&r.id).map_or("", String::as_str),
            positive: r.positive,
        })
        .collect()
}

impl ClassifierBackend for RemoteBackend {
    fn train(
        &self,
        set: &TrainingSet,
        texts: &BTreeMap<RecordId, String>,
        config: &TrainConfig,
        tag: &CheckpointTag,
        parent: Option<&Checkpoint>,
    ) -> Result<Vec<Checkpoint>, ClassifierError> {
        let body = RemoteTrainRequest {
            round: tag.round,
            lineage: &tag.lineage,
            parent: parent.map(|p| p.id.as_str()),
            config,
            train: remote_examples(&set.train, texts),
            validation: remote_examples(&set.validation, texts),
        };
        let job: JobCreated = Self::json(self.client.post(self.url("train")?).json(&body).send())?;
        let job_url = self.url(&format!("jobs/{}", job.job_id))?;
        for _ in 0..self.max_polls {
            match Self::json::<JobStatus>(self.client.get(job_url.clone()).send())? {
                JobStatus::Done { checkpoints } => return Ok(checkpoints),
                JobStatus::Failed { message } => return Err(ClassifierError::Backend(message)),
                JobStatus::Running => std::thread::sleep(self.poll_interval),
            }
        }
        Err(ClassifierError::Backend(format!(
            "job {} did not finish",
            job.job_id
        )))
    }

    fn predict(
        &self,
        checkpoint: &Checkpoint,
        items: &[Example<'_>],
    ) -> Result<Predictions, ClassifierError> {
        #[derive(Deserialize)]
        struct Out {
            probabilities: Vec<f64>,
        }
        let body = RemotePredictRequest {
            checkpoint_id: &checkpoint.id,
            texts: items.iter().map(|e| e.text).collect(),
        };
        let out: Out = Self::json(self.client.post(self.url("predict")?).json(&body).send())?;
        if out.probabilities.len() != items.len() {
            return Err(ClassifierError::Backend(format!(
                "asked for {} probabilities, got {}",
                items.len(),
                out.probabilities.len()
            )));
        }
        Ok(items
            .iter()
            .map(|e| e.id.clone())
            .zip(out.probabilities)
            .collect())
    }
}
