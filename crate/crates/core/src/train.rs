//! Multi-task training with negative sampling.
//!
//! Every epoch draws, per record and active task, one positive from the
//! task's answer set and `n_neg` negatives outside it. The loss of a task
//! is binary cross-entropy averaged over its `1 + n_neg` terms; task losses
//! are combined with the task weights and averaged over the batch.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, AutodiffError, Gradients, Tape, Var};
use crate::dataset::Dataset;
use crate::eval::{evaluate, EvalError, TargetMode};
use crate::kg::EntityId;
use crate::model::{RecModel, ModelConfig, ModelError, Task, Variant};
use crate::query::RecInstance;
use crate::scalar::Scalar;
use crate::sets::IdSet;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("answer set covers the whole item catalog; no negative exists")]
    DegenerateInstance,
    #[error("empty batch")]
    EmptyBatch,
    #[error("no training records")]
    NoRecords,
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite { what: &'static str, epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub experts: usize,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_neg: usize,
    /// Weights of the joint, requirement and preference losses.
    pub task_weights: [f64; 3],
    /// Validation rounds without improvement tolerated before stopping.
    pub patience: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            experts: 4,
            gamma: 12.0,
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            n_neg: 32,
            task_weights: [1.0, 1.0, 1.0],
            patience: 10,
            variant: Variant::Mtl,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { dim: self.dim, experts: self.experts, gamma: self.gamma, variant: self.variant }
    }

    /// Task weights after the variant's ablation.
    pub fn effective_weights(&self) -> [f64; 3] {
        self.variant.effective_weights(self.task_weights)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        match key {
            "d" => self.dim = num(key, value)?,
            "k" => self.experts = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "n_neg" => self.n_neg = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "variant" => self.variant = value.parse().map_err(|e: ModelError| e.to_string())?,
            "task_weights" => {
                let w: Vec<f64> = value.split(',').map(|x| num(key, x.trim())).collect::<Result<_, _>>()?;
                self.task_weights = w.try_into().map_err(|_| "task_weights needs three comma-separated numbers".to_owned())?;
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| TrainError::Config { line: i + 1, msg };
            let (k, v) = content.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{content}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model_config().validate()?;
        let bad = |msg: &str| Err(TrainError::Config { line: 0, msg: msg.to_owned() });
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.task_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("task weights must be non-negative");
        }
        if self.effective_weights().iter().all(|w| *w == 0.0) {
            return bad("at least one task weight must be positive");
        }
        Ok(())
    }
}

/// `n_neg` items outside `answers`: without replacement when enough exist,
/// with replacement otherwise.
pub fn sample_negatives<R: Rng>(answers: &IdSet, items: &IdSet, n_neg: usize, rng: &mut R) -> Result<Vec<EntityId>, TrainError> {
    if n_neg == 0 {
        return Ok(Vec::new());
    }
    let pool = items.difference(answers);
    if pool.is_empty() {
        return Err(TrainError::DegenerateInstance);
    }
    let pool = pool.as_slice();
    if pool.len() >= n_neg {
        Ok(pool.choose_multiple(rng, n_neg).copied().collect())
    } else {
        Ok((0..n_neg).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }
}

/// Targets for one record in one epoch; `None` for inactive tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<'a> {
    pub record: &'a RecInstance,
    pub targets: [Option<(EntityId, Vec<EntityId>)>; 3],
}

fn task_answers(rec: &RecInstance, task: Task) -> &IdSet {
    match task {
        Task::Joint => &rec.answers.joint,
        Task::Requirement => &rec.answers.requirement,
        Task::Preference => &rec.answers.preference,
    }
}

pub fn make_example<'a, R: Rng>(
    record: &'a RecInstance,
    items: &IdSet,
    n_neg: usize,
    weights: [f64; 3],
    rng: &mut R,
) -> Result<TrainExample<'a>, TrainError> {
    let mut targets: [Option<(EntityId, Vec<EntityId>)>; 3] = Default::default();
    for task in Task::ALL {
        if weights[task.index()] == 0.0 {
            continue;
        }
        let answers = task_answers(record, task);
        let Some(&pos) = answers.as_slice().choose(rng) else {
            continue;
        };
        targets[task.index()] = Some((pos, sample_negatives(answers, items, n_neg, rng)?));
    }
    Ok(TrainExample { record, targets })
}

/// Weighted multi-task loss of one example on `tape`.
pub fn example_loss<T: Scalar>(
    model: &RecModel<T>,
    tape: &mut Tape<'_, T>,
    ex: &TrainExample<'_>,
    weights: [f64; 3],
) -> Option<Var> {
    let qv = model.embed_queries(tape, ex.record.user, &ex.record.requirement);
    let experts = model.experts(tape, qv.joint);
    let mut terms = Vec::new();
    for task in Task::ALL {
        let Some((pos, negs)) = &ex.targets[task.index()] else {
            continue;
        };
        let q = model.task_embedding(tape, task, &qv, &experts);
        let logits: Vec<Var> = std::iter::once(pos).chain(negs).map(|&i| model.score_logit(tape, q, i)).collect();
        let stacked = tape.concat(&logits);
        let probs = tape.sigmoid(stacked);
        let mut labels = vec![T::zero(); logits.len()];
        labels[0] = T::one();
        let bce = tape.bce_loss(probs, &labels);
        terms.push(tape.scale(bce, T::lit(weights[task.index()])));
    }
    (!terms.is_empty()).then(|| tape.add_all(&terms))
}

/// Mean batch loss and its gradients. Examples are differentiated
/// independently (in parallel) and reduced in batch order.
pub fn compute_loss<T: Scalar>(
    model: &RecModel<T>,
    batch: &[TrainExample<'_>],
    weights: [f64; 3],
) -> Result<(T, Gradients<T>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let parts: Vec<Option<(T, Gradients<T>)>> = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(model.params());
            let loss = example_loss(model, &mut tape, ex, weights)?;
            let value = tape.value(loss).item();
            Some(tape.backward(loss).map(|g| (value, g)))
        })
        .map(|r| r.transpose())
        .collect::<Result<_, _>>()?;
    let mut total = T::zero();
    let mut grads = Gradients::zeros_like(model.params());
    for (v, g) in parts.into_iter().flatten() {
        total += v;
        grads.accumulate(&g);
    }
    let inv = T::one() / T::lit(batch.len() as f64);
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub loss: f64,
    /// Validation avg hit@20; absent when there are no validation records.
    pub val_hit20: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters with the best validation score (the last ones when there
    /// is no validation split).
    pub best: RecModel<T>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub last: RecModel<T>,
    pub log: Vec<LogEntry>,
}

/// Failure state kept for a diagnostic dump.
#[derive(Debug)]
pub struct TrainFailure<T> {
    pub error: TrainError,
    pub model: Option<RecModel<T>>,
    pub log: Vec<LogEntry>,
}

impl<T> From<TrainError> for TrainFailure<T> {
    fn from(error: TrainError) -> Self {
        Self { error, model: None, log: Vec::new() }
    }
}

/// Full training run. `on_epoch` sees every log entry as it is produced.
#[allow(clippy::result_large_err)]
pub fn train<T: Scalar>(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LogEntry),
) -> Result<TrainOutcome<T>, TrainFailure<T>> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(TrainError::NoRecords.into());
    }
    let model = RecModel::new(cfg.model_config(), ds.num_entities(), ds.num_relations(), ds.like_rel, cfg.seed)
        .map_err(TrainError::from)?;
    train_from(model, ds, cfg, &mut on_epoch)
}

/// Training starting from given parameters.
#[allow(clippy::result_large_err)]
pub fn train_from<T: Scalar>(
    mut model: RecModel<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&LogEntry),
) -> Result<TrainOutcome<T>, TrainFailure<T>> {
    cfg.validate()?;
    let weights = cfg.effective_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(model.params(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(RecModel<T>, usize, Option<f64>)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainExample<'_>> = chunk
                .iter()
                .map(|&i| make_example(&ds.train[i], &ds.items, cfg.n_neg, weights, &mut rng))
                .collect::<Result<_, _>>()
                .map_err(|e| TrainFailure { error: e, model: Some(model.clone()), log: log.clone() })?;
            let fail = |what, model: &RecModel<T>, log: &Vec<LogEntry>| TrainFailure {
                error: TrainError::NonFinite { what, epoch, batch: b + 1 },
                model: Some(model.clone()),
                log: log.clone(),
            };
            let (loss, grads) =
                compute_loss(&model, &batch, weights).map_err(|e| TrainFailure { error: e, model: None, log: log.clone() })?;
            if !loss.is_finite() {
                return Err(fail("loss", &model, &log));
            }
            if !grads.all_finite() {
                return Err(fail("gradient", &model, &log));
            }
            adam.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                return Err(fail("parameter", &model, &log));
            }
            epoch_loss += loss.as_f64();
            n_batches += 1;
        }

        let val_hit20 = if ds.valid.is_empty() {
            None
        } else {
            let report = evaluate(&model, &ds.items, &ds.valid, &[20], TargetMode::HardOnly)
                .map_err(|e| TrainFailure { error: e.into(), model: None, log: log.clone() })?;
            report.avg_hit(20)
        };
        let entry = LogEntry { epoch, loss: epoch_loss / n_batches as f64, val_hit20 };
        on_epoch(&entry);
        log.push(entry);

        match val_hit20 {
            None => best = Some((model.clone(), epoch, None)),
            Some(v) => {
                let improved = best.as_ref().is_none_or(|(_, _, b)| b.is_none_or(|b| v > b));
                if improved {
                    best = Some((model.clone(), epoch, Some(v)));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (best, best_epoch, best_val) = best.unwrap_or_else(|| (model.clone(), 0, None));
    Ok(TrainOutcome { best, best_epoch, best_val, last: model, log })
}
