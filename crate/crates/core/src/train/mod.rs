//! Multitask training: weighted cross-entropy, Adam, per-epoch validation
//! with best-checkpoint selection, and test-set evaluation.

pub mod ablation;
pub mod adam;
pub mod loss;
pub mod metrics;
pub mod report;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::synth::derive_seed;
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{init_params, loss_and_grad, predict, ForwardCtx, ModelConfig, Sample};
use crate::params::ModelParams;
use crate::N_TASKS;

use self::adam::{adam_step, AdamState};
use self::loss::pos_weights;
use self::metrics::Metrics;

pub use crate::model::AblationFlags;

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_DROPOUT: u64 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-task positive-class weights; computed from the training split as
    /// `n_negative / n_positive` when absent.
    pub pos_weight: Option<[f64; N_TASKS]>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale settings.
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            weight_decay: 1e-4,
            dropout: 0.1,
            epochs: 5,
            batch_size: 32,
            pos_weight: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings of the full-cohort experiments.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 1e-4,
            dropout: 0.2,
            epochs: 30,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if let Some(pw) = &self.pos_weight {
            if let Some(k) = pw.iter().position(|p| !(*p > 0.0 && p.is_finite())) {
                return Err(Error::Config(format!("pos_weight[{k}] must be positive")));
            }
        }
        Ok(())
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_auroc: Vec<Option<f64>>,
    pub val_mean_auroc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Test metrics of the best-validation parameters.
    pub test: Metrics,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Fills the data-dependent model dimensions from the dataset.
pub fn fit_model_dims(model: &ModelConfig, split: &DatasetSplit) -> ModelConfig {
    let mut m = model.clone();
    m.n_variables = split.stats.n_variables();
    m.static_dim = split.static_dim();
    if let Some(d) = split.note_dim() {
        m.note_dim = d;
    }
    m
}

pub struct PreparedSplit {
    pub model: ModelConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Tokenizes every split with the training normalization statistics.
pub fn prepare(split: &DatasetSplit, model: &ModelConfig, exec: Exec) -> Result<PreparedSplit> {
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Input("every split must contain at least one encounter".into()));
    }
    let model = fit_model_dims(model, split);
    model.validate()?;
    let conv = |records: &[crate::data::EncounterRecord]| {
        exec.try_map(records.len(), |i| {
            Sample::from_record(&records[i], &split.stats, &model)
        })
    };
    Ok(PreparedSplit {
        train: conv(&split.train)?,
        val: conv(&split.val)?,
        test: conv(&split.test)?,
        model,
    })
}

pub fn predict_all(
    params: &ModelParams,
    model: &ModelConfig,
    samples: &[Sample],
    exec: Exec,
) -> Result<Vec<[f64; N_TASKS]>> {
    exec.try_map(samples.len(), |i| predict(params, model, &samples[i]))
}

pub fn evaluate(params: &ModelParams, model: &ModelConfig, samples: &[Sample], exec: Exec) -> Result<Metrics> {
    let scores = predict_all(params, model, samples, exec)?;
    let labels: Vec<[u8; N_TASKS]> = samples.iter().map(|s| s.labels).collect();
    Ok(Metrics::from_scores(&scores, &labels))
}

/// Mean loss and gradient over a batch; per-sample work runs through `exec`
/// and is reduced in batch order.
pub fn batch_gradient(
    params: &ModelParams,
    model: &ModelConfig,
    batch: &[&Sample],
    pos_weight: &[f64],
    dropout: Option<(f64, &(dyn Fn(usize) -> u64 + Sync))>,
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    let parts = exec.try_map(batch.len(), |i| {
        let mut ctx = match dropout {
            Some((p, seed_of)) => ForwardCtx::train(p, seed_of(i)),
            None => ForwardCtx::eval(),
        };
        loss_and_grad(params, model, batch[i], pos_weight, &mut ctx)
    })?;
    let mut grad = vec![0.0; params.n_scalars()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        g.accumulate(&mut grad);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

pub fn train(split: &DatasetSplit, model: &ModelConfig, tc: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    tc.validate()?;
    let data = prepare(split, model, exec)?;
    train_prepared(&data, &split.stats, tc, exec)
}

pub fn train_prepared(
    data: &PreparedSplit,
    stats: &crate::tokenizer::NormStats,
    tc: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let model = &data.model;
    let labels: Vec<[u8; N_TASKS]> = data.train.iter().map(|s| s.labels).collect();
    let pos_weight = match tc.pos_weight {
        Some(p) => p.to_vec(),
        None => pos_weights(&labels),
    };
    let mut params = init_params(model, derive_seed(tc.seed, STREAM_INIT, 0))?;
    let mut adam = AdamState::new(params.n_scalars());
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, STREAM_SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let n_batches = order.len().div_ceil(tc.batch_size);
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let base = ((epoch as u64) << 40) | ((b as u64) << 20);
            let seed_of = |i: usize| derive_seed(tc.seed, STREAM_DROPOUT, base | i as u64);
            let (loss, grad) = batch_gradient(&params, model, &batch, &pos_weight, Some((tc.dropout, &seed_of)), exec)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            adam_step(&mut params, &grad, &mut adam, tc.lr, tc.weight_decay).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            epoch_loss += loss;
        }
        let val = evaluate(&params, model, &data.val, exec)?;
        let entry = EpochLog {
            epoch,
            loss: epoch_loss / n_batches as f64,
            val_auroc: val.auroc.clone(),
            val_mean_auroc: val.mean_auroc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, validation mean AUROC {:.4}",
            entry.loss,
            entry.val_mean_auroc
        );
        log.push(entry);
        let score = if val.mean_auroc.is_nan() {
            f64::NEG_INFINITY
        } else {
            val.mean_auroc
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let test = evaluate(&best_params, model, &data.test, exec)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: model.clone(),
            stats: stats.clone(),
            params: best_params,
        },
        test,
        best_epoch,
        log,
    })
}
