//! Next-token pretraining and the compression-style proxy score.

use crate::data::{LabeledExample, SplitSet};
use crate::error::{Error, Result};
use crate::model::{self, BackboneConfig, BackboneParams, Mode};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::StreamKey;
use crate::tensor::{Real, Tape};
use crate::vocab::TokenId;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Weight on the parameter-count penalty in [`proxy_score`].
pub const PROXY_ALPHA: f64 = 1e-6;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Root of the init, shuffle and dropout streams.
    pub seed: u64,
}

impl TrainConfig {
    /// AdamW at lr 3e-4, weight decay 0.01, 12 epochs of batch 64.
    pub fn full(seed: u64) -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            epochs: 12,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }

    pub fn smoke(seed: u64) -> Self {
        TrainConfig {
            epochs: 4,
            ..Self::full(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn stream(&self) -> StreamKey {
        StreamKey::root(self.seed).child("pretrain")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean validation loss after each epoch, in nats.
    pub val_losses: Vec<f64>,
    /// Mean training loss of each epoch, in nats.
    pub train_losses: Vec<f64>,
    pub steps: u64,
    /// Checksum of the final parameters.
    pub final_checksum: String,
}

impl TrainTrace {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.val_losses.iter().copied().reduce(f64::min)
    }
}

/// `S = -min_t L_val(t) - alpha * ln(max(2, n_params))`.
pub fn proxy_score(trace: &TrainTrace, n_params: usize) -> Result<f64> {
    let best = trace
        .best_val_loss()
        .ok_or_else(|| Error::Config("proxy score needs at least one validation loss".into()))?;
    Ok(-best - PROXY_ALPHA * (n_params.max(2) as f64).ln())
}

/// Mean next-token loss over `examples` with dropout off.
pub fn evaluate_loss<T: Real>(params: &BackboneParams<T>, examples: &[LabeledExample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch: Vec<_> = chunk.iter().map(|e| e.tokens).collect();
        let mut tape = Tape::new();
        let fwd = model::forward_tape(&mut tape, params, &batch, Mode::Eval, true)?;
        let logits = fwd.logits.expect("requested");
        let loss = tape.cross_entropy(logits, &model::next_token_targets(&batch))?;
        total += tape.value(loss).data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// One AdamW step on `batch`; returns the pre-update batch loss.
pub fn train_step<T: Real, S: AsRef<[TokenId]>>(
    params: &mut BackboneParams<T>,
    opt: &mut AdamW<T>,
    batch: &[S],
    dropout: &StreamKey,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = model::forward_tape(&mut tape, params, batch, Mode::Train(dropout), true)?;
    let logits = fwd.logits.expect("requested");
    let loss = tape.cross_entropy(logits, &model::next_token_targets(batch))?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .map(|v| tape.grad(*v).ok_or_else(|| Error::shape("train_step", "parameter received no gradient")))
        .collect::<Result<Vec<_>>>()?;
    let mut tensors = params.tensors_mut();
    opt.step(&mut tensors, &grads)?;
    Ok(value)
}

pub fn new_optimizer<T: Real>(params: &BackboneParams<T>, config: &TrainConfig) -> Result<AdamW<T>> {
    let specs = model::param_specs(&params.config);
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    AdamW::new(config.optimizer(), &sizes, specs.iter().map(|s| s.kind.decays()).collect())
}

/// Initializes a backbone from `train.seed` and trains it on `splits.train`,
/// scoring the validation split after every epoch.
pub fn pretrain(
    splits: &SplitSet,
    backbone: &BackboneConfig,
    train: &TrainConfig,
) -> Result<(BackboneParams<f32>, TrainTrace)> {
    train.validate()?;
    let key = train.stream();
    let mut params = model::init_backbone::<f32>(backbone, key.child("init").derive_seed())?;
    pretrain_from(&mut params, splits, train).map(|trace| (params, trace))
}

/// Trains existing parameters in place.
pub fn pretrain_from(params: &mut BackboneParams<f32>, splits: &SplitSet, train: &TrainConfig) -> Result<TrainTrace> {
    train.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Config("pretraining needs non-empty train and val splits".into()));
    }
    let key = train.stream();
    let mut opt = new_optimizer(params, train)?;
    let mut trace = TrainTrace {
        val_losses: Vec::with_capacity(train.epochs),
        train_losses: Vec::with_capacity(train.epochs),
        steps: 0,
        final_checksum: String::new(),
    };
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut key.child("shuffle").child(epoch).rng());
        let mut total = 0.0;
        for (step, idx) in order.chunks(train.batch_size).enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| splits.train[i].tokens).collect();
            let dropout = key.child("dropout").child(trace.steps);
            let loss = train_step(params, &mut opt, &batch, &dropout)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss });
            }
            total += loss * batch.len() as f64;
            trace.steps += 1;
        }
        let train_loss = total / splits.train.len() as f64;
        let val_loss = evaluate_loss(params, &splits.val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: usize::MAX,
                loss: val_loss,
            });
        }
        log::info!("epoch {}/{}: train {train_loss:.4} val {val_loss:.4}", epoch + 1, train.epochs);
        trace.train_losses.push(train_loss);
        trace.val_losses.push(val_loss);
    }
    trace.final_checksum = params.checksum();
    Ok(trace)
}
