//! Training loop: one stack per optimizer step, seeded shuffling and
//! augmentation, per-epoch validation and best-validation selection.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment, AugmentationSpec, SliceStack};
use crate::layers::Mode;
use crate::metrics::dice;
use crate::model::{ModelError, Network, ParameterSet};
use crate::optim::{Hyperparams, OptimError, OptimizerKind, OptimizerState};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("stack `{0}` has no ground-truth masks")]
    Unlabelled(String),
    #[error("loss became {loss} at epoch {epoch}, step {step}")]
    NonFinite { epoch: u32, step: usize, loss: f32 },
    #[error("no training stacks")]
    NoData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub hyper: Hyperparams,
    pub augmentation: AugmentationSpec,
    /// Passes over every training stack per epoch, each with a fresh transform.
    pub augment_copies: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            hyper: Hyperparams::default(),
            augmentation: AugmentationSpec::default(),
            augment_copies: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean per-slice Dice on the validation stacks.
    pub val_dice: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_dice";

    pub fn csv(&self) -> String {
        let val = self.val_dice.map(|d| format!("{d:.6}")).unwrap_or_default();
        format!("{},{:.8},{:.8},{}", self.epoch, self.lr, self.train_loss, val)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the best validation Dice (the last
    /// epoch without validation data; the initialization after 0 epochs).
    pub best: ParameterSet<f32>,
    pub best_epoch: u32,
    pub last: ParameterSet<f32>,
    pub logs: Vec<EpochLog>,
}

/// Mean per-slice Dice of eval-mode predictions against ground truth.
pub fn mean_dice(net: &Network, params: &ParameterSet<f32>, stacks: &[SliceStack]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for st in stacks {
        let truth = st.masks().ok_or_else(|| TrainError::Unlabelled(st.subject.clone()))?;
        let pred = net.predict_masks(params, &st.to_tensor())?;
        for (p, t) in pred.iter().zip(truth) {
            total += dice(p, t).expect("prediction has the stack's shape");
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Runs one optimizer step on `stack` and returns the loss before the update.
pub fn train_step(
    net: &Network,
    params: &mut ParameterSet<f32>,
    opt: &mut OptimizerState,
    stack: &SliceStack,
    lr: f64,
) -> Result<f32, TrainError> {
    let targets = stack
        .targets()
        .ok_or_else(|| TrainError::Unlabelled(stack.subject.clone()))?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(stack.to_tensor());
    let logits = net.forward_bound(&mut tape, params, &bound, x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(logits, &targets).map_err(ModelError::from)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss).map_err(ModelError::from)?;
    params.collect_grads(&tape, &bound);
    opt.step(params, lr)?;
    params.clear_grads();
    Ok(value)
}

/// Trains starting from `init`. `on_epoch` sees every epoch's log and
/// the current parameters and may stop training early.
pub fn train(
    net: &Network,
    init: ParameterSet<f32>,
    train_set: &[SliceStack],
    validation: &[SliceStack],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ParameterSet<f32>) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::NoData);
    }
    if let Some(s) = train_set.iter().chain(validation).find(|s| s.masks().is_none()) {
        return Err(TrainError::Unlabelled(s.subject.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.hyper);
    let mut params = init;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_dice = f64::NEG_INFINITY;
    let mut logs = Vec::with_capacity(cfg.epochs as usize);
    let copies = cfg.augment_copies.max(1);

    for epoch in 0..cfg.epochs {
        let lr = cfg.hyper.lr(epoch);
        let mut order: Vec<usize> = (0..train_set.len() * copies).map(|i| i % train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (step, &i) in order.iter().enumerate() {
            let stack = augment(&train_set[i], &cfg.augmentation, &mut rng);
            let loss = train_step(net, &mut params, &mut opt, &stack, lr)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    step,
                    loss,
                });
            }
            loss_sum += loss as f64;
        }
        let val_dice = if validation.is_empty() {
            None
        } else {
            Some(mean_dice(net, &params, validation)?)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / order.len() as f64,
            val_dice,
        };
        logs.push(log);
        if val_dice.is_none_or(|d| d > best_dice) {
            best_dice = val_dice.unwrap_or(best_dice);
            best = params.clone();
            best_epoch = epoch + 1;
        }
        if on_epoch(&log, &params).is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        logs,
    })
}
