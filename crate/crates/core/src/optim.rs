//! SGD with momentum, RMSProp and the exponential learning-rate schedule.
//!
//! Weight decay is an L2 term folded into the gradient and applies only to
//! parameters whose [`ParamKind`] is decayed (kernels and h0).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ParamKind, ParameterSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("optimizer buffer for `{name}` has {actual} values, parameter has {expected}")]
    BufferShape {
        name: String,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Momentum SGD, the FCN recipe.
    Sgd,
    /// RMSProp, the RFCN recipe.
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub lr0: f64,
    /// Fractional decay applied after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rms_decay: f64,
    pub eps: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            lr_decay: 0.03,
            momentum: 0.9,
            weight_decay: 5e-5,
            rms_decay: 0.9,
            eps: 1e-8,
        }
    }
}

impl Hyperparams {
    /// `lr0 * (1 - lr_decay)^epoch`.
    pub fn lr(&self, epoch: u32) -> f64 {
        self.lr0 * (1.0 - self.lr_decay).powi(epoch as i32)
    }
}

/// Learning rate of the default schedule, `0.01 * 0.97^epoch`.
pub fn lr_schedule(epoch: u32) -> f64 {
    Hyperparams::default().lr(epoch)
}

/// Per-parameter auxiliary buffers (velocity for SGD, squared-gradient
/// average for RMSProp), created lazily as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub hyper: Hyperparams,
    buffers: HashMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, hyper: Hyperparams) -> Self {
        Self {
            kind,
            hyper,
            buffers: HashMap::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&[f32]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    /// Applies one update with learning rate `lr` using the gradients stored
    /// on `params`.
    pub fn step(&mut self, params: &mut ParameterSet<f32>, lr: f64) -> Result<(), OptimError> {
        match self.kind {
            OptimizerKind::Sgd => sgd_momentum_step(params, self, lr),
            OptimizerKind::Rmsprop => rmsprop_step(params, self, lr),
        }
    }

    fn for_each_param(
        &mut self,
        params: &mut ParameterSet<f32>,
        mut update: impl FnMut(&mut [f32], &[f32], &mut [f32], f64),
    ) -> Result<(), OptimError> {
        // Validate everything first so a failed step leaves parameters untouched.
        for (name, t) in params.iter() {
            let kind = ParamKind::of(name);
            if !kind.trainable() {
                continue;
            }
            if t.grad().is_none() {
                return Err(OptimError::MissingGrad(name.to_string()));
            }
            if let Some(buf) = self.buffers.get(name) {
                if buf.len() != t.len() {
                    return Err(OptimError::BufferShape {
                        name: name.to_string(),
                        expected: t.len(),
                        actual: buf.len(),
                    });
                }
            }
        }
        for (name, t) in params.iter_mut() {
            let kind = ParamKind::of(name);
            if !kind.trainable() {
                continue;
            }
            let decay = if kind.decayed() { self.hyper.weight_decay } else { 0.0 };
            let buf = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; t.len()]);
            let grad = t.grad().expect("checked above").to_vec();
            update(t.data_mut(), &grad, buf, decay);
        }
        Ok(())
    }
}

/// `g = grad + λw; v = μv + g; w -= lr·v`.
pub fn sgd_momentum_step(
    params: &mut ParameterSet<f32>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), OptimError> {
    let mu = state.hyper.momentum;
    state.for_each_param(params, |w, grad, v, decay| {
        for ((w, &g), v) in w.iter_mut().zip(grad).zip(v.iter_mut()) {
            let g = g as f64 + decay * *w as f64;
            let vel = mu * *v as f64 + g;
            *v = vel as f32;
            *w = (*w as f64 - lr * vel) as f32;
        }
    })
}

/// `g = grad + λw; s = ρs + (1-ρ)g²; w -= lr·g/sqrt(s + ε)`.
pub fn rmsprop_step(params: &mut ParameterSet<f32>, state: &mut OptimizerState, lr: f64) -> Result<(), OptimError> {
    let (rho, eps) = (state.hyper.rms_decay, state.hyper.eps);
    state.for_each_param(params, |w, grad, s, decay| {
        for ((w, &g), s) in w.iter_mut().zip(grad).zip(s.iter_mut()) {
            let g = g as f64 + decay * *w as f64;
            let acc = rho * *s as f64 + (1.0 - rho) * g * g;
            *s = acc as f32;
            *w = (*w as f64 - lr * g / (acc + eps).sqrt()) as f32;
        }
    })
}
