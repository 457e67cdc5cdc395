//! Parametered building blocks: convolution units with batch normalization,
//! the two-convolution block of the contracting/expanding paths, the
//! fractional-stride upsampler, and the convolutional GRU cell.
//!
//! Layers are descriptors: they know their parameter names and shapes and
//! read the actual tensors from a [`Binding`], so one [`ParameterSet`] can
//! drive many forward passes.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParameterSet;
use crate::tensor::{BnMode, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter `{0}` is not bound")]
    MissingParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BnConfig {
    /// Weight on the old running estimate.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

/// Parameters of one forward pass: the tensors (mutable for running-stat
/// updates) and their handles on the tape.
pub struct Binding<'a, T: Scalar> {
    pub params: &'a mut ParameterSet<T>,
    pub vars: &'a HashMap<String, Var>,
    pub mode: Mode,
    pub bn: BnConfig,
}

impl<T: Scalar> Binding<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var, LayerError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| LayerError::MissingParameter(name.to_string()))
    }
}

/// Uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let a = glorot_bound(fan_in, fan_out);
    Tensor::uniform(shape, -a, a, rng)
}

/// Square convolution with bias, stride 1.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            padding,
        }
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, set: &mut ParameterSet<T>, rng: &mut R) {
        let k2 = self.kernel * self.kernel;
        set.insert(
            format!("{}.weight", self.name),
            glorot(
                &[self.out_channels, self.in_channels, self.kernel, self.kernel],
                self.in_channels * k2,
                self.out_channels * k2,
                rng,
            ),
        );
        set.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_channels]));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &Binding<T>, x: Var) -> Result<Var, LayerError> {
        let w = ctx.var(&format!("{}.weight", self.name))?;
        let b = ctx.var(&format!("{}.bias", self.name))?;
        Ok(tape.conv2d(x, w, b, 1, self.padding)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init_params<T: Scalar>(&self, set: &mut ParameterSet<T>) {
        let c = self.channels;
        set.insert(format!("{}.gamma", self.name), Tensor::ones(&[c]));
        set.insert(format!("{}.beta", self.name), Tensor::zeros(&[c]));
        set.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[c]));
        set.insert(format!("{}.running_var", self.name), Tensor::ones(&[c]));
    }

    /// Train mode normalizes with batch statistics over (N, H, W) and folds
    /// them into the running estimates; eval mode uses the running estimates.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &mut Binding<T>, x: Var) -> Result<Var, LayerError> {
        let gamma = ctx.var(&format!("{}.gamma", self.name))?;
        let beta = ctx.var(&format!("{}.beta", self.name))?;
        let mean_name = format!("{}.running_mean", self.name);
        let var_name = format!("{}.running_var", self.name);
        let running = |ctx: &Binding<T>, name: &str| -> Result<Vec<T>, LayerError> {
            ctx.params
                .get(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| LayerError::MissingParameter(name.to_string()))
        };
        let eps = T::from_f64(ctx.bn.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, &BnMode::Train { eps })?;
                let (batch_mean, batch_var) = stats.expect("train mode returns batch statistics");
                let m = T::from_f64(ctx.bn.momentum);
                for (name, batch) in [(&mean_name, batch_mean), (&var_name, batch_var)] {
                    let t = ctx
                        .params
                        .get_mut(name)
                        .ok_or_else(|| LayerError::MissingParameter(name.clone()))?;
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = m * *r + (T::one() - m) * b;
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let mode = BnMode::Eval {
                    mean: running(ctx, &mean_name)?,
                    var: running(ctx, &var_name)?,
                    eps,
                };
                Ok(tape.batch_norm(x, gamma, beta, &mode)?.0)
            }
        }
    }
}

/// conv -> batch norm -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvUnit {
    pub fn new(conv_name: String, bn_name: String, in_channels: usize, out_channels: usize) -> Self {
        Self {
            conv: Conv::new(conv_name, in_channels, out_channels, 3, 1),
            bn: BatchNorm::new(bn_name, out_channels),
        }
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, set: &mut ParameterSet<T>, rng: &mut R) {
        self.conv.init_params(set, rng);
        self.bn.init_params(set);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &mut Binding<T>, x: Var) -> Result<Var, LayerError> {
        let y = self.conv.forward(tape, ctx, x)?;
        let y = self.bn.forward(tape, ctx, y)?;
        Ok(tape.relu(y))
    }
}

/// Two same-padded 3x3 convolution units; spatial size is preserved.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub first: ConvUnit,
    pub second: ConvUnit,
}

impl ConvBlock {
    pub fn new(name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self {
            first: ConvUnit::new(
                format!("{name}.conv1"),
                format!("{name}.bn1"),
                in_channels,
                out_channels,
            ),
            second: ConvUnit::new(
                format!("{name}.conv2"),
                format!("{name}.bn2"),
                out_channels,
                out_channels,
            ),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.second.conv.out_channels
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, set: &mut ParameterSet<T>, rng: &mut R) {
        self.first.init_params(set, rng);
        self.second.init_params(set, rng);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &mut Binding<T>, x: Var) -> Result<Var, LayerError> {
        let y = self.first.forward(tape, ctx, x)?;
        self.second.forward(tape, ctx, y)
    }
}

/// Stride-2 transposed convolution with a 2x2 kernel.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UpConv {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
        }
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, set: &mut ParameterSet<T>, rng: &mut R) {
        set.insert(
            format!("{}.weight", self.name),
            glorot(
                &[self.in_channels, self.out_channels, 2, 2],
                self.in_channels * 4,
                self.out_channels * 4,
                rng,
            ),
        );
        set.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_channels]));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &Binding<T>, x: Var) -> Result<Var, LayerError> {
        let w = ctx.var(&format!("{}.weight", self.name))?;
        let b = ctx.var(&format!("{}.bias", self.name))?;
        Ok(tape.transposed_conv2d(x, w, b)?)
    }
}

/// Tape handles of a [`ConvGruCell`]'s parameters.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub wr: Var,
    pub ur: Var,
    pub wh: Var,
    pub uh: Var,
    pub bz: Var,
    pub br: Var,
    pub bh: Var,
    pub h0: Var,
    zero_bias: Var,
}

/// Convolutional GRU with 3x3 same-padded gate convolutions:
///
/// ```text
/// z  = sigmoid(Wz*e + Uz*h + bz)
/// r  = sigmoid(Wr*e + Ur*h + br)
/// h~ = tanh(Wh*e + Uh*(r . h) + bh)
/// h' = (1 - z) . h + z . h~
/// ```
#[derive(Debug, Clone)]
pub struct ConvGruCell {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

const GRU_KERNELS: [&str; 6] = ["wz", "uz", "wr", "ur", "wh", "uh"];
const GRU_BIASES: [&str; 3] = ["z", "r", "h"];

impl ConvGruCell {
    pub fn new(name: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            height,
            width,
        }
    }

    /// Gate kernels get uniform fan-based values, biases and h0 start at zero.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, set: &mut ParameterSet<T>, rng: &mut R) {
        let c = self.channels;
        for k in GRU_KERNELS {
            set.insert(
                format!("{}.{k}.weight", self.name),
                glorot(&[c, c, 3, 3], c * 9, c * 9, rng),
            );
        }
        for b in GRU_BIASES {
            set.insert(format!("{}.{b}.bias", self.name), Tensor::zeros(&[c]));
        }
        set.insert(
            format!("{}.h0", self.name),
            Tensor::zeros(&[c, self.height, self.width]),
        );
    }

    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &Binding<T>) -> Result<GruVars, LayerError> {
        let kernel = |k: &str| ctx.var(&format!("{}.{k}.weight", self.name));
        let bias = |b: &str| ctx.var(&format!("{}.{b}.bias", self.name));
        let vars = GruVars {
            wz: kernel("wz")?,
            uz: kernel("uz")?,
            wr: kernel("wr")?,
            ur: kernel("ur")?,
            wh: kernel("wh")?,
            uh: kernel("uh")?,
            bz: bias("z")?,
            br: bias("r")?,
            bh: bias("h")?,
            h0: ctx.var(&format!("{}.h0", self.name))?,
            zero_bias: tape.constant(Tensor::zeros(&[self.channels])),
        };
        let h0_shape = tape.shape(vars.h0);
        if h0_shape != [self.channels, self.height, self.width] {
            return Err(TensorError::Shape {
                op: "conv_gru",
                detail: format!(
                    "h0 has shape {h0_shape:?}, expected [{}, {}, {}]",
                    self.channels, self.height, self.width
                ),
            }
            .into());
        }
        Ok(vars)
    }

    /// One recurrence step `h_s = phi(h_{s-1}, e_s)`.
    pub fn step<T: Scalar>(tape: &mut Tape<T>, p: &GruVars, e: Var, h_prev: Var) -> Result<Var, LayerError> {
        if tape.shape(e) != tape.shape(h_prev) {
            return Err(TensorError::Shape {
                op: "conv_gru",
                detail: format!(
                    "input {:?} and state {:?} shapes differ",
                    tape.shape(e),
                    tape.shape(h_prev)
                ),
            }
            .into());
        }
        let gate = |tape: &mut Tape<T>, w: Var, u: Var, b: Var, h: Var| -> Result<Var, TensorError> {
            let a = tape.conv2d(e, w, b, 1, 1)?;
            let c = tape.conv2d(h, u, p.zero_bias, 1, 1)?;
            tape.add(a, c)
        };
        let z = gate(tape, p.wz, p.uz, p.bz, h_prev)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, p.wr, p.ur, p.br, h_prev)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h_prev)?;
        let cand = gate(tape, p.wh, p.uh, p.bh, rh)?;
        let cand = tape.tanh(cand);
        // (1 - z) h + z h~  ==  h + z (h~ - h)
        let delta = tape.sub(cand, h_prev)?;
        let moved = tape.mul(z, delta)?;
        Ok(tape.add(h_prev, moved)?)
    }

    /// Runs the cell over the batch axis of `e` (slice order), starting from
    /// h0, and returns the stacked states.
    pub fn unroll<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &Binding<T>, e: Var) -> Result<Var, LayerError> {
        let p = self.vars(tape, ctx)?;
        let slices = tape.shape(e)[0];
        let mut h = tape.expand_batch(p.h0, 1)?;
        let mut states = Vec::with_capacity(slices);
        for s in 0..slices {
            let es = tape.select_batch(e, s)?;
            h = Self::step(tape, &p, es, h)?;
            states.push(h);
        }
        Ok(tape.stack_batch(&states)?)
    }
}
