//! FCN and RFCN assembled from layer blocks.
//!
//! Both share the same contracting path, bottleneck convolutions and
//! expanding path; RFCN additionally threads a convolutional GRU between the
//! two bottleneck convolutions, carrying state from the base slice to the
//! apex slice.

mod checkpoint;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION,
};
pub use params::{ParamKind, ParameterSet};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{Binding, BnConfig, Conv, ConvBlock, ConvGruCell, ConvUnit, LayerError, Mode, UpConv};
use crate::mask::Mask;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Number of output classes: background and left ventricle.
pub const CLASSES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("input size {height}x{width} is not divisible by {divisor} (2^depth)")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter `{name}` is incompatible: {detail}")]
    Incompatible { name: String, detail: String },
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Layer(LayerError::Tensor(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fcn,
    Rfcn,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Fcn => "fcn",
            Variant::Rfcn => "rfcn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Number of pooling stages.
    pub depth: usize,
    /// Channels of the first contracting block; doubled per stage.
    pub base_channels: usize,
    /// Channel width of the bottleneck (and of the GRU state).
    pub bottleneck_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelSpec {
    /// D=3, c0=32, 256-channel bottleneck on 64x64 slices.
    pub fn rfcn_default() -> Self {
        Self {
            variant: Variant::Rfcn,
            depth: 3,
            base_channels: 32,
            bottleneck_channels: 256,
            height: 64,
            width: 64,
        }
    }

    pub fn fcn_default() -> Self {
        Self {
            variant: Variant::Fcn,
            ..Self::rfcn_default()
        }
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        Self { variant, ..self }
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.height / self.divisor(), self.width / self.divisor())
    }

    /// Output channels of contracting block `i`.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth == 0 || self.depth > 8 {
            return Err(ModelError::InvalidSpec(format!("depth {} outside 1..=8", self.depth)));
        }
        if self.base_channels == 0 || self.bottleneck_channels == 0 {
            return Err(ModelError::InvalidSpec("channel counts must be positive".into()));
        }
        self.check_input(self.height, self.width)
    }

    fn check_input(&self, height: usize, width: usize) -> Result<(), ModelError> {
        let d = self.divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(ModelError::Indivisible {
                height,
                width,
                divisor: d,
            });
        }
        Ok(())
    }

    /// Recovers the architecture from parameter names and shapes. The input
    /// size cannot be read off an FCN, so it is supplied by the caller.
    pub fn infer<T: Scalar>(params: &ParameterSet<T>, height: usize, width: usize) -> Result<Self, ModelError> {
        let shape_of = |name: &str| {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| ModelError::InvalidSpec(format!("parameter `{name}` is missing")))
        };
        let depth = (0..)
            .take_while(|i| params.contains(&format!("enc{i}.conv1.weight")))
            .count();
        let base_channels = shape_of("enc0.conv1.weight")?[0];
        let bottleneck_channels = shape_of("bottleneck.conv_in.weight")?[0];
        let variant = if params.contains("gru.h0") {
            Variant::Rfcn
        } else {
            Variant::Fcn
        };
        let spec = Self {
            variant,
            depth,
            base_channels,
            bottleneck_channels,
            height,
            width,
        };
        spec.validate()?;
        spec.check_params(params)?;
        Ok(spec)
    }

    /// Verifies that `params` has exactly the names and shapes this spec
    /// declares, naming the first offending parameter otherwise.
    pub fn check_params<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<(), ModelError> {
        let reference = ParameterSet::<f32>::init(self, 0);
        for (name, t) in reference.iter() {
            match params.get(name) {
                None => {
                    return Err(ModelError::Incompatible {
                        name: name.into(),
                        detail: "missing".into(),
                    })
                }
                Some(p) if p.shape() != t.shape() => {
                    return Err(ModelError::Incompatible {
                        name: name.into(),
                        detail: format!("shape {:?}, expected {:?}", p.shape(), t.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(name) = params.names().find(|n| !reference.contains(n)) {
            return Err(ModelError::Incompatible {
                name: name.into(),
                detail: format!("not part of a {} spec", self.variant),
            });
        }
        Ok(())
    }
}

/// What the bottleneck recurrence computes. Anything other than `Gru` is a
/// diagnostic ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recurrence {
    /// `h_s = GRU(h_{s-1}, e_s)`; FCN treats this as `Identity`.
    Gru,
    /// `h_s = e_s`, i.e. the FCN forward pass.
    Identity,
    /// `h_s = h0` for every slice.
    Initial,
}

impl<T: Scalar> ParameterSet<T> {
    /// Fresh parameters for `spec`: kernels uniform in `±sqrt(6/(fan_in+fan_out))`,
    /// biases 0, batch-norm scale 1 / shift 0, h0 = 0. Deterministic in `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let net = Network::new(*spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParameterSet::new();
        for block in &net.encoder {
            block.init_params(&mut set, &mut rng);
        }
        net.bottleneck_in.init_params(&mut set, &mut rng);
        if let Some(gru) = &net.gru {
            gru.init_params(&mut set, &mut rng);
        }
        net.bottleneck_out.init_params(&mut set, &mut rng);
        for (up, block) in &net.decoder {
            up.init_params(&mut set, &mut rng);
            block.init_params(&mut set, &mut rng);
        }
        net.head.init_params(&mut set, &mut rng);
        set
    }
}

/// Names copied from a source parameter set and names left at their fresh
/// initialization by [`warm_start`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarmStart {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Initializes parameters for `spec` and overwrites every name shared with
/// `source` (e.g. an FCN checkpoint feeding an RFCN). Names in `source` that
/// `spec` does not declare, or shared names with different shapes, are errors.
pub fn warm_start(
    spec: &ModelSpec,
    source: &ParameterSet<f32>,
    seed: u64,
) -> Result<(ParameterSet<f32>, WarmStart), ModelError> {
    let mut params = ParameterSet::<f32>::init(spec, seed);
    if let Some(name) = source.names().find(|n| !params.contains(n)) {
        return Err(ModelError::Incompatible {
            name: name.into(),
            detail: format!("not part of a {} spec", spec.variant),
        });
    }
    let mut report = WarmStart {
        copied: Vec::new(),
        fresh: Vec::new(),
    };
    for (name, t) in params.iter_mut() {
        match source.get(name) {
            Some(s) if s.shape() == t.shape() => {
                *t = s.clone();
                report.copied.push(name.to_string());
            }
            Some(s) => {
                return Err(ModelError::Incompatible {
                    name: name.into(),
                    detail: format!("shape {:?}, expected {:?}", s.shape(), t.shape()),
                })
            }
            None => report.fresh.push(name.to_string()),
        }
    }
    Ok((params, report))
}

/// Layer layout of one FCN/RFCN instance.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ModelSpec,
    encoder: Vec<ConvBlock>,
    bottleneck_in: ConvUnit,
    gru: Option<ConvGruCell>,
    bottleneck_out: ConvUnit,
    decoder: Vec<(UpConv, ConvBlock)>,
    head: Conv,
    bn: BnConfig,
}

impl Network {
    pub fn new(spec: ModelSpec) -> Self {
        let depth = spec.depth;
        let encoder = (0..depth)
            .map(|i| {
                let cin = if i == 0 { 1 } else { spec.stage_channels(i - 1) };
                ConvBlock::new(&format!("enc{i}"), cin, spec.stage_channels(i))
            })
            .collect();
        let deepest = spec.stage_channels(depth - 1);
        let b = spec.bottleneck_channels;
        let bottleneck_in = ConvUnit::new("bottleneck.conv_in".into(), "bottleneck.bn_in".into(), deepest, b);
        let bottleneck_out = ConvUnit::new("bottleneck.conv_out".into(), "bottleneck.bn_out".into(), b, b);
        let gru = (spec.variant == Variant::Rfcn).then(|| {
            let (h, w) = spec.bottleneck_size();
            ConvGruCell::new("gru", b, h, w)
        });
        let decoder = (0..depth)
            .rev()
            .map(|i| {
                let cin = if i == depth - 1 { b } else { spec.stage_channels(i + 1) };
                let c = spec.stage_channels(i);
                (
                    UpConv::new(format!("dec{i}.up"), cin, c),
                    ConvBlock::new(&format!("dec{i}"), 2 * c, c),
                )
            })
            .collect();
        let head = Conv::new("head", spec.base_channels, CLASSES, 1, 0);
        Self {
            spec,
            encoder,
            bottleneck_in,
            gru,
            bottleneck_out,
            decoder,
            head,
            bn: BnConfig::default(),
        }
    }

    pub fn with_bn(mut self, bn: BnConfig) -> Self {
        self.bn = bn;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Forward pass over a stack `[S, 1, H, W]` (slice axis = batch axis,
    /// base first) producing logits `[S, 2, H, W]`.
    pub fn forward_bound<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParameterSet<T>,
        bound: &HashMap<String, Var>,
        input: Var,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        self.forward_with(tape, params, bound, input, mode, Recurrence::Gru)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParameterSet<T>,
        bound: &HashMap<String, Var>,
        input: Var,
        mode: Mode,
        recurrence: Recurrence,
    ) -> Result<Var, ModelError> {
        match tape.shape(input) {
            &[_, 1, h, w] => self.spec.check_input(h, w)?,
            s => {
                return Err(TensorError::Shape {
                    op: "forward_stack",
                    detail: format!("expected [S, 1, H, W], got {s:?}"),
                }
                .into())
            }
        }
        let mut ctx = Binding {
            params,
            vars: bound,
            mode,
            bn: self.bn,
        };
        let mut x = input;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(tape, &mut ctx, x)?;
            skips.push(x);
            x = tape.maxpool2x2(x)?;
        }
        let e = self.bottleneck_in.forward(tape, &mut ctx, x)?;
        let h = match (&self.gru, recurrence) {
            (Some(gru), Recurrence::Gru) => gru.unroll(tape, &ctx, e)?,
            (_, Recurrence::Gru | Recurrence::Identity) => e,
            (gru, Recurrence::Initial) => {
                let gru = gru
                    .as_ref()
                    .ok_or_else(|| ModelError::InvalidSpec("an FCN has no initial recurrent state".into()))?;
                let h0 = ctx.var(&format!("{}.h0", gru.name))?;
                let slices = tape.shape(e)[0];
                tape.expand_batch(h0, slices)?
            }
        };
        let mut y = self.bottleneck_out.forward(tape, &mut ctx, h)?;
        for (up, block) in &self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            let u = up.forward(tape, &ctx, y)?;
            let cat = tape.concat_channels(u, skip)?;
            y = block.forward(tape, &mut ctx, cat)?;
        }
        Ok(self.head.forward(tape, &ctx, y)?)
    }

    /// Logits `[S, 2, H, W]` for a stack of images `[S, 1, H, W]`.
    pub fn forward_stack(
        &self,
        params: &mut ParameterSet<f32>,
        images: &Tensor<f32>,
        mode: Mode,
    ) -> Result<Tensor<f32>, ModelError> {
        self.forward_stack_with(params, images, mode, Recurrence::Gru)
    }

    pub fn forward_stack_with(
        &self,
        params: &mut ParameterSet<f32>,
        images: &Tensor<f32>,
        mode: Mode,
        recurrence: Recurrence,
    ) -> Result<Tensor<f32>, ModelError> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let logits = self.forward_with(&mut tape, params, &bound, x, mode, recurrence)?;
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode segmentation: a pixel is LV iff its LV logit strictly
    /// exceeds its background logit.
    pub fn predict_masks(&self, params: &ParameterSet<f32>, images: &Tensor<f32>) -> Result<Vec<Mask>, ModelError> {
        let mut local = params.clone();
        let logits = self.forward_stack(&mut local, images, Mode::Eval)?;
        Ok(masks_from_logits(&logits))
    }
}

/// Per-pixel argmax over two classes; exact ties resolve to background.
pub fn masks_from_logits(logits: &Tensor<f32>) -> Vec<Mask> {
    let &[s, k, h, w] = logits.shape() else {
        panic!("logits must be [S, K, H, W]");
    };
    assert_eq!(k, CLASSES, "binary segmentation expects two classes");
    let plane = h * w;
    (0..s)
        .map(|i| {
            let bg = &logits.data()[(i * k) * plane..(i * k + 1) * plane];
            let lv = &logits.data()[(i * k + 1) * plane..(i * k + 2) * plane];
            Mask::new(h, w, bg.iter().zip(lv).map(|(b, l)| l > b).collect())
        })
        .collect()
}
