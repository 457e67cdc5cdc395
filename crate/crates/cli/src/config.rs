//! Declarative run configuration, read from a JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rfcn_core::data::AugmentationSpec;
use rfcn_core::layers::BnConfig;
use rfcn_core::metrics::GC_THRESHOLD_MM;
use rfcn_core::train::TrainConfig;
use rfcn_core::{Hyperparams, ModelSpec, OptimizerKind, Variant};
use serde::{Deserialize, Serialize};

/// Architecture fields of a run. The input size comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelSpec::rfcn_default();
        Self {
            depth: d.depth,
            base_channels: d.base_channels,
            bottleneck_channels: d.bottleneck_channels,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, variant: Variant, height: usize, width: usize) -> ModelSpec {
        ModelSpec {
            variant,
            depth: self.depth,
            base_channels: self.base_channels,
            bottleneck_channels: self.bottleneck_channels,
            height,
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `None` picks SGD with momentum for FCN and RMSProp for RFCN.
    pub optimizer: Option<OptimizerKind>,
    pub hyper: Hyperparams,
    pub bn: BnConfig,
    pub epochs: u32,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    pub augment_copies: usize,
    /// Share of subjects held out for best-checkpoint selection.
    pub validation_fraction: f64,
    /// Stack directory, used when `--data` is not given.
    pub data: Option<PathBuf>,
    /// Output checkpoint, used when `--out` is not given.
    pub checkpoint: Option<PathBuf>,
    /// Warm-start checkpoint, used when `--init-from` is not given.
    pub init_from: Option<PathBuf>,
    pub gc_threshold_mm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            model: ModelConfig::default(),
            optimizer: None,
            hyper: train.hyper,
            bn: BnConfig::default(),
            epochs: train.epochs,
            seed: train.seed,
            augmentation: train.augmentation,
            augment_copies: train.augment_copies,
            validation_fraction: 0.1,
            data: None,
            checkpoint: None,
            init_from: None,
            gc_threshold_mm: GC_THRESHOLD_MM,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(
            (0.0..1.0).contains(&self.validation_fraction),
            "validation_fraction must lie in [0, 1), got {}",
            self.validation_fraction
        );
        anyhow::ensure!(self.augment_copies >= 1, "augment_copies must be at least 1");
        anyhow::ensure!(
            self.hyper.lr0 > 0.0 && self.hyper.lr0.is_finite(),
            "hyper.lr0 must be positive"
        );
        anyhow::ensure!(
            self.gc_threshold_mm > 0.0 && self.gc_threshold_mm.is_finite(),
            "gc_threshold_mm must be positive"
        );
        Ok(())
    }

    pub fn optimizer_for(&self, variant: Variant) -> OptimizerKind {
        self.optimizer.unwrap_or(match variant {
            Variant::Fcn => OptimizerKind::Sgd,
            Variant::Rfcn => OptimizerKind::Rmsprop,
        })
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            seed: self.seed,
            optimizer: self.optimizer_for(variant),
            hyper: self.hyper,
            augmentation: self.augmentation,
            augment_copies: self.augment_copies,
        }
    }
}
