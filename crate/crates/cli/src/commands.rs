//! Implementations of the `rfcn` subcommands.

use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use rfcn_core::data::{load_stack, phantom_family, save_stack, split_dataset, PhantomConfig};
use rfcn_core::gradcheck::{layer_suite, network_check, CheckResult, SpecChoice, TOLERANCE};
use rfcn_core::metrics::{evaluate, StackPrediction};
use rfcn_core::model::{load_checkpoint, save_checkpoint, warm_start};
use rfcn_core::train::{train, EpochLog};
use rfcn_core::{ModelSpec, Network, ParameterSet, SliceStack, Variant};

use crate::config::RunConfig;
use crate::dataset::{load_dir, require_masks, write_manifest, Manifest};
use crate::pgm;

/// Field of view that `gen-phantom` keeps fixed: spacing is this over the size.
pub const PHANTOM_FOV_MM: f64 = 128.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomMode {
    Plain,
    Ambiguous,
}

#[derive(Debug, Clone, Args)]
pub struct GenPhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 9)]
    pub slices: usize,
    /// Image height and width in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = PhantomMode::Plain)]
    pub mode: PhantomMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn gen_phantom(args: &GenPhantomArgs) -> Result<Vec<PathBuf>> {
    ensure!(args.subjects > 0, "--subjects must be positive");
    ensure!(args.size > 0, "--size must be positive");
    let template = PhantomConfig {
        slices: args.slices,
        size: args.size,
        spacing_mm: PHANTOM_FOV_MM / args.size as f64,
        ambiguous: args.mode == PhantomMode::Ambiguous,
        ..PhantomConfig::default()
    };
    let stacks = phantom_family(&template, args.subjects, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut names = Vec::with_capacity(stacks.len());
    let mut paths = Vec::with_capacity(stacks.len());
    for stack in &stacks {
        let name = format!("{}.json", stack.subject);
        let path = args.out.join(&name);
        save_stack(stack, &path)?;
        names.push(name);
        paths.push(path);
    }
    write_manifest(&args.out, &Manifest::new(names))?;
    Ok(paths)
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON run configuration; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Where the best-validation checkpoint is written.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint whose matching parameters seed the model (FCN -> RFCN).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Fcn,
    Rfcn,
}

impl From<ModelKind> for Variant {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Fcn => Variant::Fcn,
            ModelKind::Rfcn => Variant::Rfcn,
        }
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Trains a model, streaming the CSV log to `log`. Everything that can be
/// checked up front is checked before the first step.
pub fn train_cmd(args: &TrainArgs, log: &mut impl Write, notes: &mut impl Write) -> Result<ParameterSet<f32>> {
    let cfg = run_config(args.config.as_deref())?;
    let data = args
        .data
        .clone()
        .or(cfg.data.clone())
        .context("no data directory: pass --data or set `data`")?;
    let out = args
        .out
        .clone()
        .or(cfg.checkpoint.clone())
        .context("no output checkpoint: pass --out or set `checkpoint`")?;
    let init_from = args.init_from.clone().or(cfg.init_from.clone());

    let stacks = load_dir(&data)?;
    require_masks(&stacks)?;
    let variant = Variant::from(args.model);
    let spec = cfg.model.spec(variant, stacks[0].height(), stacks[0].width());
    spec.validate()?;

    let split = split_dataset(
        &stacks,
        [1.0 - cfg.validation_fraction, cfg.validation_fraction, 0.0],
        cfg.seed,
    )?;
    let init = match &init_from {
        Some(path) => {
            let source = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let (params, report) =
                warm_start(&spec, &source, cfg.seed).with_context(|| format!("warm start from {}", path.display()))?;
            writeln!(
                notes,
                "warm start: {} tensors copied, {} fresh",
                report.copied.len(),
                report.fresh.len()
            )?;
            params
        }
        None => ParameterSet::init(&spec, cfg.seed),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure!(parent.is_dir(), "output directory {} does not exist", parent.display());
    }
    writeln!(
        notes,
        "{variant}: {} trainable values, {} train / {} validation stacks",
        init.num_trainable(),
        split.train.len(),
        split.validation.len()
    )?;

    let net = Network::new(spec).with_bn(cfg.bn);
    writeln!(log, "{}", EpochLog::CSV_HEADER)?;
    let mut io_error = None;
    let outcome = train(
        &net,
        init,
        &split.train,
        &split.validation,
        &cfg.train_config(variant),
        |entry, _| match writeln!(log, "{}", entry.csv()).and_then(|_| log.flush()) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                io_error = Some(e);
                ControlFlow::Break(())
            }
        },
    )?;
    if let Some(e) = io_error {
        return Err(e).context("writing the training log");
    }
    save_checkpoint(&outcome.best, &out).with_context(|| format!("writing {}", out.display()))?;
    writeln!(notes, "best epoch {} written to {}", outcome.best_epoch, out.display())?;
    Ok(outcome.best)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Required unless `--oracle` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub oracle: bool,
    /// Checks the checkpoint against this config's model fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Expected architecture; inferred from the checkpoint when absent.
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub gc_threshold: Option<f64>,
}

/// Loads a checkpoint and the spec it implies for `height`x`width` inputs.
/// With an expected `variant`, the checkpoint must match `cfg`'s model fields.
fn load_model(
    path: &Path,
    cfg: &RunConfig,
    variant: Option<Variant>,
    height: usize,
    width: usize,
) -> Result<(ModelSpec, ParameterSet<f32>)> {
    let params = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let spec = match variant {
        Some(v) => {
            let spec = cfg.model.spec(v, height, width);
            spec.validate()?;
            spec.check_params(&params)
                .with_context(|| format!("{} does not match the configured {v}", path.display()))?;
            spec
        }
        None => ModelSpec::infer(&params, height, width)
            .with_context(|| format!("{} does not fit {height}x{width} inputs", path.display()))?,
    };
    Ok((spec, params))
}

pub fn eval_cmd(args: &EvalArgs) -> Result<rfcn_core::MetricReport> {
    let cfg = run_config(args.config.as_deref())?;
    let threshold = args.gc_threshold.unwrap_or(cfg.gc_threshold_mm);
    ensure!(threshold > 0.0, "--gc-threshold must be positive");
    let stacks = load_dir(&args.data)?;
    require_masks(&stacks)?;

    let model = match (&args.checkpoint, args.oracle) {
        (_, true) => None,
        (Some(path), false) => {
            let (spec, params) = load_model(
                path,
                &cfg,
                args.model.map(Variant::from),
                stacks[0].height(),
                stacks[0].width(),
            )?;
            Some((Network::new(spec).with_bn(cfg.bn), params))
        }
        (None, false) => bail!("--checkpoint is required unless --oracle is given"),
    };
    let preds = stacks
        .iter()
        .map(|s| {
            let truth = s.masks().expect("checked above").to_vec();
            let pred = match &model {
                Some((net, params)) => net.predict_masks(params, &s.to_tensor())?,
                None => truth.clone(),
            };
            Ok(StackPrediction {
                id: s.subject.clone(),
                spacing_mm: s.spacing_mm(),
                pred,
                truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&preds, threshold)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&args.report, text).with_context(|| format!("writing {}", args.report.display()))?;
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stack header (`.json`).
    #[arg(long)]
    pub stack: PathBuf,
    /// Raw mask payload: one 0/1 byte per pixel, slice-major.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for one PGM per slice with the predicted contour drawn in.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

pub fn predict_cmd(args: &PredictArgs) -> Result<Vec<rfcn_core::Mask>> {
    let stack: SliceStack = load_stack(&args.stack)?;
    let (spec, params) = load_model(
        &args.checkpoint,
        &RunConfig::default(),
        None,
        stack.height(),
        stack.width(),
    )?;
    let masks = Network::new(spec).predict_masks(&params, &stack.to_tensor())?;
    let bytes: Vec<u8> = masks.iter().flat_map(|m| m.to_bytes()).collect();
    fs::write(&args.out, bytes).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(dir) = &args.pgm {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (s, m) in masks.iter().enumerate() {
            let path = dir.join(format!("{}-slice{:02}.pgm", stack.subject, s + 1));
            pgm::write(&path, stack.width(), stack.height(), &pgm::overlay(stack.image(s), m))?;
        }
    }
    Ok(masks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradSpec {
    Tiny,
    Default,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradSpec::Tiny)]
    pub spec: GradSpec,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Prints one line per check; `Ok(false)` if any exceeds the tolerance.
pub fn gradcheck_cmd(args: &GradcheckArgs, out: &mut impl Write) -> Result<bool> {
    let choice = match args.spec {
        GradSpec::Tiny => SpecChoice::Tiny,
        GradSpec::Default => SpecChoice::Default,
    };
    let mut results: Vec<CheckResult> = layer_suite(args.seed)?;
    let network = network_check(choice, args.seed)?;
    let network_max = network.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    writeln!(out, "{:<32} {:>12} {:>8}", "check", "max rel err", "coords")?;
    results.extend(network);
    let mut ok = true;
    for r in &results {
        let flag = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        writeln!(
            out,
            "{:<32} {:>12.3e} {:>8} {flag}",
            r.name, r.max_rel_error, r.coordinates
        )?;
    }
    writeln!(
        out,
        "network max rel err {network_max:.3e}; tolerance {TOLERANCE:e}: {}",
        if ok { "all passed" } else { "FAILED" }
    )?;
    Ok(ok)
}
