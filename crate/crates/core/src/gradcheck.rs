//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Everything here runs in `f64`. The per-layer suite and the end-to-end
//! network check are what `rfcn gradcheck` prints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::HashMap;

use crate::layers::{Binding, BnConfig, ConvGruCell, Mode};
use crate::model::{ModelError, ModelSpec, Network, ParameterSet, Variant};
use crate::tensor::{BnMode, Tape, Tensor, TensorError, Var};

/// Tolerance on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const DENOM_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Which coordinates of each input to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many coordinates per input, chosen with the given seed.
    Sample {
        per_input: usize,
        seed: u64,
    },
}

fn coordinates(len: usize, coverage: Coverage, salt: u64) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..len).collect(),
        Coverage::Sample { per_input, seed } if per_input < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..per_input {
                let j = rng.random_range(i..len);
                idx.swap(i, j);
            }
            idx.truncate(per_input);
            idx.sort_unstable();
            idx
        }
        Coverage::Sample { .. } => (0..len).collect(),
    }
}

/// Compares analytic gradients of the scalar `f(inputs)` with central
/// differences at steps `h` and `h/2`, combined by Richardson extrapolation
/// (`(4 D(h/2) - D(h)) / 3`, fourth-order accurate) so the stencil never
/// reaches beyond `±h`.
///
/// A coordinate that misses the tolerance at `step` is re-measured at
/// `step/10` and `step/100` and keeps its smallest error: a ReLU or max-pool
/// kink closer than `step` invalidates the wide stencil but not the narrow
/// ones, while a wrong analytic gradient disagrees at every step.
/// Returns the maximum relative error per input.
pub fn check<F, E>(inputs: &[Tensor<f64>], step: f64, coverage: Coverage, f: F) -> Result<Vec<f64>, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut work = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        for c in coordinates(input.len(), coverage, i as u64) {
            let orig = input.data()[c];
            let mut at = |offset: f64| -> Result<f64, E> {
                work[i].data_mut()[c] = orig + offset;
                eval(&work)
            };
            let mut err = f64::INFINITY;
            for h in [step, 0.1 * step, 0.01 * step] {
                let wide = (at(h)? - at(-h)?) / (2.0 * h);
                let narrow = (at(0.5 * h)? - at(-0.5 * h)?) / h;
                err = err.min(relative_error(analytic[i][c], (4.0 * narrow - wide) / 3.0));
                if err < TOLERANCE {
                    break;
                }
            }
            work[i].data_mut()[c] = orig;
            worst = worst.max(err);
        }
        result.push(worst);
    }
    Ok(result)
}

/// Reduces a tensor-valued output to a scalar with fixed random weights, so
/// every output element contributes a distinct sensitivity.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Random values bounded away from zero, so kinks (ReLU) and ties (max-pool)
/// sit far outside the finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn distinct_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        data.swap(i, j);
    }
    Tensor::new(shape, data).expect("shape and data agree")
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn total(inputs: &[Tensor<f64>]) -> usize {
    inputs.iter().map(Tensor::len).sum()
}

fn result(name: &str, errors: Vec<f64>, coordinates: usize) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_error: errors.into_iter().fold(0.0, f64::max),
        coordinates,
    }
}

/// Finite-difference checks for every differentiable operation and layer.
pub fn layer_suite(seed: u64) -> Result<Vec<CheckResult>, ModelError> {
    const STEP: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let all = Coverage::All;

    let inputs = vec![
        uniform(&[2, 2, 5, 5], &mut rng),
        uniform(&[3, 2, 3, 3], &mut rng),
        uniform(&[3], &mut rng),
    ];
    let e = check(&inputs, STEP, all, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
        project(t, y, 1)
    })?;
    out.push(result("conv2d (3x3, same padding)", e, total(&inputs)));

    let inputs = vec![
        uniform(&[1, 2, 5, 5], &mut rng),
        uniform(&[2, 2, 3, 3], &mut rng),
        uniform(&[2], &mut rng),
    ];
    let e = check(&inputs, STEP, all, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 0)?;
        project(t, y, 2)
    })?;
    out.push(result("conv2d (3x3, stride 2)", e, total(&inputs)));

    let inputs = vec![
        uniform(&[2, 3, 4, 4], &mut rng),
        uniform(&[2, 3, 1, 1], &mut rng),
        uniform(&[2], &mut rng),
    ];
    let e = check(&inputs, STEP, all, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
        project(t, y, 3)
    })?;
    out.push(result("conv2d (1x1)", e, total(&inputs)));

    let inputs = vec![distinct_values(&[2, 2, 4, 6], &mut rng)];
    let e = check(&inputs, STEP, all, |t, v| {
        let y = t.maxpool2x2(v[0])?;
        project(t, y, 4)
    })?;
    out.push(result("maxpool2x2", e, total(&inputs)));

    let inputs = vec![
        uniform(&[2, 3, 3, 2], &mut rng),
        uniform(&[3, 2, 2, 2], &mut rng),
        uniform(&[2], &mut rng),
    ];
    let e = check(&inputs, STEP, all, |t, v| {
        let y = t.transposed_conv2d(v[0], v[1], v[2])?;
        project(t, y, 5)
    })?;
    out.push(result("transposed_conv2d", e, total(&inputs)));

    let inputs = vec![away_from_zero(&[2, 2, 3, 3], &mut rng)];
    let e = check(&inputs, STEP, all, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 6)
    })?;
    out.push(result("relu", e, total(&inputs)));

    let inputs = vec![uniform(&[1, 2, 3, 3], &mut rng), uniform(&[1, 3, 3, 3], &mut rng)];
    let e = check(&inputs, STEP, all, |t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        project(t, y, 7)
    })?;
    out.push(result("concat_channels", e, total(&inputs)));

    let inputs = vec![uniform(&[2, 3, 3, 3], &mut rng)];
    let e = check(&inputs, STEP, all, |t, v| {
        let s = t.sigmoid(v[0]);
        let h = t.tanh(v[0]);
        let y = t.mul(s, h)?;
        project(t, y, 8)
    })?;
    out.push(result("sigmoid/tanh/mul", e, total(&inputs)));

    let mut targets_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCE);
    let target: Vec<usize> = (0..2 * 4 * 4).map(|_| targets_rng.random_range(0..3)).collect();
    let inputs = vec![Tensor::uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng)];
    let e = check(&inputs, STEP, all, |t, v| -> Result<Var, TensorError> {
        t.softmax_cross_entropy(v[0], &target)
    })?;
    out.push(result("softmax_cross_entropy", e, total(&inputs)));

    let inputs = vec![
        uniform(&[3, 2, 3, 3], &mut rng),
        Tensor::uniform(&[2], 0.5, 1.5, &mut rng),
        uniform(&[2], &mut rng),
    ];
    let e = check(&inputs, STEP, all, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &BnMode::Train { eps: 1e-5 })?;
        project(t, y, 9)
    })?;
    out.push(result("batch_norm (train)", e, total(&inputs)));

    let inputs = vec![
        uniform(&[3, 2, 3, 3], &mut rng),
        Tensor::uniform(&[2], 0.5, 1.5, &mut rng),
        uniform(&[2], &mut rng),
    ];
    let eval = BnMode::Eval {
        mean: vec![0.1, -0.2],
        var: vec![0.8, 1.3],
        eps: 1e-5,
    };
    let e = check(&inputs, STEP, all, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &eval)?;
        project(t, y, 10)
    })?;
    out.push(result("batch_norm (eval)", e, total(&inputs)));

    // ConvGRU unrolled over two slices with shared parameters.
    let (channels, h, w) = (2, 3, 3);
    let cell = ConvGruCell::new("gru", channels, h, w);
    let mut set = ParameterSet::<f64>::new();
    cell.init_params(&mut set, &mut rng);
    let names = set.trainable_names();
    let mut inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| uniform(set.get(n).expect("declared").shape(), &mut rng))
        .collect();
    let n_params = inputs.len();
    inputs.push(uniform(&[2, channels, h, w], &mut rng));
    let e = check(&inputs, STEP, all, |t, v| -> Result<Var, ModelError> {
        let bound: HashMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
        let mut local = set.clone();
        let ctx = Binding {
            params: &mut local,
            vars: &bound,
            mode: Mode::Train,
            bn: BnConfig::default(),
        };
        let states = cell.unroll(t, &ctx, v[n_params])?;
        Ok(project(t, states, 11)?)
    })?;
    out.push(result("conv_gru (2-step unroll)", e, total(&inputs)));

    Ok(out)
}

/// Size of network used by [`network_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecChoice {
    /// D=1, c0=2, 8x8 input, S=2.
    Tiny,
    /// Default widths (c0=32, 256-channel bottleneck) on a 16x16, S=2 stack.
    Default,
}

/// End-to-end check of the full RFCN loss (train-mode batch norm included)
/// with respect to every trainable parameter.
pub fn network_check(choice: SpecChoice, seed: u64) -> Result<Vec<CheckResult>, ModelError> {
    let (spec, coverage, step) = match choice {
        SpecChoice::Tiny => (
            ModelSpec {
                variant: Variant::Rfcn,
                depth: 1,
                base_channels: 2,
                bottleneck_channels: 4,
                height: 8,
                width: 8,
            },
            Coverage::All,
            1e-3,
        ),
        SpecChoice::Default => (
            ModelSpec {
                height: 16,
                width: 16,
                ..ModelSpec::rfcn_default()
            },
            Coverage::Sample { per_input: 6, seed },
            1e-3,
        ),
    };
    let slices = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParameterSet::<f32>::init(&spec, seed).cast::<f64>();
    let mut params = params;
    // Non-trivial h0 and biases so every path carries signal.
    for name in params.trainable_names() {
        if !name.ends_with(".weight") && !name.starts_with("gru.w") && !name.starts_with("gru.u") {
            let t = params.get_mut(&name).expect("listed name");
            let shape = t.shape().to_vec();
            let gamma = name.ends_with(".gamma");
            *t = if gamma {
                Tensor::uniform(&shape, 0.5, 1.5, &mut rng)
            } else {
                Tensor::uniform(&shape, -0.5, 0.5, &mut rng)
            };
        }
    }
    let images = Tensor::uniform(&[slices, 1, spec.height, spec.width], 0.0, 1.0, &mut rng);
    let target: Vec<usize> = (0..slices * spec.height * spec.width)
        .map(|_| rng.random_range(0..2))
        .collect();
    let names = params.trainable_names();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).expect("listed").clone()).collect();
    let network = Network::new(spec);
    let errors = check(&inputs, step, coverage, |tape, vars| -> Result<Var, ModelError> {
        let mut local = params.clone();
        let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        let x = tape.constant(images.clone());
        let logits = network.forward_bound(tape, &mut local, &bound, x, Mode::Train)?;
        Ok(tape.softmax_cross_entropy(logits, &target)?)
    })?;
    Ok(names
        .iter()
        .zip(errors)
        .zip(&inputs)
        .map(|((name, e), t)| CheckResult {
            name: name.clone(),
            max_rel_error: e,
            coordinates: match coverage {
                Coverage::All => t.len(),
                Coverage::Sample { per_input, .. } => per_input.min(t.len()),
            },
        })
        .collect())
}
