mod common;

use std::collections::HashMap;

use common::*;
use proptest::prelude::*;
use rfcn_core::layers::{glorot_bound, Binding, BnConfig, ConvBlock, ConvGruCell};
use rfcn_core::model::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, warm_start, ModelError, Recurrence,
};
use rfcn_core::tensor::BnMode;
use rfcn_core::{Mode, ModelSpec, Network, ParameterSet, Tape, Tensor, Variant};

fn small(variant: Variant) -> ModelSpec {
    ModelSpec {
        variant,
        depth: 2,
        base_channels: 3,
        bottleneck_channels: 6,
        height: 16,
        width: 16,
    }
}

/// Parameters with non-trivial biases and batch-norm affine terms so that
/// structural checks do not pass by accident.
fn randomized(spec: &ModelSpec, seed: u64) -> ParameterSet {
    let mut p = ParameterSet::init(spec, seed);
    let mut r = rng(seed + 1000);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".h0") {
            *t = Tensor::uniform(t.shape(), -0.5, 0.5, &mut r);
        } else if name.ends_with(".gamma") {
            *t = Tensor::uniform(t.shape(), 0.5, 1.5, &mut r);
        } else if name.ends_with(".running_var") {
            *t = Tensor::uniform(t.shape(), 0.5, 2.0, &mut r);
        } else if name.ends_with(".running_mean") {
            *t = Tensor::uniform(t.shape(), -0.2, 0.2, &mut r);
        }
    }
    p
}

fn logits(spec: &ModelSpec, p: &ParameterSet, x: &Tensor, rec: Recurrence) -> Tensor {
    let mut p = p.clone();
    Network::new(*spec)
        .forward_stack_with(&mut p, x, Mode::Eval, rec)
        .unwrap()
}

fn slice_of(t: &Tensor, s: usize) -> Vec<f32> {
    let per = t.len() / t.shape()[0];
    t.data()[s * per..(s + 1) * per].to_vec()
}

fn perturb_slice(x: &Tensor, s: usize, seed: u64) -> Tensor {
    let mut y = x.clone();
    let per = x.len() / x.shape()[0];
    let mut r = rng(seed);
    let noise = Tensor::<f32>::uniform(&[per], -1.0, 1.0, &mut r);
    for (v, n) in y.data_mut()[s * per..(s + 1) * per].iter_mut().zip(noise.data()) {
        *v += n;
    }
    y
}

#[test]
fn default_spec_output_shape() {
    let spec = ModelSpec::rfcn_default();
    let mut p = ParameterSet::init(&spec, 0);
    let x = Tensor::<f32>::uniform(&[8, 1, 64, 64], 0.0, 1.0, &mut rng(1));
    let y = Network::new(spec).forward_stack(&mut p, &x, Mode::Eval).unwrap();
    assert_eq!(y.shape(), &[8, 2, 64, 64]);
}

#[test]
fn indivisible_input_rejected_with_divisor() {
    let spec = small(Variant::Fcn);
    let mut p = ParameterSet::init(&spec, 0);
    let x = Tensor::<f32>::zeros(&[2, 1, 18, 16]);
    let err = Network::new(spec).forward_stack(&mut p, &x, Mode::Eval).unwrap_err();
    assert!(matches!(err, ModelError::Indivisible { divisor: 4, .. }), "{err}");
    assert!(err.to_string().contains('4'));
}

#[test]
fn fcn_slices_are_independent() {
    let spec = small(Variant::Fcn);
    let p = randomized(&spec, 3);
    let x = Tensor::<f32>::uniform(&[4, 1, 16, 16], 0.0, 1.0, &mut rng(2));
    let base = logits(&spec, &p, &x, Recurrence::Gru);
    for s in 0..4 {
        let moved = logits(&spec, &p, &perturb_slice(&x, s, 9), Recurrence::Gru);
        for other in (0..4).filter(|&o| o != s) {
            assert_eq!(slice_of(&moved, other), slice_of(&base, other));
        }
        assert_ne!(slice_of(&moved, s), slice_of(&base, s));
    }
}

#[test]
fn fcn_is_slice_permutation_equivariant() {
    let spec = small(Variant::Fcn);
    let p = randomized(&spec, 4);
    let x = Tensor::<f32>::uniform(&[3, 1, 16, 16], 0.0, 1.0, &mut rng(5));
    let perm = [2, 0, 1];
    let mut xp = Vec::new();
    for &s in &perm {
        xp.extend(slice_of(&x, s));
    }
    let xp = Tensor::new(x.shape(), xp).unwrap();
    let (a, b) = (
        logits(&spec, &p, &x, Recurrence::Gru),
        logits(&spec, &p, &xp, Recurrence::Gru),
    );
    for (i, &s) in perm.iter().enumerate() {
        assert_eq!(slice_of(&b, i), slice_of(&a, s));
    }
}

#[test]
fn rfcn_is_causal_base_to_apex() {
    let spec = small(Variant::Rfcn);
    let p = randomized(&spec, 6);
    let x = Tensor::<f32>::uniform(&[4, 1, 16, 16], 0.0, 1.0, &mut rng(7));
    let base = logits(&spec, &p, &x, Recurrence::Gru);
    let moved = logits(&spec, &p, &perturb_slice(&x, 2, 11), Recurrence::Gru);
    for s in 0..2 {
        assert_eq!(slice_of(&moved, s), slice_of(&base, s), "slice {s} saw the future");
    }
    for s in 2..4 {
        assert_ne!(slice_of(&moved, s), slice_of(&base, s), "slice {s} ignored slice 2");
    }
}

#[test]
fn identity_recurrence_equals_fcn() {
    let rspec = small(Variant::Rfcn);
    let fspec = small(Variant::Fcn);
    let p = randomized(&rspec, 8);
    let mut shared = ParameterSet::new();
    for (name, t) in p.iter().filter(|(n, _)| !n.starts_with("gru.")) {
        shared.insert(name, t.clone());
    }
    let x = Tensor::<f32>::uniform(&[3, 1, 16, 16], 0.0, 1.0, &mut rng(9));
    assert_eq!(
        logits(&rspec, &p, &x, Recurrence::Identity),
        logits(&fspec, &shared, &x, Recurrence::Gru)
    );
}

#[test]
fn carrying_gru_equals_initial_state_ablation() {
    let spec = small(Variant::Rfcn);
    let mut p = randomized(&spec, 10);
    *p.get_mut("gru.z.bias").unwrap() = Tensor::full(&[6], -1e4);
    let x = Tensor::<f32>::uniform(&[4, 1, 16, 16], 0.0, 1.0, &mut rng(12));
    let carried = logits(&spec, &p, &x, Recurrence::Gru);
    assert_eq!(carried, logits(&spec, &p, &x, Recurrence::Initial));
    let moved = logits(&spec, &p, &perturb_slice(&x, 0, 3), Recurrence::Gru);
    for s in 1..4 {
        assert_eq!(slice_of(&moved, s), slice_of(&carried, s));
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let spec = ModelSpec::rfcn_default();
    let a = ParameterSet::<f32>::init(&spec, 5);
    assert_eq!(a, ParameterSet::init(&spec, 5));
    assert_ne!(a, ParameterSet::init(&spec, 6));
    for (name, t) in a.iter() {
        let expect_zero = name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".h0");
        if expect_zero {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".gamma") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }
    let k = a.get("gru.wz.weight").unwrap();
    let bound = glorot_bound(256 * 9, 256 * 9);
    assert!(k.data().iter().all(|&v| (v as f64).abs() <= bound));
    let n = k.len() as f64;
    let mean = k.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = k.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let expect = bound * bound / 3.0;
    assert!((var - expect).abs() < 0.01 * expect, "{var} vs {expect}");
}

#[test]
fn checkpoint_files_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let p = randomized(&ModelSpec::rfcn_default(), 1);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&p, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, p);
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let mut bytes = encode_checkpoint(&p);
    bytes[1] = b'X';
    assert!(decode_checkpoint(&bytes).is_err());
}

#[test]
fn warm_start_reports_fresh_gru() {
    let fspec = small(Variant::Fcn);
    let rspec = small(Variant::Rfcn);
    let fcn = randomized(&fspec, 2);
    let (params, report) = warm_start(&rspec, &fcn, 3).unwrap();
    assert_eq!(report.fresh.len(), 10);
    assert!(report.fresh.iter().all(|n| n.starts_with("gru.")));
    assert_eq!(report.copied.len(), fcn.len());
    for (name, t) in fcn.iter() {
        assert_eq!(params.get(name).unwrap(), t);
    }
    let rfcn = randomized(&rspec, 2);
    assert!(warm_start(&fspec, &rfcn, 3).is_err());
}

fn gru_cell(channels: usize, h: usize, w: usize) -> (ConvGruCell, ParameterSet<f64>) {
    let cell = ConvGruCell::new("gru", channels, h, w);
    let mut p = ParameterSet::new();
    cell.init_params(&mut p, &mut rng(0));
    (cell, p)
}

fn gru_step(cell: &ConvGruCell, p: &mut ParameterSet<f64>, e: &Tensor<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let ctx = Binding {
        params: p,
        vars: &vars,
        mode: Mode::Eval,
        bn: BnConfig::default(),
    };
    let gv = cell.vars(&mut tape, &ctx).unwrap();
    let (e, h) = (tape.constant(e.clone()), tape.constant(h.clone()));
    let out = ConvGruCell::step(&mut tape, &gv, e, h).unwrap();
    tape.value(out).clone()
}

fn set_all(p: &mut ParameterSet<f64>, value: f64, filter: impl Fn(&str) -> bool) {
    for (name, t) in p.iter_mut() {
        if filter(name) {
            t.data_mut().fill(value);
        }
    }
}

#[test]
fn gru_zero_parameters_halve_state() {
    let (cell, mut p) = gru_cell(3, 4, 4);
    set_all(&mut p, 0.0, |_| true);
    let mut r = rng(1);
    let e = Tensor::<f64>::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
    let h = Tensor::<f64>::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
    let out = gru_step(&cell, &mut p, &e, &h);
    for (o, hv) in out.data().iter().zip(h.data()) {
        assert!((o - 0.5 * hv).abs() < 1e-6);
    }
}

#[test]
fn gru_update_gate_saturation() {
    let (cell, mut p) = gru_cell(2, 3, 3);
    set_all(&mut p, 0.0, |_| true);
    let mut r = rng(2);
    let e = Tensor::<f64>::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
    let h = Tensor::<f64>::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r);

    set_all(&mut p, -20.0, |n| n == "gru.z.bias");
    let carry = gru_step(&cell, &mut p, &e, &h);
    assert!(carry.max_abs_diff(&h) < 1e-6);

    set_all(&mut p, 40.0, |n| n == "gru.z.bias");
    set_all(&mut p, 0.3, |n| n == "gru.h.bias");
    let replace = gru_step(&cell, &mut p, &e, &h);
    assert!(replace.data().iter().all(|v| (v - 0.3f64.tanh()).abs() < 1e-12));
}

#[test]
fn conv_block_train_mode_normalizes() {
    let block = ConvBlock::new("b", 2, 3);
    let mut p = ParameterSet::<f64>::new();
    block.init_params(&mut p, &mut rng(3));
    let x = Tensor::<f64>::uniform(&[4, 2, 6, 6], -2.0, 3.0, &mut rng(4));
    // Pre-scale statistics of the first batch norm, computed directly.
    let mut tape = Tape::new();
    let vars: HashMap<_, _> = p.bind(&mut tape, false);
    let xv = tape.constant(x);
    let conv = tape
        .conv2d(xv, vars["b.conv1.weight"], vars["b.conv1.bias"], 1, 1)
        .unwrap();
    let ones = tape.constant(Tensor::ones(&[3]));
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let (y, _) = tape
        .batch_norm(conv, ones, zeros, &BnMode::Train { eps: 1e-5 })
        .unwrap();
    let y = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| y.data()[(n * 3 + c) * 36..(n * 3 + c + 1) * 36].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(
            mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4,
            "channel {c}: {mean} {var}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gru_state_stays_in_hull(seed in any::<u64>(), scale in 0.1f64..3.0) {
        let (cell, mut p) = gru_cell(2, 3, 3);
        let mut r = rng(seed);
        for (_, t) in p.iter_mut() {
            *t = Tensor::uniform(t.shape(), -scale, scale, &mut r);
        }
        let e = Tensor::<f64>::uniform(&[1, 2, 3, 3], -2.0, 2.0, &mut r);
        let h = Tensor::<f64>::uniform(&[1, 2, 3, 3], -2.0, 2.0, &mut r);
        let out = gru_step(&cell, &mut p, &e, &h);
        prop_assert_eq!(out.shape(), h.shape());
        for (o, hv) in out.data().iter().zip(h.data()) {
            prop_assert!(o.abs() <= hv.abs().max(1.0) + 1e-12);
        }
    }

    #[test]
    fn eval_batch_norm_ignores_batch_composition(seed in any::<u64>()) {
        let spec = small(Variant::Fcn);
        let p = randomized(&spec, seed % 50);
        let mut r = rng(seed);
        let x = Tensor::<f32>::uniform(&[3, 1, 16, 16], 0.0, 1.0, &mut r);
        let full = logits(&spec, &p, &x, Recurrence::Gru);
        let first = Tensor::new(&[1, 1, 16, 16], slice_of(&x, 0)).unwrap();
        let alone = logits(&spec, &p, &first, Recurrence::Gru);
        prop_assert_eq!(slice_of(&full, 0), alone.data().to_vec());
    }
}
