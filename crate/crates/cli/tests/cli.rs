use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rfcn_cli::dataset::{load_dir, Manifest};
use rfcn_cli::pgm;
use rfcn_core::data::load_stack;
use rfcn_core::model::{encode_checkpoint, load_checkpoint};
use rfcn_core::{ModelSpec, ParameterSet, Variant};
use tempfile::TempDir;

fn rfcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rfcn(args);
    assert!(
        out.status.success(),
        "rfcn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantoms(dir: &Path, subjects: usize, mode: &str, seed: u64) -> PathBuf {
    let data = dir.join(format!("data-{mode}-{seed}"));
    ok(&[
        "gen-phantom",
        "--out",
        s(&data),
        "--subjects",
        &subjects.to_string(),
        "--slices",
        "5",
        "--size",
        "32",
        "--mode",
        mode,
        "--seed",
        &seed.to_string(),
    ]);
    data
}

const SMALL: &str = r#"{
  "model": {"depth": 2, "base_channels": 4, "bottleneck_channels": 8},
  "epochs": 2,
  "seed": 11,
  "validation_fraction": 0.25,
  "augmentation": {"max_translation": 3, "max_rotation_deg": 10}
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_phantom_is_deterministic_and_loadable() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["gen-phantom", "--out", s(dir), "--subjects", "4", "--seed", "7"]);
    }
    let files = read_dir_bytes(&a);
    assert_eq!(files, read_dir_bytes(&b));
    // 4 stacks x (header, images, masks) + manifest
    assert_eq!(files.len(), 13);

    let manifest: Manifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.stacks.len(), 4);
    for name in &manifest.stacks {
        let st = load_stack(a.join(name)).unwrap();
        assert_eq!((st.slices(), st.height(), st.width()), (9, 64, 64));
        assert_eq!(st.spacing_mm(), 2.0);
        assert!(st.masks().is_some());
    }
    assert_eq!(load_dir(&a).unwrap().len(), 4);

    let c = tmp.path().join("c");
    ok(&["gen-phantom", "--out", s(&c), "--subjects", "4", "--seed", "8"]);
    assert_ne!(read_dir_bytes(&c), files);
}

#[test]
fn gen_phantom_reports_unwritable_output() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = rfcn(&["gen-phantom", "--out", s(&blocker.join("sub")), "--subjects", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let data = phantoms(tmp.path(), 4, "plain", 1);
    let cfg = write_config(tmp.path(), &SMALL.replace("\"epochs\": 2", "\"epochs\": 0"));
    let ckpt = tmp.path().join("init.ckpt");
    let out = ok(&[
        "train",
        "--config",
        s(&cfg),
        "--model",
        "rfcn",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "epoch,lr,train_loss,val_dice\n");
    let spec = ModelSpec {
        variant: Variant::Rfcn,
        depth: 2,
        base_channels: 4,
        bottleneck_channels: 8,
        height: 32,
        width: 32,
    };
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        encode_checkpoint(&ParameterSet::init(&spec, 11))
    );
}

#[test]
fn training_log_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = phantoms(tmp.path(), 4, "plain", 2);
    let cfg = write_config(tmp.path(), SMALL);
    let run = |name: &str| {
        let ckpt = tmp.path().join(name);
        let out = ok(&[
            "train",
            "--config",
            s(&cfg),
            "--model",
            "fcn",
            "--data",
            s(&data),
            "--out",
            s(&ckpt),
        ]);
        (String::from_utf8(out.stdout).unwrap(), fs::read(&ckpt).unwrap())
    };
    let (log_a, ckpt_a) = run("a.ckpt");
    let (log_b, ckpt_b) = run("b.ckpt");
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
    let lines: Vec<&str> = log_a.lines().collect();
    assert_eq!(lines.len(), 3, "{log_a}");
    assert_eq!(lines[1].split(',').count(), 4);
    assert!(lines[1].starts_with("1,0.01000000,"));
}

#[test]
fn rfcn_warm_starts_from_fcn() {
    let tmp = TempDir::new().unwrap();
    let data = phantoms(tmp.path(), 4, "ambiguous", 3);
    let cfg = write_config(tmp.path(), SMALL);
    let fcn = tmp.path().join("fcn.ckpt");
    let rfcn_ckpt = tmp.path().join("rfcn.ckpt");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--model",
        "fcn",
        "--data",
        s(&data),
        "--out",
        s(&fcn),
    ]);
    let zero = write_config(tmp.path(), &SMALL.replace("\"epochs\": 2", "\"epochs\": 0"));
    let out = ok(&[
        "train",
        "--config",
        s(&zero),
        "--model",
        "rfcn",
        "--data",
        s(&data),
        "--out",
        s(&rfcn_ckpt),
        "--init-from",
        s(&fcn),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("10 fresh"));
    let (a, b) = (load_checkpoint(&fcn).unwrap(), load_checkpoint(&rfcn_ckpt).unwrap());
    for (name, t) in a.iter() {
        assert_eq!(b.get(name), Some(t), "{name}");
    }
    assert!(b.contains("gru.h0"));

    // The reverse direction has nowhere to put the GRU.
    let out = rfcn(&[
        "train",
        "--config",
        s(&zero),
        "--model",
        "fcn",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("x")),
        "--init-from",
        s(&rfcn_ckpt),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gru."));
}

#[test]
fn config_and_data_errors_stop_before_training() {
    let tmp = TempDir::new().unwrap();
    let data = phantoms(tmp.path(), 4, "plain", 4);
    let ckpt = tmp.path().join("x.ckpt");
    let cases: Vec<(String, PathBuf, &str)> = vec![
        (r#"{"epochz": 3}"#.into(), data.clone(), "epochz"),
        (r#"{"model": {"depth": 6}}"#.into(), data.clone(), "divisible"),
        (
            r#"{"validation_fraction": 1.5}"#.into(),
            data.clone(),
            "validation_fraction",
        ),
        ("{}".into(), tmp.path().join("missing"), "missing"),
    ];
    for (text, dir, needle) in cases {
        let cfg = write_config(tmp.path(), &text);
        let out = rfcn(&[
            "train",
            "--config",
            s(&cfg),
            "--model",
            "fcn",
            "--data",
            s(&dir),
            "--out",
            s(&ckpt),
        ]);
        assert!(!out.status.success(), "{text}");
        assert!(out.stdout.is_empty(), "{text}: training started");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{text}: {err}");
        assert!(!ckpt.exists());
    }
}

#[test]
fn diverging_loss_exits_nonzero() {
    let tmp = TempDir::new().unwrap();
    let data = phantoms(tmp.path(), 4, "plain", 5);
    let cfg = write_config(
        tmp.path(),
        &SMALL.replace("\"epochs\": 2", "\"epochs\": 5, \"hyper\": {\"lr0\": 1e30}"),
    );
    let ckpt = tmp.path().join("x.ckpt");
    let out = rfcn(&[
        "train",
        "--config",
        s(&cfg),
        "--model",
        "fcn",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("loss became"), "{err}");
    assert!(!ckpt.exists());
}

#[test]
fn eval_reports_are_complete_and_stable() {
    let tmp = TempDir::new().unwrap();
    let data = phantoms(tmp.path(), 4, "plain", 6);

    let oracle = tmp.path().join("oracle.json");
    ok(&["eval", "--oracle", "--data", s(&data), "--report", s(&oracle)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&oracle).unwrap()).unwrap();
    let agg = &v["aggregate"];
    assert_eq!(agg["dice_mean"], 1.0);
    assert_eq!(agg["apd_all_mean_mm"], 0.0);
    assert_eq!(agg["gc_percent"], 100.0);
    assert_eq!(v["slices"].as_array().unwrap().len(), 20);
    assert_eq!(v["gc_threshold_mm"], 5.0);
    for key in ["base_1", "base_2", "base_3", "apex_3", "apex_2", "apex_1"] {
        assert_eq!(v["regional"][key], 1.0, "{key}");
    }
    // Five slices are all Base-3 or Apex-3.
    assert!(v["regional"]["central"].is_null());

    let cfg = write_config(tmp.path(), &SMALL.replace("\"epochs\": 2", "\"epochs\": 1"));
    let ckpt = tmp.path().join("rfcn.ckpt");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--model",
        "rfcn",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
    ]);
    let (r1, r2) = (tmp.path().join("r1.json"), tmp.path().join("r2.json"));
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--report", s(&r1)]);
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--report",
        s(&r2),
        "--config",
        s(&cfg),
        "--model",
        "rfcn",
    ]);
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&r1).unwrap()).unwrap();
    for key in ["gc_threshold_mm", "slices", "aggregate", "regional"] {
        assert!(v.get(key).is_some(), "{key}");
    }

    let r3 = tmp.path().join("r3.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--report",
        s(&r3),
        "--gc-threshold",
        "2.5",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&r3).unwrap()).unwrap();
    assert_eq!(v["gc_threshold_mm"], 2.5);
}

#[test]
fn eval_names_the_incompatible_parameter() {
    let tmp = TempDir::new().unwrap();
    let data = phantoms(tmp.path(), 4, "plain", 7);
    let cfg = write_config(tmp.path(), &SMALL.replace("\"epochs\": 2", "\"epochs\": 0"));
    let ckpt = tmp.path().join("fcn.ckpt");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--model",
        "fcn",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
    ]);
    let report = tmp.path().join("r.json");

    let out = rfcn(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--report",
        s(&report),
        "--config",
        s(&cfg),
        "--model",
        "rfcn",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`gru."));

    let wider = write_config(
        tmp.path(),
        &SMALL.replace("\"base_channels\": 4", "\"base_channels\": 6"),
    );
    let out = rfcn(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--report",
        s(&report),
        "--config",
        s(&wider),
        "--model",
        "fcn",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`enc0.conv1.weight`"));
    assert!(!report.exists());
}

#[test]
fn predict_writes_masks_and_pgm() {
    let tmp = TempDir::new().unwrap();
    let data = phantoms(tmp.path(), 4, "plain", 8);
    let cfg = write_config(tmp.path(), &SMALL.replace("\"epochs\": 2", "\"epochs\": 1"));
    let ckpt = tmp.path().join("m.ckpt");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--model",
        "rfcn",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
    ]);

    let stack = data.join("phantom-001.json");
    let out = tmp.path().join("pred.u8");
    let pgm_dir = tmp.path().join("pgm");
    ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--stack",
        s(&stack),
        "--out",
        s(&out),
        "--pgm",
        s(&pgm_dir),
    ]);
    let bytes = fs::read(&out).unwrap();
    assert_eq!(bytes.len(), 5 * 32 * 32);
    assert!(bytes.iter().all(|&b| b <= 1));
    for s in 1..=5 {
        let path = pgm_dir.join(format!("phantom-001-slice{s:02}.pgm"));
        let (w, h, px) = pgm::decode(&fs::read(&path).unwrap()).expect("valid P5");
        assert_eq!((w, h, px.len()), (32, 32, 1024));
    }
    let again = tmp.path().join("again.u8");
    ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--stack",
        s(&stack),
        "--out",
        s(&again),
    ]);
    assert_eq!(fs::read(&again).unwrap(), bytes);
}

#[test]
fn gradcheck_tiny_passes_quickly_and_reproducibly() {
    let start = Instant::now();
    let a = ok(&["gradcheck", "--spec", "tiny"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    let text = String::from_utf8(a.stdout.clone()).unwrap();
    assert!(text.contains("all passed"), "{text}");
    assert!(text.contains("gru.h0"));
    assert!(text.contains("conv_gru"));
    assert!(!text.contains("FAIL"));
    let b = ok(&["gradcheck", "--spec", "tiny"]);
    assert_eq!(a.stdout, b.stdout);
}
