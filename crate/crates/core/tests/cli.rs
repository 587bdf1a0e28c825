mod common;

use std::path::Path;
use std::process::{Command, Output};

use transdae::data::Dataset;
use transdae::io::{load_checkpoint, read_mask, write_tensor};
use transdae::metrics::{evaluate, EvalReport};
use transdae::train::RunLog;
use transdae_tensor::Tensor;

fn transdae(args: &[&str]) -> Output {
    transdae_env(args, &[])
}

fn transdae_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_transdae"));
    cmd.args(args).env_remove("TDAE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_TRAIN: &str = r#"{
  "model": {"input_size": [32, 32], "embed_dim": 8, "depths": [1, 1, 1], "bottleneck_depth": 1},
  "optimizer": "adam", "lr": 0.002, "batch_size": 4, "max_epochs": 3, "seed": 1
}"#;

const TINY_SYNTH: &str = r#"{"size": [32, 32], "num_classes": 4}"#;

/// Writes a 6-image dataset and trains a tiny model on it.
fn trained(dir: &Path) {
    std::fs::write(dir.join("synth.json"), TINY_SYNTH).unwrap();
    std::fs::write(dir.join("train.json"), TINY_TRAIN).unwrap();
    ok(transdae(&["synth", "--out", p(&dir.join("data")), "--count", "6", "--spec", p(&dir.join("synth.json")), "--seed", "3"]));
    ok(transdae(&[
        "train",
        "--config",
        p(&dir.join("train.json")),
        "--data",
        p(&dir.join("data")),
        "--out",
        p(&dir.join("run")),
        "--quiet",
    ]));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let run = d.join("run");
    let log: RunLog = serde_json::from_str(&std::fs::read_to_string(run.join("run_log.json")).unwrap()).unwrap();
    assert_eq!(log.epochs.len(), 3);
    assert!(run.join("last.ckpt").is_file() && run.join("best.ckpt").is_file());

    let eval = |out: &str| {
        ok(transdae(&[
            "eval",
            "--checkpoint",
            p(&run.join("last.ckpt")),
            "--data",
            p(&d.join("data")),
            "--out",
            out,
            "--save-predictions",
            p(&d.join("preds")),
        ]));
        std::fs::read_to_string(out).unwrap()
    };
    let first = eval(p(&d.join("r1.json")));
    let second = eval(p(&d.join("r2.json")));
    assert_eq!(first, second, "evaluation must be deterministic");
    let report: EvalReport = serde_json::from_str(&first).unwrap();
    assert_eq!(report.volumes, 6);

    // the report agrees with the library and with brute-force dice on the saved predictions
    let data = Dataset::load(&d.join("data")).unwrap();
    let preds: Vec<_> = (0..6).map(|i| read_mask(&d.join(format!("preds/{i:04}.tdae"))).unwrap()).collect();
    assert_eq!(evaluate(&preds, &data.masks(), 4, None).unwrap(), report);
    for (c, (_, m)) in report.per_class.iter().enumerate() {
        let cls = c as u8 + 1;
        let brute: f64 = preds
            .iter()
            .zip(data.masks())
            .map(|(a, b)| common::brute_dice(a, &b, cls))
            .sum::<f64>()
            / 6.0;
        assert!((m.dice - brute).abs() < 1e-12);
    }

    // predict on one image matches the in-process forward pass
    let image = &data.samples[4].image;
    let img_path = d.join("img.tdae");
    write_tensor(&img_path, image).unwrap();
    let mask_path = d.join("mask.tdae");
    ok(transdae(&["predict", "--checkpoint", p(&run.join("last.ckpt")), "--image", p(&img_path), "--out", p(&mask_path)]));
    let mask = read_mask(&mask_path).unwrap();
    assert_eq!(mask.shape(), [32, 32]);
    assert!(mask.max_label() < 4);
    let model = load_checkpoint::<f32>(&run.join("last.ckpt"), None).unwrap().model().unwrap();
    let batch = image.reshape([1, 32, 32, 1]).unwrap();
    assert_eq!(model.predict(&batch).unwrap()[0], mask);
    assert_eq!(mask, preds[4]);

    // resuming a finished run is a no-op that still writes a log
    ok(transdae(&[
        "train",
        "--resume",
        p(&run.join("last.ckpt")),
        "--data",
        p(&d.join("data")),
        "--out",
        p(&d.join("resumed")),
        "--quiet",
    ]));
    let resumed: RunLog = serde_json::from_str(&std::fs::read_to_string(d.join("resumed/run_log.json")).unwrap()).unwrap();
    assert!(resumed.same_trajectory(&log));
}

#[test]
fn ground_truth_scored_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("synth.json"), TINY_SYNTH).unwrap();
    ok(transdae(&["synth", "--out", p(&d.join("data")), "--count", "4", "--spec", p(&d.join("synth.json"))]));
    let out = ok(transdae(&["eval", "--predictions", p(&d.join("data")), "--data", p(&d.join("data"))]));
    let report: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.mean_dice, 1.0);
    assert_eq!(report.mean_hd, Some(0.0));
}

#[test]
fn contract_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let ckpt = d.join("run/last.ckpt");
    // 64x64 data against a 32x32 model
    ok(transdae(&["synth", "--out", p(&d.join("big")), "--count", "2"]));
    let out = transdae(&["eval", "--checkpoint", p(&ckpt), "--data", p(&d.join("big"))]);
    assert_eq!(code(&out), 1);
    // image sides not divisible by 32
    let img = d.join("odd.tdae");
    write_tensor(&img, &Tensor::<f32>::zeros([40, 40, 1])).unwrap();
    let out = transdae(&["predict", "--checkpoint", p(&ckpt), "--image", p(&img), "--out", p(&d.join("m.tdae"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiples of 32"));
    // unknown config field
    std::fs::write(d.join("bad.json"), r#"{"learning_rate": 1}"#).unwrap();
    let out = transdae(&["train", "--config", p(&d.join("bad.json")), "--data", p(&d.join("data")), "--out", p(&d.join("x"))]);
    assert_eq!(code(&out), 1);
    // missing file and bad arguments
    assert_eq!(code(&transdae(&["eval", "--predictions", "/nonexistent", "--data", "/nonexistent"])), 1);
    assert_eq!(code(&transdae(&["frobnicate"])), 1);
    assert_eq!(code(&transdae(&["--help"])), 0);
}

#[test]
fn gradcheck_reports_every_block_and_fails_on_a_corrupted_rule() {
    let out = ok(transdae(&["gradcheck", "--coords", "64"]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let components = report["components"].as_array().unwrap();
    assert_eq!(components.len(), transdae::gradcheck::component_names().len());
    for c in components {
        assert!(c["max_rel_error"].as_f64().unwrap() <= 1e-4, "{c}");
    }
    let out = transdae(&["gradcheck", "--coords", "16", "--inject-fault", "softmax"]);
    assert_eq!(code(&out), 2);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn bench_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let summary = dir.path().join("summary.json");
    let out = ok(transdae(&["bench", "--n", "16,32,64", "--d", "8", "--ratios", "1,2", "--reps", "1", "--summary", p(&summary)]));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kernel,n,d,R,flops,wall_ns"));
    // standard and efficient once per n, reduced once per (n, R)
    assert_eq!(lines.count(), 3 + 3 + 6);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(summary).unwrap()).unwrap();
    assert!(s["flop_exponents"].is_array());
}

#[test]
fn seed_variable_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("synth.json"), TINY_SYNTH).unwrap();
    let spec = p(&d.join("synth.json")).to_string();
    ok(transdae(&["synth", "--out", p(&d.join("a")), "--count", "2", "--spec", &spec, "--seed", "11"]));
    ok(transdae_env(&["synth", "--out", p(&d.join("b")), "--count", "2", "--spec", &spec, "--seed", "4"], &[("TDAE_SEED", "11")]));
    ok(transdae(&["synth", "--out", p(&d.join("c")), "--count", "2", "--spec", &spec, "--seed", "4"]));
    let load = |n: &str| Dataset::load(&d.join(n)).unwrap();
    assert_eq!(load("a").samples, load("b").samples);
    assert_ne!(load("a").samples, load("c").samples);
    let out = transdae_env(&["synth", "--out", p(&d.join("e")), "--count", "1"], &[("TDAE_SEED", "abc")]);
    assert_eq!(code(&out), 1);
}
