use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn hiertool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiertool"))
        .args(args)
        .env("HIERTOOL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hiertool(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_MODEL: &str = "image_size = 16\npatch_size = 8\nwidth = 16\nencoder_blocks = 2\ndecoder_blocks = 1\nheads = 2\nmlp_ratio = 2\n";

/// Sources and a synthesized dataset over the 2/3/4 toy tree.
fn dataset(dir: &Path, seed: &str) -> PathBuf {
    let h = fixture("toy9.tsv");
    let src = dir.join("src");
    let out = dir.join(format!("ds{seed}"));
    if !src.exists() {
        ok(&["sources", "--hierarchy", s(&h), "--out", s(&src), "--count", "24", "--image-size", "32", "--seed", "1"]);
    }
    ok(&["synth", "--hierarchy", s(&h), "--source", s(&src), "--out", s(&out), "--seed", seed]);
    out.join("manifest.jsonl")
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(hiertool(&["synth", "--source", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(hiertool(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(hiertool(&["gradcheck", "--seed", "minus-one"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let out = hiertool(&["summarize", "--hierarchy", "/nonexistent.tsv", "--manifest", "m.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
    let out = Command::new(env!("CARGO_BIN_EXE_hiertool"))
        .args(["gradcheck", "--ops", "softmax"])
        .env("HIERTOOL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic_and_summarized() {
    let dir = TempDir::new().unwrap();
    let a = dataset(dir.path(), "7");
    let b = dataset(dir.path(), "7");
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert!(!text.is_empty());
    let c = dataset(dir.path(), "8");
    assert_ne!(text, fs::read(c).unwrap());

    let table = ok(&["summarize", "--hierarchy", s(&fixture("toy9.tsv")), "--manifest", s(&a)]);
    assert!(table.contains("order") && table.contains("species"));
    let json: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "summarize",
        "--hierarchy",
        s(&fixture("toy9.tsv")),
        "--manifest",
        s(&a),
    ]))
    .unwrap();
    let train: u64 = json["train"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    let test: u64 = json["test"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!((train + test) as usize, String::from_utf8(text).unwrap().lines().count());
}

#[test]
fn eval_reports() {
    let dir = TempDir::new().unwrap();
    let h = dir.path().join("h.tsv");
    fs::write(&h, "top\t-\nA\ttop\nB\tA\nC\tA\nD\tB\nE\tB\n").unwrap();
    let truth = dir.path().join("truth.tsv");
    let pred = dir.path().join("pred.tsv");
    fs::write(&truth, "s1\tA/B/D\n").unwrap();
    fs::write(&pred, "s1\tA/B/E\n").unwrap();
    let out = ok(&["eval", "--hierarchy", s(&h), "--truth", s(&truth), "--pred", s(&pred)]);
    let values: Vec<&str> = out.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(values, ["2.0000", "66.67", "66.67"]);

    let out = ok(&["eval", "--hierarchy", s(&h), "--truth", s(&truth), "--pred", s(&truth)]);
    let values: Vec<&str> = out.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(values, ["0.0000", "100.00", "100.00"]);

    fs::write(&truth, "a\tA/B/D\nb\tA/B/None\nc\tA/C/None\n").unwrap();
    fs::write(&pred, "a\tA/B/E\nb\tA/None/None\nc\tA/B/D\n").unwrap();
    let shuffled = dir.path().join("shuffled.tsv");
    fs::write(&shuffled, "c\tA/B/D\na\tA/B/E\nb\tA/None/None\n").unwrap();
    let report = dir.path().join("report.txt");
    let one = ok(&["eval", "--hierarchy", s(&h), "--truth", s(&truth), "--pred", s(&pred), "--out", s(&report)]);
    let two = ok(&["eval", "--hierarchy", s(&h), "--truth", s(&truth), "--pred", s(&shuffled)]);
    assert_eq!(one, two);
    assert_eq!(fs::read_to_string(&report).unwrap(), one);

    fs::write(&pred, "a\tA/B/E\n").unwrap();
    let out = hiertool(&["eval", "--hierarchy", s(&h), "--truth", s(&truth), "--pred", s(&pred)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_reads_dataset_manifests() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), "3");
    let json: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "eval",
        "--hierarchy",
        s(&fixture("toy9.tsv")),
        "--truth",
        s(&manifest),
        "--pred",
        s(&manifest),
    ]))
    .unwrap();
    assert_eq!(json["sdl"], 0.0);
    assert_eq!(json["ph_percent"], 100.0);
    assert_eq!(json["rh_percent"], 100.0);
}

#[test]
fn gradcheck_filters_and_catches_faults() {
    let out = ok(&["gradcheck", "--ops", "softmax"]);
    assert_eq!(out.lines().filter(|l| l.contains("max rel err")).count(), 1);
    assert!(out.starts_with("softmax"));

    let out = hiertool(&["gradcheck", "--ops", "matmul,gelu", "--inject-fault", "gelu"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("failed: gelu"), "{stdout}");

    let json: serde_json::Value =
        serde_json::from_str(&ok(&["--json", "gradcheck", "--ops", "layer_norm,sghpn", "--samples", "40"])).unwrap();
    let names: Vec<&str> = json.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["layer_norm", "sghpn"]);

    assert_eq!(hiertool(&["gradcheck", "--ops", "conv2d"]).status.code(), Some(1));
}

fn train(dir: &Path, manifest: &Path, name: &str, extra: &[&str]) -> (PathBuf, serde_json::Value) {
    let cfg = dir.join("train.toml");
    fs::write(&cfg, TINY_MODEL).unwrap();
    let ckpt = dir.join(name);
    let (h, v) = (fixture("toy9.tsv"), fixture("vectors50.txt"));
    let mut args = vec![
        "--json",
        "train",
        "--hierarchy",
        s(&h),
        "--manifest",
        s(manifest),
        "--vectors",
        s(&v),
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
    ];
    args.extend_from_slice(extra);
    let json = serde_json::from_str(&ok(&args)).unwrap();
    (ckpt, json)
}

#[test]
fn training_runs_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), "5");
    let (zero, report) = train(dir.path(), &manifest, "zero.ckpt", &["--epochs", "0", "--seed", "4"]);
    assert_eq!(report["steps"], 0);
    let (frozen, _) = train(dir.path(), &manifest, "frozen.ckpt", &["--epochs", "2", "--lr", "0", "--seed", "4"]);
    assert_eq!(fs::read(&zero).unwrap(), fs::read(&frozen).unwrap());

    let (a, report) = train(dir.path(), &manifest, "a.ckpt", &["--epochs", "2", "--seed", "4"]);
    let (b, _) = train(dir.path(), &manifest, "b.ckpt", &["--epochs", "2", "--seed", "4"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&zero).unwrap());
    let losses = fs::read_to_string(a.with_extension("losses.tsv")).unwrap();
    assert_eq!(losses.lines().count(), 3);
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 2);
}

#[test]
fn overfit_one_sample() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), "5");
    let (_, report) = train(dir.path(), &manifest, "one.ckpt", &["--overfit-one", "--epochs", "200", "--lr", "0.01"]);
    assert_eq!(report["samples"], 1);
    let (initial, last) = (report["initial_loss"].as_f64().unwrap(), report["final_loss"].as_f64().unwrap());
    assert!(last < 0.1 * initial, "{initial} -> {last}");
}

#[test]
fn inference_writes_valid_deterministic_predictions() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), "5");
    let (ckpt, _) = train(dir.path(), &manifest, "m.ckpt", &["--epochs", "1"]);
    let h = fixture("toy9.tsv");
    let p1 = dir.path().join("p1.tsv");
    let p2 = dir.path().join("p2.tsv");
    for p in [&p1, &p2] {
        ok(&["infer", "--hierarchy", s(&h), "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(p)]);
    }
    let text = fs::read_to_string(&p1).unwrap();
    assert_eq!(text, fs::read_to_string(&p2).unwrap());
    assert_eq!(text.lines().count(), fs::read_to_string(&manifest).unwrap().lines().count());
    // predictions parse and score against the truth
    ok(&["eval", "--hierarchy", s(&h), "--truth", s(&manifest), "--pred", s(&p1)]);

    let test_only = dir.path().join("test.tsv");
    let m = s(&manifest);
    ok(&["infer", "--hierarchy", s(&h), "--checkpoint", s(&ckpt), "--manifest", m, "--split", "test", "--out", s(&test_only)]);
    let n_test = fs::read_to_string(&manifest).unwrap().lines().filter(|l| l.contains("\"test\"")).count();
    assert!(n_test > 0);
    assert_eq!(fs::read_to_string(&test_only).unwrap().lines().count(), n_test);
    let json: serde_json::Value = serde_json::from_str(&ok(&[
        "--json", "eval", "--hierarchy", s(&h), "--truth", m, "--pred", s(&test_only), "--split", "test",
    ]))
    .unwrap();
    assert_eq!(json["samples"], n_test);
    let out = hiertool(&["eval", "--hierarchy", s(&h), "--truth", m, "--pred", s(&test_only)]);
    assert_eq!(out.status.code(), Some(1));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let p3 = dir.path().join("p3.tsv");
    ok(&["infer", "--hierarchy", s(&h), "--checkpoint", s(&ckpt), "--images", s(&empty), "--out", s(&p3)]);
    assert_eq!(fs::read_to_string(&p3).unwrap(), "");

    let images = manifest.parent().unwrap().join("images");
    let p4 = dir.path().join("p4.tsv");
    let json: serde_json::Value = serde_json::from_str(&ok(&[
        "--json", "infer", "--hierarchy", s(&h), "--checkpoint", s(&ckpt), "--images", s(&images), "--out", s(&p4),
    ]))
    .unwrap();
    assert_eq!(json.as_array().unwrap().len(), text.lines().count());

    let wrong = fixture("toy21.tsv");
    let out = hiertool(&["infer", "--hierarchy", s(&wrong), "--checkpoint", s(&ckpt), "--images", s(&empty), "--out", s(&p3)]);
    assert_eq!(out.status.code(), Some(1));
}
