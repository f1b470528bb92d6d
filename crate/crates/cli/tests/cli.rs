use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use yldcvt::data::{read_dataset, write_dataset};

const BIN: &str = env!("CARGO_BIN_EXE_yldcvt");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("spawn yldcvt")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "yldcvt {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, n: usize, seed: u64, extra: &[&str]) -> PathBuf {
    let n = n.to_string();
    let seed = seed.to_string();
    let mut args = vec!["synth", "--out", name, "--n", &n, "--seed", &seed];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(name)
}

/// Parses `year,...` CSV rows into (first cell, numeric cells).
fn csv_rows(text: &str) -> Vec<(String, Vec<f64>)> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut cells = l.split(',');
            let key = cells.next().unwrap().to_string();
            (key, cells.map(|c| c.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn help_for_every_command() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["--help"]);
    for cmd in ["synth", "train", "eval", "gradcheck"] {
        let text = ok(dir.path(), &[cmd, "--help"]);
        assert!(text.contains("Usage"), "{cmd}: {text}");
    }
}

#[test]
fn synth_is_calibrated_and_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = synth(dir.path(), "a.yldh", 1000, 7, &[]);
    let b = synth(dir.path(), "b.yldh", 1000, 7, &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(read_dataset(&a).unwrap().len(), 1000);

    let out = ok(dir.path(), &["synth", "--out", "c.yldh", "--n", "1000", "--seed", "7"]);
    let mean: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("yield mean "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((mean - 45.26).abs() <= 1.0, "mean {mean}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    for args in [
        &["synth", "--out", "x.yldh", "--n", "0"][..],
        &["synth", "--out", "x.yldh", "--n", "5", "--years", "2010-2005"],
        &["synth", "--out", "x.yldh", "--n", "5", "--sigma-noise", "1.5"],
        &["train", "--data", "x.yldh", "--model", "resnet", "--test-year", "2010", "--out-dir", "o"],
        &["train", "--data", "x.yldh", "--model", "tiny", "--test-year", "2010", "--out-dir", "o", "--kv-stride", "3"],
        &["bogus"],
    ] {
        let out = run(p, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
    }
    assert!(!p.join("x.yldh").exists());

    let out = Command::new(BIN)
        .args(["synth", "--out", "x.yldh", "--n", "5"])
        .env("YLDCVT_THREADS", "zero")
        .current_dir(p)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_fails() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["synth", "--out", "missing/dir/x.yldh", "--n", "5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error"));
}

#[test]
fn train_then_eval_reproduces_report() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "d.yldh", 200, 3, &["--years", "2016-2019"]);
    let text = ok(
        p,
        &["train", "--data", "d.yldh", "--model", "tiny", "--test-year", "2019", "--runs", "1", "--epochs", "2", "--out-dir", "out"],
    );
    assert!(text.contains("AVG"));
    for f in ["report.csv", "report.md", "runs.csv", "manifest.json", "checkpoints/2019-run0.yldh", "checkpoints/2019-run0.json"] {
        assert!(p.join("out").join(f).exists(), "{f}");
    }

    let report = csv_rows(&fs::read_to_string(p.join("out/report.csv")).unwrap());
    assert_eq!(report.len(), 2);
    assert_eq!(report[0].0, "2019");
    assert_eq!(report[1].0, "AVG");
    let (mse, rmse, r2) = (report[0].1[1], report[0].1[2], report[0].1[3]);

    // Report cells are exact copies of the recorded per-cell metrics.
    let meta: Value = serde_json::from_str(&fs::read_to_string(p.join("out/checkpoints/2019-run0.json")).unwrap()).unwrap();
    assert_eq!(meta["test_metrics"]["mse"].as_f64().unwrap(), mse);
    assert_eq!(meta["test_metrics"]["r2"].as_f64().unwrap(), r2);

    let out = ok(
        p,
        &["eval", "--checkpoint", "out/checkpoints/2019-run0.yldh", "--data", "d.yldh", "--test-year", "2019", "--csv", "e.csv"],
    );
    assert!(out.contains("mse") && out.contains("r2"));
    let file = fs::read_to_string(p.join("e.csv")).unwrap();
    assert!(out.contains(file.trim()));
    let row = &csv_rows(&file)[0];
    assert_eq!(row.0, "2019");
    assert_eq!(row.1[1..], [mse, rmse, r2]);
}

#[test]
fn eval_on_a_training_year_beats_the_test_year_after_overfitting() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "d.yldh", 64, 5, &["--years", "2016-2019", "--sigma-noise", "0.9"]);
    ok(
        p,
        &[
            "train", "--data", "d.yldh", "--model", "tiny", "--test-year", "2019", "--runs", "1", "--epochs", "60", "--batch-size", "4",
            "--lr", "0.001", "--out-dir", "out",
        ],
    );
    let mse = |year: &str| {
        let out = ok(p, &["eval", "--checkpoint", "out/checkpoints/2019-run0.yldh", "--data", "d.yldh", "--test-year", year]);
        csv_rows(out.lines().skip_while(|l| !l.starts_with("year,")).collect::<Vec<_>>().join("\n").as_str())[0].1[1]
    };
    let (train, test) = (mse("2017"), mse("2019"));
    assert!(train < test, "training year mse {train}, test year mse {test}");
}

#[test]
fn missing_test_year_lists_available_years() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "d.yldh", 40, 1, &["--years", "2010-2012"]);
    let out = run(p, &["train", "--data", "d.yldh", "--model", "tiny", "--test-year", "2015", "--out-dir", "out"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("2015") && err.contains("2010") && err.contains("2012"), "{err}");
}

#[test]
fn diverging_training_exits_nonzero() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "d.yldh", 60, 1, &["--years", "2010-2012"]);
    let out = run(
        p,
        &["train", "--data", "d.yldh", "--model", "tiny", "--test-year", "2012", "--runs", "1", "--lr", "1e200", "--batch-size", "8", "--out-dir", "out"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("epoch 1"), "{err}");
    assert!(!p.join("out/report.csv").exists());
}

#[test]
fn wrong_shape_dataset_names_both_shapes() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let full = synth(p, "d.yldh", 120, 2, &["--years", "2016-2019"]);
    ok(
        p,
        &["train", "--data", "d.yldh", "--model", "tiny", "--test-year", "2019", "--runs", "1", "--epochs", "1", "--out-dir", "out"],
    );
    let short = read_dataset(&full).unwrap().truncate_in_year().unwrap();
    write_dataset(&short, p.join("d19.yldh")).unwrap();
    let out = run(p, &["eval", "--checkpoint", "out/checkpoints/2019-run0.yldh", "--data", "d19.yldh", "--test-year", "2019"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("19") && err.contains("34"), "{err}");
}

#[test]
fn in_year_checkpoint_evaluates_on_full_season_data() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "d.yldh", 120, 4, &["--years", "2016-2019"]);
    ok(
        p,
        &["train", "--data", "d.yldh", "--model", "tiny", "--in-year", "--test-year", "2018", "--runs", "1", "--epochs", "1", "--out-dir", "out"],
    );
    let report = csv_rows(&fs::read_to_string(p.join("out/report.csv")).unwrap());
    let out = ok(p, &["eval", "--checkpoint", "out/checkpoints/2018-run0.yldh", "--data", "d.yldh", "--test-year", "2018"]);
    let row = &csv_rows(out.lines().skip_while(|l| !l.starts_with("year,")).collect::<Vec<_>>().join("\n").as_str())[0];
    assert_eq!(row.1[1], report[0].1[1]);
}

#[test]
fn dry_run_resolves_preset_defaults() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let resolved = |model: &str| -> Value {
        let out = ok(
            p,
            &["train", "--data", "none.yldh", "--model", model, "--test-year", "2019", "--out-dir", "out", "--dry-run"],
        );
        serde_json::from_str(&out).unwrap()
    };
    let w24 = resolved("cvtw24");
    assert_eq!(w24["model"]["stages"].as_array().unwrap().len(), 3);
    assert_eq!(w24["train"]["epochs"], 250);
    assert_eq!(w24["train"]["learning_rate"], 0.00025);
    assert_eq!(resolved("cvt13")["train"]["epochs"], 150);
    assert_eq!(resolved("cvt21")["train"]["epochs"], 200);
    assert!(!p.join("out").exists());
}

#[test]
fn gradcheck_is_deterministic_and_flags_corruption() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let args = ["gradcheck", "--model", "tiny", "--seed", "3", "--max-entries", "4"];
    let a = ok(p, &args);
    let b = ok(p, &args);
    assert_eq!(a, b);
    assert!(a.contains("PASS"));
    assert!(a.lines().any(|l| l.starts_with("stage1.embed")), "{a}");

    let out = run(p, &["gradcheck", "--model", "tiny", "--seed", "3", "--max-entries", "4", "--corrupt-gradient", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL: worst offender"), "{text}");
}
