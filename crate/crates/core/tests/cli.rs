//! End-to-end runs of the `pfnn` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pfnn::cli::file_sha256;
use pfnn::datagen::{LabeledImageSet, Provenance};

fn pfnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("PFNN_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pfnn(dir, args);
    assert!(
        out.status.success(),
        "pfnn {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(dir: &Path, args: &[&str]) -> String {
    let out = pfnn(dir, args);
    assert!(!out.status.success(), "pfnn {} unexpectedly succeeded", args.join(" "));
    String::from_utf8(out.stderr).unwrap()
}

/// Small dataset plus a two-epoch run in `run`.
fn trained(dir: &Path) {
    ok(
        dir,
        &[
            "gen-data", "--counts", "24,30,36", "--side", "12", "--seed", "4", "--out", "d.mids",
        ],
    );
    ok(
        dir,
        &[
            "train", "--data", "d.mids", "--epochs", "2", "--seed", "4", "--out", "run",
        ],
    );
}

#[test]
fn gen_data_is_deterministic_across_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data", "--counts", "5,6,7", "--side", "10", "--seed", "3", "--out", "a.mids",
        ],
    );
    ok(
        d,
        &[
            "gen-data",
            "--counts",
            "5,6,7",
            "--side",
            "10",
            "--seed",
            "3",
            "--threads",
            "3",
            "--out",
            "b.mids",
        ],
    );
    ok(
        d,
        &[
            "gen-data", "--counts", "5,6,7", "--side", "10", "--seed", "4", "--out", "c.mids",
        ],
    );
    let hash = |f: &str| file_sha256(&d.join(f)).unwrap();
    assert_eq!(hash("a.mids"), hash("b.mids"));
    assert_ne!(hash("a.mids"), hash("c.mids"));
}

#[test]
fn gen_data_rejects_empty_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let err = stderr_of(tmp.path(), &["gen-data", "--counts", "0,0,0", "--out", "x.mids"]);
    assert!(err.contains("zero"), "{err}");
    assert!(!tmp.path().join("x.mids").exists());
}

#[test]
fn gen_data_augment_and_holdout() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data",
            "--counts",
            "8,40,52",
            "--side",
            "10",
            "--augment-share",
            "0.3",
            "--holdout",
            "10",
            "--out",
            "d.mids",
        ],
    );
    let main = LabeledImageSet::load(d.join("d.mids")).unwrap();
    let blind = LabeledImageSet::load(d.join("d.blind.mids")).unwrap();
    assert_eq!(blind.len(), 10);
    let total = main.len() + blind.len();
    let normal = main.class_counts()[0] + blind.class_counts()[0];
    assert!(normal as f64 >= 0.3 * total as f64);
}

#[test]
fn dedicated_flag_matches_set_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data", "--counts", "12,15,18", "--side", "10", "--seed", "2", "--out", "d.mids",
        ],
    );
    let common = ["train", "--data", "d.mids", "--epochs", "1", "--seed", "2"];
    ok(d, &[&common[..], &["--lambda-fs", "0", "--out", "a"]].concat());
    ok(d, &[&common[..], &["--set", "lambda_fs=0", "--out", "b"]].concat());
    let a = fs::read_to_string(d.join("a/config.txt")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b/config.txt")).unwrap());
    assert!(a.lines().any(|l| l.replace(' ', "") == "lambda_fs=0"), "{a}");
    assert_eq!(
        file_sha256(&d.join("a/checkpoint.pfnn")).unwrap(),
        file_sha256(&d.join("b/checkpoint.pfnn")).unwrap()
    );
    let manifest = fs::read_to_string(d.join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("checkpoint.pfnn") && manifest.contains("history.csv"));
}

#[test]
fn unknown_config_key_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.txt"), "learning_rat = 0.1\n").unwrap();
    let err = stderr_of(
        d,
        &["train", "--config", "bad.txt", "--data", "none.mids", "--out", "r"],
    );
    assert!(err.contains("unknown key `learning_rat`"), "{err}");
    let err = stderr_of(
        d,
        &["train", "--set", "colour=blue", "--data", "none.mids", "--out", "r"],
    );
    assert!(err.contains("unknown key `colour`"), "{err}");
}

#[test]
fn class_count_mismatch_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut set = LabeledImageSet::empty(10, 10, vec!["a".into(), "b".into()], Provenance::Generated);
    for i in 0..12 {
        set.push(&[i as f32 / 12.0; 100], i % 2);
    }
    set.save(d.join("two.mids")).unwrap();
    let err = stderr_of(d, &["train", "--data", "two.mids", "--epochs", "1", "--out", "r"]);
    assert!(err.contains("2 classes") && err.contains("expects 3"), "{err}");
}

#[test]
fn eval_gradcam_pca_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);

    ok(d, &["eval", "--run", "run", "--split", "train", "--split", "test"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["split"], "test");
    assert!(report["overfit_acc"].is_f64());
    assert!(d.join("run/eval/train/report.json").is_file());
    assert!(d.join("run/eval/confusion.csv").is_file());

    ok(d, &["gradcam", "--run", "run", "--correct", "3", "--wrong", "3"]);
    let index = fs::read_to_string(d.join("run/gradcam/index.csv")).unwrap();
    let rows = index
        .lines()
        .filter(|l| l.starts_with("correct,") || l.starts_with("wrong,"))
        .count();
    assert!(rows <= 6);
    let ppms: Vec<_> = fs::read_dir(d.join("run/gradcam"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .collect();
    assert_eq!(ppms.len(), rows);

    ok(d, &["pca", "--run", "run"]);
    let meta = fs::read_to_string(d.join("run/pca/pca_meta.txt")).unwrap();
    assert!(meta.contains("layer=") && meta.contains("selection=auto"), "{meta}");
    let variance = fs::read_to_string(d.join("run/pca/variance.csv")).unwrap();
    for line in variance.lines().skip(1) {
        let cum: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(cum <= 1.0);
    }
    ok(d, &["pca", "--run", "run", "--layer", "fused", "--out", "pca_fused"]);
    assert!(fs::read_to_string(d.join("pca_fused/pca_meta.txt"))
        .unwrap()
        .contains("layer=fused\nselection=fixed"));

    ok(
        d,
        &[
            "train",
            "--data",
            "d.mids",
            "--epochs",
            "1",
            "--seed",
            "4",
            "--gagm",
            "off",
            "--sevector",
            "off",
            "--out",
            "gap",
        ],
    );
    ok(d, &["eval", "--run", "gap"]);
    ok(d, &["report", "--compare", "run", "gap", "--out", "cmp"]);
    let t1 = fs::read_to_string(d.join("cmp/table1.csv")).unwrap();
    let lines: Vec<&str> = t1.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("gagm+se,") && lines[2].starts_with("gap,"), "{t1}");
}

#[test]
fn missing_report_is_explained() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let err = stderr_of(tmp.path(), &["report", "--compare", "empty"]);
    assert!(err.contains("run `eval` first"), "{err}");
}
