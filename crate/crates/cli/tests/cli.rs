use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ccatlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccatlab")).args(args).env_remove("CCATLAB_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ccatlab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_row_matches_closed_form() {
    let out = ok(&["toy", "--p0", "0.3", "--lambda", "0.2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(lines.next().is_none());
    let get = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();
    assert_eq!(get("ccat_error"), 0.0);
    assert_eq!(get("at_error"), 0.3);
    assert_eq!(get("numeric_ccat_error"), 0.0);
    assert_eq!(get("numeric_at_error"), 0.3);
    assert!((get("trained_at_error") - 0.3).abs() <= 0.02);
    assert!(get("trained_ccat_error") <= 0.02);
}

#[test]
fn train_writes_model_and_log() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "--regime", "normal", "--dataset", "two_gaussians", "--set", "training.epochs=3", "--out", s(dir.path())]);
    let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,mean_clean_loss,mean_adv_loss,mean_lambda,train_accuracy,lr\n"));
    let model: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(model["dims"], serde_json::json!([2, 32, 32, 2]));
    let cfg: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["training"]["epochs"], 3);
    assert_eq!(cfg["training"]["regime"], "normal");
}

/// Independent recount of the metrics on the fixture (no holdout or TE
/// files next to it, so the records serve all three roles).
#[test]
fn eval_matches_recount() {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/eval_fixture.csv");
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("eval_records.csv");
    fs::copy(&src, &records).unwrap();
    ok(&["eval", "--records", s(&records), "--tpr", "0.99"]);
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();

    struct R {
        y: u32,
        cl: u32,
        cc: f64,
        al: u32,
        ac: f64,
    }
    let rows: Vec<R> = fs::read_to_string(&src)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            R { y: f[1].parse().unwrap(), cl: f[2].parse().unwrap(), cc: f[3].parse().unwrap(), al: f[4].parse().unwrap(), ac: f[5].parse().unwrap() }
        })
        .collect();
    // 10 correctly classified; ⌈0.99·10⌉ = 10 → τ is the smallest correct confidence.
    let mut pos: Vec<f64> = rows.iter().filter(|r| r.cl == r.y).map(|r| r.cc).collect();
    pos.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert_eq!(pos.len(), 10);
    let k = (0.99f64 * pos.len() as f64).ceil() as usize;
    let tau = pos[k - 1];
    assert_eq!(tau, 0.5);
    assert_eq!(m["tau"].as_f64().unwrap(), tau);
    assert_eq!(m["tpr"].as_f64().unwrap(), 1.0);

    let te_den = rows.iter().filter(|r| r.cc >= tau).count();
    let te_num = rows.iter().filter(|r| r.cc >= tau && r.cl != r.y).count();
    assert_eq!(m["te_tau"].as_f64().unwrap(), te_num as f64 / te_den as f64);

    let rte_den = rows.iter().filter(|r| r.cc >= tau || r.ac >= tau).count();
    let rte_num = rows.iter().filter(|r| (r.cc >= tau && r.cl != r.y) || (r.ac >= tau && r.al != r.y)).count();
    assert_eq!(m["rte_tau"].as_f64().unwrap(), rte_num as f64 / rte_den as f64);

    let succ: Vec<&R> = rows.iter().filter(|r| r.cl == r.y && r.al != r.y).collect();
    let fpr = succ.iter().filter(|r| r.ac >= tau).count() as f64 / succ.len() as f64;
    assert_eq!(m["fpr"].as_f64().unwrap(), fpr);

    let mut twice = 0;
    for p in &pos {
        for n in &succ {
            twice += if *p > n.ac { 2 } else if *p == n.ac { 1 } else { 0 };
        }
    }
    assert_eq!(m["auc"].as_f64().unwrap(), twice as f64 / (2 * pos.len() * succ.len()) as f64);
    assert_eq!(m["n_records"], 12);
}

fn pipeline(dir: &Path, seed: &str) {
    let d = s(dir);
    ok(&[
        "train", "--regime", "ccat", "--seed", seed, "--out", d,
        "--set", "training.epochs=2",
        "--set", "splits.rte=20",
        "--set", "attacks.0.config.iterations=10",
        "--set", "attacks.1.config.iterations=10",
        "--set", "attacks.2.config.iterations=10",
    ]);
    ok(&["attack", "--model", &format!("{d}/model.json")]);
    ok(&["eval", "--records", &format!("{d}/eval_records.csv"), "--tpr", "0.99", "--tpr", "0.95"]);
    ok(&["profile", "--model", &format!("{d}/model.json"), "--out", &format!("{d}/profile.csv"), "--points", "7"]);
}

const OUTPUTS: [&str; 9] = [
    "model.json",
    "config.json",
    "train_log.csv",
    "attack_records.csv",
    "eval_records.csv",
    "te_records.csv",
    "holdout_records.csv",
    "metrics.json",
    "profile.csv",
];

#[test]
fn identical_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "7");
    pipeline(b.path(), "7");
    for f in OUTPUTS.iter().chain(&["metrics_all.json"]) {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    pipeline(c.path(), "8");
    assert_ne!(fs::read(a.path().join("model.json")).unwrap(), fs::read(c.path().join("model.json")).unwrap());

    // Every profile row is a probability vector.
    let profile = fs::read_to_string(a.path().join("profile.csv")).unwrap();
    for line in profile.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn seed_env_var_is_the_default() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&["train", "--regime", "normal", "--seed", "5", "--set", "training.epochs=1", "--out", s(a.path())]);
    let out = Command::new(env!("CARGO_BIN_EXE_ccatlab"))
        .args(["train", "--regime", "normal", "--set", "training.epochs=1", "--out", s(b.path())])
        .env("CCATLAB_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["model.json", "config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_input_exits_nonzero_with_message() {
    for args in [
        vec!["train", "--no-such-flag"],
        vec!["train", "--regime", "fancy"],
        vec!["train", "--set", "training.batch_size=0"],
        vec!["train", "--set", "training.epochs=many"],
        vec!["train", "--set", "noequals"],
        vec!["eval", "--records", "/nonexistent/records.csv"],
        vec!["toy", "--epsilon", "0"],
        vec!["frobnicate"],
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut full = args.clone();
        if args[0] == "train" {
            full.extend(["--out", s(dir.path())]);
        }
        let out = ccatlab(&full);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
}
