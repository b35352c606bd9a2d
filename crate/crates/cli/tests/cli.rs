use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_factrfm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn out_dir(tmp: &TempDir, name: &str) -> PathBuf {
    tmp.path().join(name)
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn parity_example_learns_the_parity() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "parity");
    let out = run(&["rfm", "--task", "parity", "--out", s(&dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = read_json(dir.join("results.json"));
    assert_eq!(results["status"], "ok");
    assert_eq!(results["testAccuracy"], 1.0);
    assert!(results["supportConcentration"].as_f64().unwrap() >= 0.9);
    let m = fs::read_to_string(dir.join("matrices/M.csv")).unwrap();
    assert_eq!(m.lines().count(), 50);
    let trace = fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,trainLoss,trainAcc,testLoss,testAcc,factMinEig,factMaxEig,corrDiagnostics"));
    assert_eq!(trace.lines().count(), 1 + 6);
}

#[test]
fn manifest_hashes_describe_the_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "m");
    let out = run(&["rfm", "--d", "6", "--n", "40", "--n-test", "20", "--iters", "1", "--out", s(&dir)]);
    assert_eq!(code(&out), 0);
    let manifest = read_json(dir.join("manifest.json"));
    assert_eq!(manifest["command"], "rfm");
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["resolvedConfig"]["task"]["d"], 6);
    let outputs = manifest["outputs"].as_object().unwrap();
    for rel in ["results.json", "trace.csv", "matrices/M.csv"] {
        let bytes = fs::read(dir.join(rel)).unwrap();
        assert_eq!(outputs[rel], blob_hash(&bytes), "{rel}");
    }
    let resolved = serde_json::to_string(&manifest["resolvedConfig"]).unwrap();
    assert_eq!(manifest["configHash"], blob_hash(resolved.as_bytes()));
}

#[test]
fn csv_input_is_hashed_in_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("toy.csv");
    let mut text = String::from("a,b,label\n");
    for i in 0..40 {
        let x = i as f64 / 40.0;
        text.push_str(&format!("{x},{},{}\n", 1.0 - x, (i % 2)));
    }
    fs::write(&csv, &text).unwrap();
    let dir = out_dir(&tmp, "csv");
    let out = run(&["rfm", "--task", "csv", "--csv", s(&csv), "--iters", "1", "--out", s(&dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(dir.join("manifest.json"));
    assert_eq!(manifest["inputs"][0]["hash"], blob_hash(text.as_bytes()));
}

#[test]
fn unknown_flag_exits_2_without_files() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "never");
    let out = run(&["rfm", "--bogus", "--out", s(&dir)]);
    assert_eq!(code(&out), 2);
    assert!(!dir.exists());
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn invalid_values_write_an_error_result() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "bad");
    let out = run(&["rfm", "--ridge", "-1", "--out", s(&dir)]);
    assert_eq!(code(&out), 2);
    let results = read_json(dir.join("results.json"));
    assert_eq!(results["status"], "error");
    assert_eq!(results["error"]["code"], "InvalidConfig");

    let dir = out_dir(&tmp, "bw");
    let out = run(&["rfm", "--kernel", "square", "--bandwidth", "2", "--out", s(&dir)]);
    assert_eq!(code(&out), 2);
    assert_eq!(read_json(dir.join("results.json"))["error"]["code"], "InvalidConfig");

    let dir = out_dir(&tmp, "fact0");
    let cfg = tmp.path().join("fact0.json");
    fs::write(&cfg, r#"{"algorithm": {"ridge": 0, "allowZeroRidge": true}}"#).unwrap();
    let out = run(&["rfm", "--config", s(&cfg), "--out", s(&dir)]);
    assert_eq!(code(&out), 2);
    assert_eq!(read_json(dir.join("results.json"))["error"]["code"], "FactUndefined");

    let dir = out_dir(&tmp, "threads");
    let out = run(&["diagnose", "--threads", "0", "--out", s(&dir)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_3_with_trace() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("div.json");
    fs::write(&cfg, r#"{"task": {"kind": "parity", "d": 8, "n": 50, "nTest": 20}, "algorithm": {"divergenceCap": 1e-3, "iterations": 3}}"#).unwrap();
    let dir = out_dir(&tmp, "div");
    let out = run(&["rfm", "--config", s(&cfg), "--out", s(&dir)]);
    assert_eq!(code(&out), 3);
    let results = read_json(dir.join("results.json"));
    assert_eq!(results["error"]["code"], "Diverged");
    assert!(dir.join("trace.csv").exists());
}

#[test]
fn config_file_layers_under_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"command": "rfm", "seed": 5, "task": {"kind": "parity", "d": 10, "n": 60, "nTest": 30}, "algorithm": {"iterations": 1, "ridge": 1e-3}}"#,
    )
    .unwrap();
    let dir = out_dir(&tmp, "layer");
    let out = run(&["rfm", "--config", s(&cfg), "--iters", "2", "--out", s(&dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = &read_json(dir.join("manifest.json"))["resolvedConfig"];
    assert_eq!(resolved["seed"], 5);
    assert_eq!(resolved["task"]["d"], 10);
    assert_eq!(resolved["algorithm"]["ridge"], 1e-3);
    assert_eq!(resolved["algorithm"]["iterations"], 2);
    assert_eq!(resolved["algorithm"]["kernel"]["bandwidth"], 5.0);

    let dir = out_dir(&tmp, "wrong");
    let out = run(&["separation", "--config", s(&cfg), "--out", s(&dir)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diagnose_scores_a_saved_matrix_and_builds_min_norm_networks() {
    let tmp = TempDir::new().unwrap();
    let m = tmp.path().join("m.csv");
    // 2×2 blocks of size 3, each circulant.
    let c = [[3.0, 1.0, 2.0], [2.0, 3.0, 1.0], [1.0, 2.0, 3.0]];
    let mut rows = Vec::new();
    for i in 0..6 {
        let row: Vec<String> = (0..6).map(|j| format!("{}", c[i % 3][j % 3] + c[j % 3][i % 3])).collect();
        rows.push(row.join(","));
    }
    fs::write(&m, rows.join("\n") + "\n").unwrap();
    let dir = out_dir(&tmp, "diag");
    let out = run(&["diagnose", "--matrix", s(&m), "--block", "3", "--support", "0,1", "--out", s(&dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(dir.join("results.json"));
    assert_eq!(r["dim"], 6);
    assert!((r["circulantScore"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(r["supportConcentration"].as_f64().unwrap() > 0.0);

    let q = tmp.path().join("q.csv");
    fs::write(&q, "2,0\n0,-16\n").unwrap();
    let dir = out_dir(&tmp, "minnorm");
    let out = run(&["diagnose", "--min-norm", s(&q), "--out", s(&dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(dir.join("results.json"));
    let expected = 2.0 * (2f64.powf(2.0 / 3.0) + 16f64.powf(2.0 / 3.0));
    assert!((r["minNormCost"].as_f64().unwrap() - expected).abs() < 1e-10);
    assert!(r["representationError"].as_f64().unwrap() < 1e-10);
}

#[test]
fn training_commands_run_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let dir = out_dir(&tmp, "nn");
    let out = run(&[
        "nn-fact", "--n", "40", "--input-dim", "5", "--outputs", "2", "--teacher-hidden", "4", "--hidden", "8,8", "--epochs", "20",
        "--batch-size", "0", "--lr", "0.05", "--out", s(&dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(dir.join("results.json"));
    assert!(!r["correlations"].as_array().unwrap().is_empty());
    assert!(dir.join("model.json").exists());
    assert!(dir.join("matrices/layer0_WtW.csv").exists());

    let dir = out_dir(&tmp, "sep");
    let out = run(&["separation", "--steps", "200", "--log-every", "50", "--out", s(&dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(dir.join("results.json"));
    assert!(r["cosFact"].is_number());
    assert!(r["cosAgop"].is_number());

    let dir = out_dir(&tmp, "dl");
    let out = run(&["deep-linear", "--depths", "2", "--n", "50", "--hidden", "8", "--epochs", "50", "--out", s(&dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(dir.join("trace.csv")).unwrap().lines().count() >= 2);

    let dir = out_dir(&tmp, "tau");
    let out = run(&["tau-kprime", "--modulus", "5", "--iters", "1", "--max-pairs", "30", "--out", s(&dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pairs = fs::read_to_string(dir.join("tau_kprime.csv")).unwrap();
    assert_eq!(pairs.lines().next(), Some("kprime,tau"));
    assert_eq!(pairs.lines().count(), 31);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let a = out_dir(&tmp, "t1");
    let b = out_dir(&tmp, "t2");
    let args = ["rfm", "--d", "8", "--n", "60", "--n-test", "30", "--iters", "2"];
    assert_eq!(code(&run(&[&args[..], &["--threads", "1", "--out", s(&a)]].concat())), 0);
    let out = bin().args(args).args(["--out", s(&b)]).env("FACTRFM_THREADS", "2").output().unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(a.join("results.json")).unwrap(), fs::read(b.join("results.json")).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn manifest_replay_is_bit_identical(seed in 0u64..1_000_000, d in 3usize..8, n in 20usize..50, iters in 0usize..3, nfa in any::<bool>()) {
        let tmp = TempDir::new().unwrap();
        let first = out_dir(&tmp, "first");
        let second = out_dir(&tmp, "second");
        let rule = if nfa { "nfa" } else { "fact-geom" };
        let seed = seed.to_string();
        let d = d.to_string();
        let n = n.to_string();
        let iters = iters.to_string();
        let out = run(&["rfm", "--seed", &seed, "--d", &d, "--k", "2", "--n", &n, "--n-test", "10", "--iters", &iters, "--rule", rule, "--ridge", "1e-3", "--out", s(&first)]);
        prop_assert_eq!(code(&out), 0);
        let out = run(&["rfm", "--config", s(&first.join("manifest.json")), "--out", s(&second)]);
        prop_assert_eq!(code(&out), 0);
        prop_assert_eq!(fs::read(first.join("results.json")).unwrap(), fs::read(second.join("results.json")).unwrap());
        prop_assert_eq!(fs::read(first.join("matrices/M.csv")).unwrap(), fs::read(second.join("matrices/M.csv")).unwrap());
    }
}
