use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cwbc");

fn cwbc(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CWBC_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cwbc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--iters",
    "150",
    "--batch-size",
    "16",
    "--hidden",
    "16,16",
    "--num-bins",
    "5",
    "--episodes",
    "2",
];

fn dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data.jsonl");
    ok(&["gen-data", "--recipe", "med-replay", "--trajectories", "60", "--seed", "3", "--out", p(&data)]);
    data
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn pipeline_is_byte_reproducible() {
    let run = |dir: &Path| {
        let data = dataset(dir);
        let ckpt = dir.join("policy.json");
        ok(&with_small(&["train", "--data", p(&data), "--variant", "wc", "--seed", "4", "--out", p(&ckpt)]));
        let sweep = dir.join("sweep.csv");
        ok(&with_small(&["sweep", "--ckpt", p(&ckpt), "--data", p(&data), "--ref-episodes", "10", "--out", p(&sweep)]));
        let hist = dir.join("hist.csv");
        ok(&["report-hist", "--data", p(&data), "--num-bins", "5", "--out", p(&hist)]);
        ["data.jsonl", "policy.json", "policy.log.csv", "sweep.csv", "hist.csv"].map(|f| fs::read(dir.join(f)).unwrap())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path());
    assert_eq!(first, run(b.path()));
    assert!(a.path().join("policy.json.manifest.json").exists());
    assert!(a.path().join("data.jsonl.manifest.json").exists());
    let sweep = String::from_utf8(first[3].clone()).unwrap();
    assert!(sweep.starts_with("target,mean,std,normalized\n"));
    assert_eq!(sweep.lines().count(), 11);
}

#[test]
fn seed_env_overrides_config_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nseed = 1\niterations = 100\nbatch_size = 8\nhidden = [8]\n[train.weighting]\nnum_bins = 4\n").unwrap();
    let train = |out: &Path, seed_env: Option<&str>| {
        let mut cmd = Command::new(BIN);
        cmd.args(["train", "--data", p(&data), "--config", p(&cfg), "--out", p(out)]);
        match seed_env {
            Some(s) => cmd.env("CWBC_SEED", s),
            None => cmd.env_remove("CWBC_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(out).unwrap()
    };
    let plain = train(&dir.path().join("a.json"), None);
    let env7 = train(&dir.path().join("b.json"), Some("7"));
    assert_ne!(plain, env7);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["train"]["seed"], 7);
    assert_eq!(manifest["config"]["train"]["iterations"], 100);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let mut bad = Command::new(BIN);
    bad.args(["train", "--data", p(&data), "--out", p(&dir.path().join("c.json"))]).env("CWBC_SEED", "seven");
    assert!(!bad.output().unwrap().status.success());
}

#[test]
fn failures_exit_nonzero_with_error_line() {
    let out = cwbc(&["train", "--data", "/nonexistent/data.jsonl", "--out", "/tmp/never.json"]);
    assert!(!out.status.success());
    let line = String::from_utf8(out.stderr).unwrap();
    let err: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(err["error"], "io");

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, "{\"version\":1,\"horizon\":2,\"state_dim\":1,\"action_dim\":1}\n{\"states\":[[0.0]]}\n").unwrap();
    let out = cwbc(&["report-hist", "--data", p(&broken), "--out", p(&dir.path().join("h.csv"))]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(err["error"], "parse");

    let data = dataset(dir.path());
    let out = cwbc(&["train", "--data", p(&data), "--iters", "0", "--out", p(&dir.path().join("x.json"))]);
    let err: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(err["error"], "invalid_input");
}

#[test]
fn histogram_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("h.csv");
    ok(&["report-hist", "--data", p(&data), "--num-bins", "6", "--lambda", "0", "--kappa", "1e12", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "bin_index,mean_return,frequency,probability");
    for row in lines {
        let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 4);
        assert!((cols[3] - 1.0 / 6.0).abs() < 1e-9);
    }
}

fn read_curve(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

#[test]
fn ablation_alpha_zero_reproduces_weighting_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let abl = dir.path().join("abl");
    ok(&with_small(&[
        "ablate", "--param", "alpha", "--values", "0,10", "--variant", "wc", "--data", p(&data), "--ref-episodes", "10",
        "--out-dir", p(&abl),
    ]));
    assert!(abl.join("curve_alpha_0.csv").exists());
    assert!(abl.join("curve_alpha_10.csv").exists());
    assert!(abl.join("summary_alpha.csv").exists());
    assert!(abl.join("manifest.json").exists());
    let cmp = dir.path().join("cmp");
    ok(&with_small(&[
        "compare", "--variants", "w", "--seeds", "0", "--data", p(&data), "--ref-episodes", "10", "--out-dir", p(&cmp),
    ]));
    let a = read_curve(&abl.join("curve_alpha_0.csv"));
    let w = read_curve(&cmp.join("curve_w_seed0.csv"));
    assert_eq!(a.len(), w.len());
    for (x, y) in a.iter().zip(&w) {
        assert_eq!((x[0], x[1], x[3]), (y[0], y[1], y[3]));
    }
    let summary = fs::read_to_string(abl.join("summary_alpha.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn ablation_lambda_limits_in_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let abl = dir.path().join("abl");
    ok(&with_small(&[
        "ablate", "--param", "lambda", "--values", "0,1e9", "--kappa", "2.0", "--data", p(&data), "--ref-episodes",
        "5", "--out-dir", p(&abl),
    ]));
    let max = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["rewards"].as_array().unwrap().iter().map(|r| r.as_f64().unwrap()).sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let check = |file: &str, use_freq: bool, tol: f64| {
        let rows = read_curve(&abl.join(file));
        let w: Vec<f64> = rows
            .iter()
            .map(|r| (if use_freq { r[2] } else { 1.0 }) * (-(r[1] - max).abs() / 2.0).exp())
            .collect();
        let s: f64 = w.iter().sum();
        for (r, wi) in rows.iter().zip(&w) {
            assert!((r[3] - wi / s).abs() <= tol * (wi / s), "{file}: {} vs {}", r[3], wi / s);
        }
    };
    check("hist_lambda_0.csv", false, 1e-12);
    check("hist_lambda_1000000000.csv", true, 1e-6);
}

#[test]
fn compare_rows_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("cmp");
    ok(&with_small(&[
        "compare", "--variants", "base,base,fc", "--seeds", "0,1", "--data", p(&data), "--ref-episodes", "10",
        "--out-dir", p(&out),
    ]));
    let text = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("variant,"));
    assert_eq!(rows[1], rows[2]);
    assert!(rows[3].starts_with("fc,"));
    assert!(out.join("curve_fc_seed1.csv").exists());
}

#[test]
fn verify_suite_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("verify.csv");
    ok(&["verify", "--suite", "limits", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "oracle,metric,measured,bound,pass");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
    assert!(!cwbc(&["verify", "--suite", "nope"]).status.success());
}

#[test]
fn eval_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let ckpt = dir.path().join("p.json");
    ok(&with_small(&["train", "--data", p(&data), "--variant", "base", "--out", p(&ckpt)]));
    let line = ok(&["eval", "--ckpt", p(&ckpt), "--target", "absolute:12", "--episodes", "3", "--ref-episodes", "5"]);
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["target"], 12.0);
    assert!(v["mean"].as_f64().unwrap().is_finite());
    assert!(!cwbc(&["eval", "--ckpt", p(&ckpt), "--env", "planeworld"]).status.success());
}
