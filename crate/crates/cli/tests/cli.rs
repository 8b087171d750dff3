use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn acpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acpo")).args(args).output().expect("spawn acpo")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset so runs stay quick.
fn small_data(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("pairs.txt");
    let o = acpo(&["gen-data", "--vocab", "12", "--resp-len", "6", "--pairs", "64", "--seed", "4", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const SMALL_MODEL: &[&str] = &["--embed", "4", "--window", "3", "--hidden", "6", "--batch", "8"];

fn train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let out = dir.join(name);
    let mut args = vec!["train", "--data", p(data), "--out-dir", p(&out), "--steps", "15"];
    args.extend_from_slice(SMALL_MODEL);
    if !extra.contains(&"--lr") {
        args.extend_from_slice(&["--lr", "0.01"]);
    }
    args.extend_from_slice(extra);
    (acpo(&args), out)
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn gen_data_is_deterministic_and_rejects_full_overlap() {
    let dir = TempDir::new().unwrap();
    let a = small_data(dir.path());
    let first = fs::read(&a).unwrap();
    let b = small_data(dir.path());
    assert_eq!(first, fs::read(b).unwrap());
    assert!(String::from_utf8(first).unwrap().starts_with("# acpo-dataset v1\n"));

    let o = acpo(&["gen-data", "--overlap", "1.0", "--out", p(&dir.path().join("x.txt"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("overlap must leave at least one differing token"));
}

#[test]
fn train_writes_all_outputs() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let (o, out) = train(dir.path(), &data, "run", &["--objective", "acpo"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("telemetry.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
    assert!(column(&csv, "mean_alpha").iter().all(|v| !v.is_empty()));
    assert!(column(&csv, "effective_beta").iter().all(|v| v.is_empty()));
    assert!(fs::read_to_string(out.join("model.ckpt")).unwrap().starts_with("acpo-policy v1"));
    let manifest = fs::read_to_string(out.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("objective=acpo\n"));
    assert!(manifest.contains("data-sha256="));
}

#[test]
fn dpo_has_empty_alpha_columns() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let (o, out) = train(dir.path(), &data, "dpo", &["--objective", "dpo"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(out.join("telemetry.csv")).unwrap();
    for col in ["mean_alpha", "min_alpha", "max_alpha", "frac_alpha_lo", "frac_alpha_hi"] {
        assert!(column(&csv, col).iter().all(|v| v.is_empty()), "{col}");
    }
}

#[test]
fn acpo_with_unit_alpha_reproduces_dpo_losses() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let (o1, dpo) = train(dir.path(), &data, "dpo", &["--objective", "dpo"]);
    let (o2, one) = train(dir.path(), &data, "one", &["--objective", "acpo", "--alpha-lo", "1", "--alpha-hi", "1"]);
    assert_eq!((code(&o1), code(&o2)), (0, 0));
    let a = fs::read_to_string(dpo.join("telemetry.csv")).unwrap();
    let b = fs::read_to_string(one.join("telemetry.csv")).unwrap();
    for col in ["loss", "mean_r_w", "mean_r_l", "mean_logp_w"] {
        assert_eq!(column(&a, col), column(&b, col), "{col}");
    }
    assert!(column(&b, "mean_alpha").iter().all(|v| v == "1"));
}

#[test]
fn telemetry_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let (_, a) = train(dir.path(), &data, "a", &["--objective", "beta-dpo"]);
    let (_, b) = train(dir.path(), &data, "b", &["--objective", "beta-dpo"]);
    assert_eq!(fs::read(a.join("telemetry.csv")).unwrap(), fs::read(b.join("telemetry.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
}

#[test]
fn flags_override_config_and_manifest_replays_the_run() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("# base settings\ndata={}\nobjective=ipo\nsteps=5\nlr=0.5\n", p(&data))).unwrap();
    let out = dir.path().join("cfgrun");
    let mut args = vec!["train", "--config", p(&cfg), "--out-dir", p(&out), "--lr", "0.02"];
    args.extend_from_slice(&SMALL_MODEL[..6]);
    let o = acpo(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("objective=ipo\n"));
    assert!(manifest.contains("steps=5\n"));
    assert!(manifest.contains("lr=0.02\n"));

    let replay = dir.path().join("replay");
    let o = acpo(&["train", "--config", p(&out.join("run_manifest.txt")), "--out-dir", p(&replay)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(out.join("telemetry.csv")).unwrap(),
        fs::read(replay.join("telemetry.csv")).unwrap()
    );
}

#[test]
fn bad_config_and_unknown_objective_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let (o, _) = train(dir.path(), &data, "x", &["--objective", "orpo"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("orpo"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour=red\n").unwrap();
    let o = acpo(&["train", "--config", p(&cfg), "--out-dir", p(&dir.path().join("y"))]);
    assert_eq!(code(&o), 2);

    let o = acpo(&["train", "--data", p(&dir.path().join("missing.txt")), "--out-dir", p(&dir.path().join("z"))]);
    assert_eq!(code(&o), 2);
    let o = acpo(&["train", "--data", p(&data)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let (o, out) = train(dir.path(), &data, "boom", &["--objective", "dpo", "--optimizer", "sgd", "--lr", "1e300"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    // rows before the failure are kept
    let csv = fs::read_to_string(out.join("telemetry.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
}

#[test]
fn compare_writes_one_curve_per_objective() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("cmp.csv");
    let mut args = vec!["compare", "--data", p(&data), "--out", p(&out), "--steps", "10"];
    args.extend_from_slice(SMALL_MODEL);
    let o = acpo(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("objective,step,delta_r_w,margin,mean_logp_w\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("dpo,")).count(), 10);
    assert_eq!(csv.lines().filter(|l| l.starts_with("acpo,")).count(), 10);
    assert!(csv.contains("\ndpo,0,0,0,"));
    assert!(csv.contains("\nacpo,0,0,0,"));
    assert!(dir.path().join("cmp.manifest.txt").exists());

    let mut args = vec!["compare", "--data", p(&data), "--out", p(&out), "--objectives", "dpo,kto"];
    args.extend_from_slice(SMALL_MODEL);
    assert_eq!(code(&acpo(&args)), 2);
}

#[test]
fn verify_passes_and_catches_the_mutation() {
    let o = acpo(&["verify", "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("all 10 checks passed"));

    let o = acpo(&["verify", "--seeds", "1", "--inject-fault", "no-detach"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("oracle"));
    assert_eq!(code(&acpo(&["verify", "--seeds", "0"])), 2);
}
