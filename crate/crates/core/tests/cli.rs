use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &["--per-class", "20", "--n-wild", "300", "--n-test", "300"];

fn wildpu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wildpu"))
        .args(args)
        .env_remove("WILDPU_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wildpu(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str]) -> i32 {
    wildpu(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen", "--out-dir", s(dir)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn train(out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out-dir", s(out), "--epochs", "2"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_writes_tables_and_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    gen(a.path(), &["--data-seed", "3"]);
    gen(b.path(), &["--data-seed", "3"]);
    for f in ["labeled.csv", "wild.csv", "test.csv", "wild_audit.csv", "manifest.txt"] {
        assert!(a.path().join(f).is_file(), "{f}");
    }
    for f in ["labeled.csv", "wild.csv", "test.csv", "wild_audit.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let wild = read(a.path().join("wild.csv"));
    assert_eq!(wild.lines().count(), 301);
    assert!(wild.lines().next().unwrap().starts_with("b1,"));
}

#[test]
fn gen_without_contamination_is_all_unknown() {
    let dir = TempDir::new().unwrap();
    gen(dir.path(), &["--pi", "0"]);
    let audit = read(dir.path().join("wild_audit.csv"));
    let labels: Vec<&str> = audit
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(labels.len(), 300);
    assert!(labels.iter().all(|l| *l == "0"));
}

#[test]
fn train_short_run_writes_outputs() {
    let out = TempDir::new().unwrap();
    let t0 = std::time::Instant::now();
    train(out.path(), &["--seeds", "2"]);
    assert!(t0.elapsed().as_secs() < 30);
    for seed in [0, 1] {
        for f in [
            format!("checkpoint_s{seed}.ckpt"),
            format!("history_s{seed}.csv"),
            format!("metrics_s{seed}.csv"),
        ] {
            assert!(out.path().join(&f).is_file(), "{f}");
        }
        let history = read(out.path().join(format!("history_s{seed}.csv")));
        assert_eq!(history.lines().count(), 3);
        assert!(history.starts_with("epoch,lr,R_k_c,R_mpu_c,R_k_e,R_mpu_e,R_kl,R_all"));
    }
    let summary = read(out.path().join("summary.csv"));
    assert!(summary.lines().nth(1).unwrap().starts_with("2,"));
    assert!(out.path().join("summary.txt").is_file());
}

#[test]
fn train_from_generated_tables_and_eval_recomputes_from_confusion() {
    let data = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    let ev = TempDir::new().unwrap();
    gen(data.path(), &[]);
    train(out.path(), &["--data-dir", s(data.path())]);
    let ckpt = out.path().join("checkpoint_s0.ckpt");
    ok(&["eval", "--out-dir", s(ev.path()), "--checkpoint", s(&ckpt), "--data-dir", s(data.path())]);

    let metrics = read(ev.path().join("metrics.csv"));
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "open_oa,closed_oa,f1_u,auc_u,score");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let open_oa: f64 = row[0].parse().unwrap();
    let f1_u: f64 = row[2].parse().unwrap();

    let conf: Vec<Vec<u64>> = read(ev.path().join("confusion.csv"))
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let total: u64 = conf.iter().flatten().sum();
    assert_eq!(total, 300);
    let diag: u64 = (0..conf.len()).map(|i| conf[i][i]).sum();
    assert_eq!(open_oa, diag as f64 / total as f64);
    let tp = conf[0][0] as f64;
    let fp: u64 = conf.iter().skip(1).map(|r| r[0]).sum();
    let fn_: u64 = conf[0].iter().skip(1).sum();
    let f1 = 2.0 * tp / (2.0 * tp + fp as f64 + fn_ as f64);
    assert!((f1_u - f1).abs() < 1e-12, "{f1_u} vs {f1}");
    for f in ["metrics.txt", "per_class.csv", "manifest.txt"] {
        assert!(ev.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn eval_on_empty_test_table_is_usage_error() {
    let out = TempDir::new().unwrap();
    train(out.path(), &[]);
    let ckpt = out.path().join("checkpoint_s0.ckpt");
    let dim = 20;
    let cols: Vec<String> = (1..=dim).map(|i| format!("b{i}")).collect();
    let empty = out.path().join("empty.csv");
    fs::write(&empty, format!("{},label\n", cols.join(","))).unwrap();
    let ev = out.path().join("ev");
    assert_eq!(
        code(&["eval", "--out-dir", s(&ev), "--checkpoint", s(&ckpt), "--test", s(&empty)]),
        2
    );
}

#[test]
fn manifest_reproduces_metrics_bitwise() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    train(a.path(), &["--seed", "4"]);
    let manifest = a.path().join("manifest.txt");
    ok(&["train", "--config", s(&manifest), "--out-dir", s(b.path())]);
    assert_eq!(
        fs::read(a.path().join("metrics_s4.csv")).unwrap(),
        fs::read(b.path().join("metrics_s4.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.path().join("history_s4.csv")).unwrap(),
        fs::read(b.path().join("history_s4.csv")).unwrap()
    );
}

fn bound_rows(dir: &Path) -> Vec<Vec<String>> {
    let text = read(dir.join("bounds.csv"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..3], ["trial", "size", "t"]);
    lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn check_bounds_exact_trials_all_hold() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&["check-bounds", "--out-dir", s(dir.path()), "--trials", "200"]);
    assert!(stdout.contains("violations  0"));
    let rows = bound_rows(dir.path());
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().all(|r| r.last().unwrap() == "true"));
}

#[test]
fn check_bounds_monte_carlo_edge_cases() {
    // columns after trial,size,t: pi,n_t,r_u,r_pu,observed_gap,bound,...
    let dir = TempDir::new().unwrap();
    ok(&["check-bounds", "--out-dir", s(dir.path()), "--mode", "monte-carlo", "--pi", "0", "--n-mc", "500", "--f-const", "0.3"]);
    let r = &bound_rows(dir.path())[0];
    assert_eq!(r[7], "0");
    assert_eq!(r[8], "0");

    let dir = TempDir::new().unwrap();
    ok(&[
        "check-bounds", "--out-dir", s(dir.path()), "--mode", "monte-carlo", "--pi", "0.5",
        "--taylor-order", "1", "--n-mc", "500",
    ]);
    let r = &bound_rows(dir.path())[0];
    assert_eq!(r[8], "0.25");
    assert_eq!(r.last().unwrap(), "true");
}

#[test]
fn check_bounds_real_mode_is_unsupported() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&["check-bounds", "--out-dir", s(dir.path()), "--mode", "real"]), 5);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["sweep", "--out-dir", s(dir.path()), "--axis", "t", "--values", "1,2,6", "--epochs", "1"];
    args.extend_from_slice(SMALL);
    ok(&args);
    let csv = read(dir.path().join("sweep.csv"));
    let values: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(values, ["1", "2", "6"]);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("t,")));
}

#[test]
fn grad_weights_table() {
    let dir = TempDir::new().unwrap();
    ok(&["grad-weights", "--out-dir", s(dir.path()), "--t-values", "2", "--points", "9"]);
    let csv = read(dir.path().join("grad_weights.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    let last: Vec<f64> = rows[8].split(',').map(|v| v.parse().unwrap()).collect();
    // f = 0.9, t = 2: TBCE weight 1 + f, BCE weight 1 / (1 - f)
    assert_eq!((last[0], last[1]), (0.9, 2.0));
    assert!((last[2] - 1.9).abs() < 1e-12);
    assert!((last[3] - 10.0).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = s(dir.path());
    // missing dataset directory
    assert_eq!(code(&["train", "--out-dir", d, "--data-dir", "/nonexistent/wildpu"]), 2);
    // unknown config key
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "gamma = 3\n").unwrap();
    assert_eq!(code(&["train", "--out-dir", d, "--config", s(&cfg)]), 2);
    // invalid value
    assert_eq!(code(&["train", "--out-dir", d, "--tau", "1.5"]), 2);
    // unreadable checkpoint
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, "not a checkpoint\n").unwrap();
    assert_eq!(code(&["eval", "--out-dir", d, "--checkpoint", s(&junk), "--test", s(&junk)]), 3);
    // output directory below a regular file
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert_eq!(code(&["grad-weights", "--out-dir", s(&blocker.join("sub"))]), 3);
}
