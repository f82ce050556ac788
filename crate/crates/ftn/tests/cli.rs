//! Command-line behavior: exit codes, overrides and output files.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn ftn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("FTN_THREADS")
        .output()
        .expect("binary runs")
}

fn digits_path() -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits.csv");
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    assert_eq!(ftn(&["--help"]).status.code(), Some(0));
    assert_eq!(ftn(&["classify", "--help"]).status.code(), Some(0));
}

#[test]
fn unknown_flags_and_conflicts_exit_one() {
    assert_eq!(ftn(&["recovery", "--no-such-flag", "1"]).status.code(), Some(1));
    let o = ftn(&["recovery", "--armijo", "--fixed-step", "0.1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn bad_configuration_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ftn(&["recovery", "--output-dir", out, "--methods", "sgd"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = ftn(&["recovery", "--output-dir", out, "--beta1", "1.5"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    // Keys of the other experiment are rejected rather than ignored.
    let o = ftn(&["recovery", "--output-dir", out, "--image-size", "8"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let cfg = dir.path().join("dup.ini");
    fs::write(&cfg, "[run]\nseed = 1\nseed = 2\n").unwrap();
    let o = ftn(&["recovery", "--config", cfg.to_str().unwrap(), "--output-dir", out]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_data_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = ftn(&["classify", "--output-dir", dir.path().to_str().unwrap(), "--path", "/nonexistent/digits.csv"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn zero_iterations_write_a_single_trace_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ftn(&["recovery", "--output-dir", out, "--max-iters", "0", "--bases", "legendre"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for method in ["grad", "ngrad"] {
        let trace = fs::read_to_string(dir.path().join(format!("trace_{method}_legendre.csv"))).unwrap();
        let lines: Vec<&str> = trace.lines().collect();
        assert_eq!(lines.len(), 2, "{trace}");
        assert_eq!(lines[0], "iter,seconds,train_loss,step_size,test_accuracy,method");
        assert!(lines[1].starts_with("0,"));
        assert!(dir.path().join(format!("final_{method}_legendre.ftnc")).exists());
    }
    let echoed = fs::read_to_string(dir.path().join("config.ini")).unwrap();
    assert!(echoed.contains("max-iters = 0") || echoed.contains("max-iters=0"), "{echoed}");
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("rec.ini");
    fs::write(&cfg, "[run]\nexperiment = recovery\n[optimizer]\nmethods = grad\nmax-iters = 7\n").unwrap();
    let o = ftn(&[
        "recovery",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--max-iters",
        "2",
        "--bases",
        "monomial",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace_grad_monomial.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4, "flag must override the file: {trace}");
    assert!(!out.join("trace_ngrad_monomial.csv").exists());
}

#[test]
fn diverging_fixed_step_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let digits = digits_path();
    let o = ftn(&[
        "classify",
        "--output-dir",
        dir.path().to_str().unwrap(),
        "--path",
        &digits,
        "--limit",
        "200",
        "--methods",
        "grad",
        "--fixed-step",
        "1e6",
        "--max-iters",
        "20",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn selftest_passes_and_rejects_corrupted_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ftn(&["recovery", "--output-dir", out, "--max-iters", "3", "--bases", "legendre", "--methods", "ngrad"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = dir.path().join("final_ngrad_legendre.ftnc");

    let o = ftn(&["selftest", "--checkpoint", ckpt.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert_eq!(stdout.lines().count(), 5);

    // Default recovery model: two 3x3x5 leaf cores followed by a 5x5x3 root.
    // Overwrite the first entry of the second (orthonormal) leaf core.
    let mut bytes = fs::read(&ckpt).unwrap();
    let at = bytes.len() - 8 * (5 * 5 * 3 + 3 * 3 * 5);
    bytes[at..at + 8].copy_from_slice(&3.0f64.to_le_bytes());
    let bad = dir.path().join("bad.ftnc");
    fs::write(&bad, &bytes).unwrap();
    let o = ftn(&["selftest", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL checkpoint"));
}
