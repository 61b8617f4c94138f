use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn evproc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evproc")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_BB: &str = r#"{"n": 40, "law": "rademacher", "observable": "bb", "replicates": 60, "master_seed": 9}"#;

#[test]
fn simulate_writes_all_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bb.json", SMALL_BB);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = evproc(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        a.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    let rb = evproc(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--threads",
        "4",
    ]);
    assert!([0, 1].contains(&code(&ra)), "{}", String::from_utf8_lossy(&ra.stderr));
    assert_eq!(code(&ra), code(&rb));
    for name in ["paths.csv", "covariance.csv", "diagnostics.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for name in ["paths.csv", "covariance.csv", "diagnostics.json"] {
        assert_eq!(manifest["outputs"][name].as_str().unwrap().len(), 64);
    }
    assert_eq!(code(&evproc(&["slices", "--out", a.to_str().unwrap()])), 0);
    assert!(a.join("slices.csv").is_file());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bb.json", SMALL_BB);
    let run = |seed: &str, sub: &str| {
        let out = dir.path().join(format!("{sub}{seed}"));
        evproc(&[
            "reference",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        fs::read(out.join("paths.csv")).unwrap()
    };
    assert_ne!(run("1", "r"), run("2", "r"));
    assert_eq!(run("3", "x"), run("3", "y"));
}

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(dir.path(), "ok.json", SMALL_BB);
    let out = evproc(&["check", "--config", &ok, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("checks.json").is_file());

    // Ten RL modes with H = 0.7 miss the variance floor at n = 100.
    let failing = write(
        dir.path(),
        "fail.json",
        r#"{"n": 100, "observable": {"type": "kl", "kernel": {"type": "rl_fbm", "h": 0.7}, "kappa": 0.5}, "replicates": 60, "master_seed": 1}"#,
    );
    assert_eq!(code(&evproc(&["check", "--config", &failing])), 1);

    let bad = write(
        dir.path(),
        "bad.json",
        r#"{"n": 100, "observable": {"type": "ou", "theta": -1, "sigma": 1}, "replicates": 60, "master_seed": 1}"#,
    );
    let out = evproc(&["check", "--config", &bad]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("observable.theta"));

    let missing = dir.path().join("nope.json");
    assert_eq!(code(&evproc(&["check", "--config", missing.to_str().unwrap()])), 2);
}

#[test]
fn slices_without_run_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = evproc(&["slices", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("covariance.csv"));
}

#[test]
fn kernels_and_kl_tables() {
    let out = evproc(&["kernels", "--points", "21"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).lines().count() >= 7);

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "kl.json",
        r#"{"n": 100, "observable": {"type": "kl", "kernel": "bb", "kappa": 0.5}, "replicates": 60, "master_seed": 1}"#,
    );
    let out = evproc(&["kl", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let modes = fs::read_to_string(dir.path().join("kl_modes.csv")).unwrap();
    assert_eq!(modes.lines().count(), 11);
    assert!(dir.path().join("kl_functions.csv").is_file());
}
