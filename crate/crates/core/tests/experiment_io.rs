use std::fs;

use evproc::experiment::{emit_plot_data, load_config, run_experiment, ExperimentConfig, SamplerKind};
use evproc::Error;

fn bb_config(n: usize, replicates: usize) -> ExperimentConfig {
    let text = format!(
        r#"{{"matrix": {{"n": {n}, "law": "rademacher"}}, "observable": "bb",
            "ensemble": {{"replicates": {replicates}, "master_seed": 1}}, "threads": 2}}"#
    );
    ExperimentConfig::from_json_str(&text).unwrap()
}

fn rows(path: &std::path::Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bridge_run_writes_expected_covariance_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bb_config(300, 60);
    let res = run_experiment(&cfg, dir.path()).unwrap();
    let cov = rows(&dir.path().join("covariance.csv"));
    assert_eq!(cov[0], ["s", "t", "empirical", "se", "finite_n_target", "limit_kernel"]);
    let row = cov
        .iter()
        .find(|r| r[0].parse::<f64>().ok() == Some(0.25) && r[1].parse::<f64>().ok() == Some(0.5))
        .expect("row (1/4, 1/2)");
    assert_eq!(row[4].parse::<f64>().unwrap(), 0.125);
    assert_eq!(row[5].parse::<f64>().unwrap(), 0.125);

    let paths = rows(&dir.path().join("paths.csv"));
    assert_eq!(paths[0], ["replicate", "t", "x"]);
    assert_eq!(paths.len(), 1 + 60 * 101);
    for name in ["paths.csv", "covariance.csv", "diagnostics.json", "manifest.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert_eq!(res.manifest.outputs.len(), 3);
    let raw = fs::read(dir.path().join("covariance.csv")).unwrap();
    assert!(!raw.contains(&b'\r'));
}

#[test]
fn rerun_gives_identical_checksums() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = bb_config(40, 60);
    let r1 = run_experiment(&cfg, a.path()).unwrap();
    let r2 = run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(r1.manifest.outputs, r2.manifest.outputs);
}

#[test]
fn reference_mode_has_the_same_schema() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = bb_config(40, 60);
    run_experiment(&cfg, a.path()).unwrap();
    let mut reference = cfg.clone();
    reference.sampler = SamplerKind::GaussianReference;
    run_experiment(&reference, b.path()).unwrap();
    for name in ["paths.csv", "covariance.csv"] {
        let (x, y) = (rows(&a.path().join(name)), rows(&b.path().join(name)));
        assert_eq!(x[0], y[0], "{name}");
        assert_eq!(x.len(), y.len(), "{name}");
        let key = |r: &Vec<String>| r[..2].to_vec();
        assert_eq!(
            x.iter().map(key).collect::<Vec<_>>(),
            y.iter().map(key).collect::<Vec<_>>()
        );
    }
}

#[test]
fn slices_follow_the_bridge_kernel() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&bb_config(40, 60), dir.path()).unwrap();
    let out = emit_plot_data(dir.path()).unwrap();
    let slices = rows(&out);
    assert_eq!(slices[0], ["s", "t", "empirical", "limit"]);
    let mut seen = 0;
    for r in &slices[1..] {
        let v: Vec<f64> = r.iter().map(|x| x.parse().unwrap()).collect();
        assert!([0.25, 0.5, 0.75].contains(&v[0]));
        if v[0] == 0.5 {
            assert!((v[3] - 0.5f64.min(v[1]) * (1.0 - 0.5f64.max(v[1]))).abs() < 1e-15);
            seen += 1;
        }
    }
    assert_eq!(seen, 13);
}

#[test]
fn ou_slice_value_at_terminal_time() {
    let text = r#"{"matrix": {"n": 40}, "observable": {"type": "ou", "theta": 2, "sigma": 1},
                   "ensemble": {"replicates": 12, "master_seed": 3}, "checks": ["covariance"]}"#;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&ExperimentConfig::from_json_str(text).unwrap(), dir.path()).unwrap();
    let slices = rows(&emit_plot_data(dir.path()).unwrap());
    let want = (1.0 - (-4.0f64).exp()) / 4.0;
    assert!((want - 0.2454).abs() < 1e-4);
    let at_one = slices[1..]
        .iter()
        .map(|r| r.iter().map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .filter(|v| v[1] == 1.0)
        .map(|v| v[3])
        .collect::<Vec<_>>();
    assert_eq!(at_one.len(), 3);
    assert!(at_one.iter().all(|v| v.is_finite()));
    // The s = 3/4 slice is K_OU(3/4, 1), the s = 1 value is beyond the slices.
    let k = |s: f64, t: f64| ((-2.0 * (t - s)).exp() - (-2.0 * (t + s)).exp()) / 4.0;
    assert!((at_one[2] - k(0.75, 1.0)).abs() < 1e-12);
}

#[test]
fn header_only_covariance_gives_header_only_slices() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("covariance.csv"),
        "s,t,empirical,se,finite_n_target,limit_kernel\n",
    )
    .unwrap();
    let out = emit_plot_data(dir.path()).unwrap();
    assert_eq!(fs::read_to_string(out).unwrap(), "s,t,empirical,limit\n");
}

#[test]
fn missing_covariance_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(emit_plot_data(dir.path()), Err(Error::MissingArtifact(_))));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let cfg = bb_config(300, 400);
    fs::write(&path, cfg.to_json_string()).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);
    fs::write(&path, r#"{"n": 300, "law": "rademacher", "observable": {"type": "kl", "kernel": "bb", "kappa": 1.5}, "replicates": 4, "master_seed": 1}"#).unwrap();
    let Err(Error::Config(errs)) = load_config(&path) else {
        panic!("kappa accepted")
    };
    assert!(
        errs.iter().any(|e| e.message.contains("kappa must lie in (0,1)")),
        "{errs:?}"
    );
    assert_eq!(Error::Config(errs).exit_code(), 2);
}

#[test]
fn failed_run_leaves_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    // The sin Gram matrix is indefinite at n = 10, which only shows up in the factorization.
    let text = r#"{"matrix": {"n": 10}, "observable": {"type": "from_f", "f": "sin_pi2"}, "indices": {"k": 5},
                   "ensemble": {"replicates": 4, "master_seed": 3}, "checks": ["covariance"]}"#;
    let cfg = ExperimentConfig::from_json_str(text).unwrap();
    let err = run_experiment(&cfg, &out).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(!out.join("paths.csv").exists());
}
