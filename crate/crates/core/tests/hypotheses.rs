mod common;

use common::builders;
use evproc::experiment::{probe_times, HYPOTHESIS_DELTA};
use evproc::kernels::{make_kernel, nystrom_kl, uniform_grid, KernelSpec};
use evproc::observables::{kl_family, kl_mode_count, norm_and_hypothesis_report};
use evproc::process::{holder_diagnostic, TimeGrid};

fn check_all(n: usize) {
    let grid = TimeGrid::uniform(41).unwrap();
    for (name, fam) in builders(n) {
        let rep = norm_and_hypothesis_report(&fam, &probe_times(), HYPOTHESIS_DELTA).unwrap();
        assert!(rep.passed(), "{name} n={n}: {rep:?}");
        let h = holder_diagnostic(&fam, &grid).unwrap();
        assert!(h.pass, "{name} n={n}: {h:?}");
    }
}

#[test]
fn every_builder_meets_its_declared_bounds_at_100() {
    check_all(100);
}

#[test]
fn every_builder_meets_its_declared_bounds_at_1000() {
    check_all(1000);
}

#[test]
fn rough_fbm_family_has_exponent_twice_hurst() {
    let n = 2000;
    let kernel = make_kernel(KernelSpec::FractionalBm { hurst: 0.2 }).unwrap();
    let m = kl_mode_count(n, 0.5);
    let kl = nystrom_kl(&kernel, 400, m).unwrap();
    let fam = kl_family(n, &kl, 0.5).unwrap();
    let h = fam.holder();
    assert!((h.gamma - 0.4).abs() < 1e-15);
    assert!(h.slack > 0.0);
    let rep = holder_diagnostic(&fam, &TimeGrid::uniform(101).unwrap()).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!(norm_and_hypothesis_report(&fam, &uniform_grid(21), HYPOTHESIS_DELTA)
        .unwrap()
        .passed());
}

/// The declared norm bound of the equiangular family is `1 + λmax(Γ)`,
/// and `λmax(Γ) ≈ γ√n` grows without bound.
#[test]
fn equiangular_norm_bound_grows_like_root_n() {
    let bound = |n: usize| {
        builders(n)
            .into_iter()
            .find(|(name, _)| name == "equiangular gamma=1")
            .unwrap()
            .1
            .norm_bound()
    };
    let (small, large) = (bound(100), bound(1600));
    assert!((small - (1.0 + 0.9 + 0.1 * 100.0)).abs() < 1e-6, "{small}");
    assert!(large / small > 3.5, "{small} -> {large}");
}

/// With `H = 0.7` only ten modes survive at `n = 100` and the variance near
/// `t = 0` falls under the floor `n^{−1+δ}`; by `n = 1000` it clears it.
#[test]
fn smooth_rl_family_needs_larger_n_for_variance_floor() {
    use evproc::kernels::{analytic_kl, AnalyticKl};
    let which = AnalyticKl::RiemannLiouvilleFbm { hurst: 0.7 };
    let report = |n: usize| {
        let kl = analytic_kl(which, kl_mode_count(n, 0.5)).unwrap();
        let fam = kl_family(n, &kl, 0.5).unwrap();
        norm_and_hypothesis_report(&fam, &probe_times(), HYPOTHESIS_DELTA).unwrap()
    };
    let small = report(100);
    assert!(small.trace_ok && small.norm_ok && small.holder_ok);
    assert!(!small.variance_ok, "{small:?}");
    assert!(report(1000).passed());
}
