//! Shared fixtures for the integration tests and the acceptance runner.
#![allow(dead_code)]

use evproc::kernels::{analytic_kl, make_kernel, nystrom_kl, AnalyticKl, GramFunction, KernelSpec};
use evproc::observables::{
    gram_vectors, kl_family, kl_mode_count, orthonormal_projector_family, projector_family, separable_family, GramSpec,
    ObservableFamily, SeparableProfile,
};
use evproc::wigner::{flat_profile, sample_wigner, spectral_decompose, EntryLaw, SpectralData};
use nalgebra::DMatrix;

pub const KAPPA: f64 = 0.5;

/// Every observable builder the crate ships, instantiated at dimension `n`.
///
/// The sin Gram matrix is indefinite for `n ≤ 10`, so that family only
/// appears from `n = 11` on.
pub fn builders(n: usize) -> Vec<(String, ObservableFamily)> {
    let mut out = vec![(
        "orthonormal projector".to_string(),
        orthonormal_projector_family(n).unwrap(),
    )];
    for gamma in [0.0, 1.0, 2.0] {
        let q = gram_vectors(n, &GramSpec::Equiangular { gamma }).unwrap();
        out.push((format!("equiangular gamma={gamma}"), projector_family(q).unwrap()));
    }
    if n >= 11 {
        let q = gram_vectors(n, &GramSpec::FromF(GramFunction::SinPi2)).unwrap();
        out.push(("sin Gram".to_string(), projector_family(q).unwrap()));
    }
    out.push((
        "separable OU theta=2 sigma=1".to_string(),
        separable_family(n, SeparableProfile::OrnsteinUhlenbeck { theta: 2.0, sigma: 1.0 }).unwrap(),
    ));
    out.push((
        "separable indicator".to_string(),
        separable_family(n, SeparableProfile::Indicator).unwrap(),
    ));
    let m = kl_mode_count(n, KAPPA);
    for (name, which) in [
        ("KL bridge", AnalyticKl::BrownianBridge),
        ("KL motion", AnalyticKl::BrownianMotion),
        ("KL RL-fBM H=0.3", AnalyticKl::RiemannLiouvilleFbm { hurst: 0.3 }),
    ] {
        let kl = analytic_kl(which, m).unwrap();
        out.push((name.to_string(), kl_family(n, &kl, KAPPA).unwrap()));
    }
    let fbm = make_kernel(KernelSpec::FractionalBm { hurst: 0.2 }).unwrap();
    let kl = nystrom_kl(&fbm, (4 * m).max(200), m).unwrap();
    out.push(("KL Nystrom fBM H=0.2".to_string(), kl_family(n, &kl, KAPPA).unwrap()));
    out
}

/// `⟨A_s A_t⟩` from dense matrices.
pub fn dense_trace_inner(f: &ObservableFamily, s: f64, t: f64) -> f64 {
    let a = f.evaluate_at(s).unwrap().to_dense();
    let b = f.evaluate_at(t).unwrap().to_dense();
    (a * b).trace() / f.n() as f64
}

/// `√(n/(1+δ_kl)) ⟨u_k, A_t u_l⟩` from a dense `A_t`.
pub fn dense_path_value(sd: &SpectralData, f: &ObservableFamily, k: usize, l: usize, t: f64) -> f64 {
    let a: DMatrix<f64> = f.evaluate_at(t).unwrap().to_dense();
    let uk = sd.eigenvector(k).unwrap();
    let ul = sd.eigenvector(l).unwrap();
    let n = f.n() as f64;
    let scale = if k == l { (n / 2.0).sqrt() } else { n.sqrt() };
    scale * uk.dot(&(a * ul))
}

pub fn flat_spectrum(n: usize, seed: u64) -> SpectralData {
    let w = sample_wigner(&flat_profile(n).unwrap(), EntryLaw::Rademacher, seed);
    spectral_decompose(&w).unwrap()
}
