//! Path evaluation, seeded Monte Carlo ensembles, reference Gaussian
//! sampling and the statistical checks run on the collected paths.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, KlDecomposition};
use crate::linalg::semidefinite_cholesky;
use crate::observables::{mixed_trace_inner, step_count, HolderBound, ObservableFamily, Payload};
use crate::wigner::{derive_seed, sample_wigner, spectral_decompose, EntryLaw, SpectralData, VarianceProfile};

/// Ascending evaluation times in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidInput("time grid is empty".into()));
        }
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidTime(t));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("time grid must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    /// `points` equally spaced times from 0 to 1.
    pub fn uniform(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 grid points, got {points}"
            )));
        }
        Self::new(crate::kernels::uniform_grid(points))
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the grid time within `1e-12` of `t`.
    pub fn position(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| (x - t).abs() <= 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathMeta {
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub family: String,
    pub seed: u64,
    /// How a reference path was sampled; `None` for eigenvector paths.
    pub method: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub values: Vec<f64>,
    pub meta: PathMeta,
}

/// Precomputed time tables for evaluating `X_{k,ℓ}` of one family on one grid.
#[derive(Debug, Clone)]
pub struct PathEvaluator {
    family: ObservableFamily,
    grid: TimeGrid,
    /// Diagonal families: amplitudes per grid time and component.
    amplitudes: Vec<Vec<f64>>,
    /// Projector families: `⌊n t⌋` per grid time.
    steps: Vec<usize>,
    label: String,
}

impl PathEvaluator {
    pub fn new(family: &ObservableFamily, grid: &TimeGrid, label: impl Into<String>) -> Self {
        let (amplitudes, steps) = match family.payload() {
            Payload::Projector(_) => (
                Vec::new(),
                grid.times().iter().map(|&t| step_count(family.n(), t)).collect(),
            ),
            _ => (
                grid.times().iter().map(|&t| family.diagonal_amplitudes(t)).collect(),
                Vec::new(),
            ),
        };
        Self {
            family: family.clone(),
            grid: grid.clone(),
            amplitudes,
            steps,
            label: label.into(),
        }
    }

    pub fn family(&self) -> &ObservableFamily {
        &self.family
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// `√(n/(1+δ_{kℓ}))·⟨u_k, A_t u_ℓ⟩` on the grid.
    pub fn eval(&self, spectral: &SpectralData, k: usize, l: usize) -> Result<Vec<f64>> {
        let n = self.family.n();
        if spectral.n() != n {
            return Err(Error::InvalidInput(format!(
                "matrix dimension {} does not match family dimension {n}",
                spectral.n()
            )));
        }
        let uk = spectral.eigenvector(k)?;
        let ul = spectral.eigenvector(l)?;
        let pref = if k == l {
            (n as f64 / 2.0).sqrt()
        } else {
            (n as f64).sqrt()
        };
        let values = match self.family.payload() {
            Payload::Projector(p) => {
                let (pk, pl) = match p.vectors() {
                    None => (uk.clone(), ul.clone()),
                    Some(q) => (q * &uk, q * &ul),
                };
                let mut cum = Vec::with_capacity(n + 1);
                cum.push(0.0);
                let mut acc = 0.0;
                for (a, b) in pk.iter().zip(pl.iter()) {
                    acc += a * b;
                    cum.push(acc);
                }
                let overlap = uk.dot(&ul);
                self.steps
                    .iter()
                    .map(|&b| pref * (cum[b] - b as f64 / n as f64 * overlap))
                    .collect()
            }
            _ => {
                let coeffs: Vec<f64> = self
                    .family
                    .components()
                    .iter()
                    .map(|c| {
                        let mut plus = 0.0;
                        let mut minus = 0.0;
                        for j in 0..c.half {
                            plus += uk[c.start + j] * ul[c.start + j];
                            minus += uk[c.start + c.half + j] * ul[c.start + c.half + j];
                        }
                        c.lead_sign * c.scale * (plus - minus)
                    })
                    .collect();
                self.amplitudes
                    .iter()
                    .map(|amps| pref * amps.iter().zip(&coeffs).map(|(a, c)| a * c).sum::<f64>())
                    .collect()
            }
        };
        Ok(values)
    }
}

/// Evaluates one path `t ↦ X_{k,ℓ}(t)` for the given spectrum.
pub fn eval_path(
    spectral: &SpectralData,
    family: &ObservableFamily,
    k: usize,
    l: usize,
    grid: &TimeGrid,
) -> Result<PathSample> {
    let ev = PathEvaluator::new(family, grid, format!("{:?}", family.kind()));
    let values = ev.eval(spectral, k, l)?;
    Ok(PathSample {
        values,
        meta: PathMeta {
            n: family.n(),
            k,
            l,
            family: ev.label,
            seed: 0,
            method: None,
        },
    })
}

/// Matrix ensemble shared by every probe of a run.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub profile: VarianceProfile,
    pub law: EntryLaw,
    pub replicates: usize,
    pub master_seed: u64,
}

/// One statistic `X_{k,ℓ}^{A}` to record per replicate.
#[derive(Debug, Clone)]
pub struct Probe {
    pub evaluator: PathEvaluator,
    pub k: usize,
    pub l: usize,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub paths: Vec<PathSample>,
}

impl Ensemble {
    pub fn replicates(&self) -> usize {
        self.paths.len()
    }

    /// Values of every replicate at grid index `i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.values[i]).collect()
    }

    fn column_at(&self, t: f64) -> Result<Vec<f64>> {
        let i = self
            .grid
            .position(t)
            .ok_or_else(|| Error::InvalidInput(format!("time {t} is not on the ensemble grid")))?;
        Ok(self.column(i))
    }
}

/// Runs `cfg.replicates` independent matrices and records every probe on
/// each of them. Replicate `r` uses the seed `derive_seed(master_seed, r)`,
/// so the result does not depend on how replicates are scheduled.
pub fn run_ensembles(cfg: &EnsembleConfig, probes: &[Probe]) -> Result<Vec<Ensemble>> {
    if cfg.replicates == 0 {
        return Err(Error::InsufficientReplicates { needed: 1, got: 0 });
    }
    let n = cfg.profile.n();
    for p in probes {
        if p.evaluator.family().n() != n {
            return Err(Error::InvalidInput(format!(
                "probe family has dimension {}, matrices have {n}",
                p.evaluator.family().n()
            )));
        }
        for idx in [p.k, p.l] {
            if idx == 0 || idx > n {
                return Err(Error::InvalidIndex { index: idx, n });
            }
        }
    }
    let per_replicate: Vec<Vec<PathSample>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<PathSample>> {
            let seed = derive_seed(cfg.master_seed, r as u64);
            let w = sample_wigner(&cfg.profile, cfg.law, seed);
            let spectral = spectral_decompose(&w)?;
            probes
                .iter()
                .map(|p| {
                    Ok(PathSample {
                        values: p.evaluator.eval(&spectral, p.k, p.l)?,
                        meta: PathMeta {
                            n,
                            k: p.k,
                            l: p.l,
                            family: p.evaluator.label().to_string(),
                            seed,
                            method: None,
                        },
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Ensemble> = probes
        .iter()
        .map(|p| Ensemble {
            grid: p.evaluator.grid().clone(),
            paths: Vec::with_capacity(cfg.replicates),
        })
        .collect();
    for paths in per_replicate {
        for (ens, path) in out.iter_mut().zip(paths) {
            ens.paths.push(path);
        }
    }
    Ok(out)
}

/// Single-probe form of [`run_ensembles`].
pub fn run_ensemble(
    cfg: &EnsembleConfig,
    family: &ObservableFamily,
    k: usize,
    l: usize,
    grid: &TimeGrid,
) -> Result<Ensemble> {
    let probe = Probe {
        evaluator: PathEvaluator::new(family, grid, format!("{:?}", family.kind())),
        k,
        l,
    };
    Ok(run_ensembles(cfg, &[probe])?.remove(0))
}

/// `Ĉ(s,t) = M⁻¹ Σ_m X⁽ᵐ⁾(s)X⁽ᵐ⁾(t)` on a probe sub-grid, with standard
/// errors `sd(X(s)X(t))/√M` when `M ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCovariance {
    pub probe: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub se: Option<DMatrix<f64>>,
    pub replicates: usize,
}

pub fn empirical_covariance(ens: &Ensemble, probe: &[f64]) -> Result<EmpiricalCovariance> {
    let m = ens.replicates();
    if m == 0 {
        return Err(Error::InsufficientReplicates { needed: 1, got: 0 });
    }
    let idx: Vec<usize> = probe
        .iter()
        .map(|&t| {
            ens.grid
                .position(t)
                .ok_or_else(|| Error::InvalidInput(format!("probe time {t} is not on the ensemble grid")))
        })
        .collect::<Result<_>>()?;
    let p = probe.len();
    let mf = m as f64;
    let mut cov = DMatrix::zeros(p, p);
    let mut se = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let (ia, ib) = (idx[a], idx[b]);
            let mut sum = 0.0;
            for path in &ens.paths {
                sum += path.values[ia] * path.values[ib];
            }
            let mean = sum / mf;
            let mut ss = 0.0;
            for path in &ens.paths {
                let d = path.values[ia] * path.values[ib] - mean;
                ss += d * d;
            }
            let s = if m >= 2 {
                (ss / (mf - 1.0)).sqrt() / mf.sqrt()
            } else {
                f64::NAN
            };
            cov[(a, b)] = mean;
            cov[(b, a)] = mean;
            se[(a, b)] = s;
            se[(b, a)] = s;
        }
    }
    Ok(EmpiricalCovariance {
        probe: probe.to_vec(),
        cov,
        se: (m >= 2).then_some(se),
        replicates: m,
    })
}

/// Exact sampler for a centered Gaussian process on a fixed grid.
#[derive(Debug, Clone)]
pub struct ReferenceSampler {
    grid: TimeGrid,
    /// `values = factor · ζ` with `ζ` standard normal.
    factor: DMatrix<f64>,
    method: &'static str,
    label: String,
}

impl ReferenceSampler {
    /// `G(t) = Σ_k √λ_k ζ_k ψ_k(t)` over the held modes.
    pub fn from_kl(kl: &KlDecomposition, grid: &TimeGrid) -> Result<Self> {
        if let Some(md) = kl.modes().iter().find(|md| md.lambda.is_nan() || md.lambda < 0.0) {
            return Err(Error::InvalidInput(format!("negative eigenvalue {}", md.lambda)));
        }
        let factor = DMatrix::from_fn(grid.len(), kl.len(), |i, k| {
            let md = &kl.modes()[k];
            md.lambda.sqrt() * md.psi.eval(grid.times()[i])
        });
        Ok(Self {
            grid: grid.clone(),
            factor,
            method: "kl_truncation",
            label: format!("kl({:?}, {} modes)", kl.source(), kl.len()),
        })
    }

    /// Factorization of the grid Gram matrix with diagonal jitter
    /// `1e-12·mean(diag)`.
    pub fn from_kernel(kernel: &Kernel, grid: &TimeGrid) -> Result<Self> {
        let mut g = kernel.gram(grid.times());
        let jitter = 1e-12 * g.diagonal().mean().abs();
        for i in 0..g.nrows() {
            g[(i, i)] += jitter;
        }
        let factor = semidefinite_cholesky(&g)?;
        Ok(Self {
            grid: grid.clone(),
            factor,
            method: "gram_cholesky",
            label: kernel.name(),
        })
    }

    pub fn method(&self) -> &str {
        self.method
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn sample(&self, seed: u64) -> PathSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(self.factor.ncols(), |_, _| StandardNormal.sample(&mut rng));
        let values = (&self.factor * z).iter().copied().collect();
        PathSample {
            values,
            meta: PathMeta {
                n: 0,
                k: 0,
                l: 0,
                family: self.label.clone(),
                seed,
                method: Some(self.method.to_string()),
            },
        }
    }
}

/// Source of a reference Gaussian path.
#[derive(Debug, Clone, Copy)]
pub enum ReferenceSource<'a> {
    Kl(&'a KlDecomposition),
    Kernel(&'a Kernel),
}

/// One reference path on `grid`.
pub fn reference_gaussian_path(source: ReferenceSource<'_>, grid: &TimeGrid, seed: u64) -> Result<PathSample> {
    let sampler = match source {
        ReferenceSource::Kl(kl) => ReferenceSampler::from_kl(kl, grid)?,
        ReferenceSource::Kernel(k) => ReferenceSampler::from_kernel(k, grid)?,
    };
    Ok(sampler.sample(seed))
}

/// `replicates` reference paths with the same seed derivation as the
/// matrix ensembles.
pub fn run_reference_ensemble(sampler: &ReferenceSampler, replicates: usize, master_seed: u64) -> Result<Ensemble> {
    if replicates == 0 {
        return Err(Error::InsufficientReplicates { needed: 1, got: 0 });
    }
    let paths = (0..replicates)
        .into_par_iter()
        .map(|r| sampler.sample(derive_seed(master_seed, r as u64)))
        .collect();
    Ok(Ensemble {
        grid: sampler.grid.clone(),
        paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianityReport {
    pub t: f64,
    pub replicates: usize,
    pub target_variance: f64,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
}

/// Minimum ensemble size for [`gaussianity_test`].
pub const MIN_GAUSSIANITY_REPLICATES: usize = 50;

/// Asymptotic Kolmogorov tail `P(K > λ) = 2 Σ_{j≥1} (−1)^{j−1} e^{−2j²λ²}`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 * sum.abs().max(1e-300) {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `samples` against `N(0, variance)` and its
/// asymptotic p-value.
pub fn ks_normal(samples: &[f64], variance: f64) -> Result<(f64, f64)> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::param(format!(
            "target variance must be positive, got {variance}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientReplicates { needed: 1, got: 0 });
    }
    let normal = Normal::standard();
    let sd = variance.sqrt();
    let mut z: Vec<f64> = samples.iter().map(|x| x / sd).collect();
    z.sort_by(f64::total_cmp);
    let m = z.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in z.iter().enumerate() {
        let f = normal.cdf(x);
        d = d.max((i as f64 + 1.0) / m - f).max(f - i as f64 / m);
    }
    let sm = m.sqrt();
    Ok((d, kolmogorov_tail((sm + 0.12 + 0.11 / sm) * d)))
}

/// KS comparison of `X(t)` against `N(0, target_variance)` plus sample
/// skewness and excess kurtosis.
pub fn gaussianity_test(ens: &Ensemble, t: f64, target_variance: f64) -> Result<GaussianityReport> {
    if !(target_variance > 0.0 && target_variance.is_finite()) {
        return Err(Error::param(format!(
            "target variance must be positive, got {target_variance}"
        )));
    }
    let m = ens.replicates();
    if m < MIN_GAUSSIANITY_REPLICATES {
        return Err(Error::InsufficientReplicates {
            needed: MIN_GAUSSIANITY_REPLICATES,
            got: m,
        });
    }
    let xs = ens.column_at(t)?;
    let (ks_statistic, p_value) = ks_normal(&xs, target_variance)?;
    let mf = m as f64;
    let mean = xs.iter().sum::<f64>() / mf;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / mf;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / mf;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / mf;
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(GaussianityReport {
        t,
        replicates: m,
        target_variance,
        ks_statistic,
        p_value,
        skewness,
        skewness_se: (6.0 / mf).sqrt(),
        excess_kurtosis,
        kurtosis_se: (24.0 / mf).sqrt(),
    })
}

/// `(δ_{ki}δ_{ℓj} + δ_{kj}δ_{ℓi}) / √((1+δ_{ij})(1+δ_{kℓ}))`.
pub fn moment_factor(i: usize, j: usize, k: usize, l: usize) -> f64 {
    let d = |a: usize, b: usize| -> f64 {
        if a == b {
            1.0
        } else {
            0.0
        }
    };
    (d(k, i) * d(l, j) + d(k, j) * d(l, i)) / ((1.0 + d(i, j)) * (1.0 + d(k, l))).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossCovarianceReport {
    pub s: f64,
    pub t: f64,
    pub indices_a: (usize, usize),
    pub indices_b: (usize, usize),
    pub empirical: f64,
    pub se: f64,
    pub prediction: f64,
    pub z_score: f64,
}

/// Compares `M⁻¹ Σ X_A(s) X_B(t)` with the predicted joint moment
/// `factor · ⟨A_s B_t⟩` for two ensembles recorded on the same matrices.
pub fn cross_covariance_check(
    a: &Ensemble,
    family_a: &ObservableFamily,
    s: f64,
    b: &Ensemble,
    family_b: &ObservableFamily,
    t: f64,
) -> Result<CrossCovarianceReport> {
    if a.replicates() != b.replicates() {
        return Err(Error::InvalidPairing(format!(
            "ensembles have {} and {} replicates",
            a.replicates(),
            b.replicates()
        )));
    }
    if let Some(r) = a
        .paths
        .iter()
        .zip(&b.paths)
        .position(|(p, q)| p.meta.seed != q.meta.seed)
    {
        return Err(Error::InvalidPairing(format!(
            "replicate {r} was computed on different matrices"
        )));
    }
    let m = a.replicates();
    if m < 2 {
        return Err(Error::InsufficientReplicates { needed: 2, got: m });
    }
    let (xa, xb) = (a.column_at(s)?, b.column_at(t)?);
    let mf = m as f64;
    let prods: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();
    let empirical = prods.iter().sum::<f64>() / mf;
    let var = prods.iter().map(|p| (p - empirical).powi(2)).sum::<f64>() / (mf - 1.0);
    let se = (var / mf).sqrt();
    let pa = &a.paths[0].meta;
    let pb = &b.paths[0].meta;
    let prediction = moment_factor(pa.k, pa.l, pb.k, pb.l) * mixed_trace_inner(family_a, s, family_b, t)?;
    Ok(CrossCovarianceReport {
        s,
        t,
        indices_a: (pa.k, pa.l),
        indices_b: (pb.k, pb.l),
        empirical,
        se,
        prediction,
        z_score: if se > 0.0 {
            (empirical - prediction) / se
        } else {
            f64::NAN
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderReport {
    /// Largest `⟨(A_t−A_s)²⟩` over grid pairs.
    pub max_increment: f64,
    /// Largest `(⟨(A_t−A_s)²⟩ − slack)/|t−s|^γ`.
    pub max_ratio: f64,
    pub worst_pair: (f64, f64),
    pub declared: HolderBound,
    pub pass: bool,
}

/// Increment check of `family` against its declared `(L, γ, slack)`.
pub fn holder_diagnostic(family: &ObservableFamily, grid: &TimeGrid) -> Result<HolderReport> {
    if grid.len() < 3 {
        return Err(Error::InvalidInput(
            "holder diagnostic needs at least 3 grid points".into(),
        ));
    }
    let h = family.holder();
    let times = grid.times();
    let mut max_increment = 0.0f64;
    let mut max_ratio = f64::NEG_INFINITY;
    let mut worst_pair = (times[0], times[1]);
    for i in 0..times.len() {
        for j in (i + 1)..times.len() {
            let inc = family.increment_variance(times[i], times[j]);
            max_increment = max_increment.max(inc);
            let ratio = (inc - h.slack) / (times[j] - times[i]).powf(h.gamma);
            if ratio > max_ratio {
                max_ratio = ratio;
                worst_pair = (times[i], times[j]);
            }
        }
    }
    Ok(HolderReport {
        max_increment,
        max_ratio,
        worst_pair,
        declared: h,
        pass: h.l.is_finite() && max_ratio <= h.l * (1.0 + 1e-12),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{analytic_kl, make_kernel, AnalyticKl, KernelSpec};
    use crate::observables::{orthonormal_projector_family, separable_family, SeparableProfile};
    use crate::wigner::{flat_profile, WignerMatrix};

    fn bb_config(n: usize, m: usize, seed: u64) -> EnsembleConfig {
        EnsembleConfig {
            profile: flat_profile(n).unwrap(),
            law: EntryLaw::Rademacher,
            replicates: m,
            master_seed: seed,
        }
    }

    #[test]
    fn symmetric_cancellation_gives_zero_path() {
        let w = WignerMatrix::from_entries(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), EntryLaw::Gaussian)
            .unwrap();
        let sd = spectral_decompose(&w).unwrap();
        let u = sd.eigenvector(2).unwrap();
        // A_t = t·diag(1, −1)
        for t in [0.0, 0.3, 1.0] {
            let a = DMatrix::from_diagonal(&DVector::from_vec(vec![t, -t]));
            assert!(u.dot(&(a * &u)).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.5]).is_err());
        let g = TimeGrid::uniform(101).unwrap();
        assert_eq!(g.position(0.25), Some(25));
        assert_eq!(g.times()[100], 1.0);
    }

    #[test]
    fn single_replicate_is_reproducible() {
        let fam = orthonormal_projector_family(40).unwrap();
        let grid = TimeGrid::uniform(11).unwrap();
        let a = run_ensemble(&bb_config(40, 1, 9), &fam, 20, 20, &grid).unwrap();
        let b = run_ensemble(&bb_config(40, 1, 9), &fam, 20, 20, &grid).unwrap();
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.paths[0].values[0], 0.0);
    }

    #[test]
    fn bad_index_rejected() {
        let fam = orthonormal_projector_family(10).unwrap();
        let grid = TimeGrid::uniform(5).unwrap();
        let err = run_ensemble(&bb_config(10, 2, 1), &fam, 11, 1, &grid).unwrap_err();
        assert!(matches!(err, Error::InvalidIndex { index: 11, n: 10 }));
    }

    #[test]
    fn zero_paths_give_zero_covariance() {
        let grid = TimeGrid::uniform(5).unwrap();
        let meta = PathMeta {
            n: 1,
            k: 1,
            l: 1,
            family: "zero".into(),
            seed: 0,
            method: None,
        };
        let ens = Ensemble {
            grid,
            paths: vec![
                PathSample {
                    values: vec![0.0; 5],
                    meta: meta.clone(),
                };
                3
            ],
        };
        let c = empirical_covariance(&ens, &[0.25, 0.5]).unwrap();
        assert_eq!(c.cov.amax(), 0.0);
        let single = Ensemble {
            grid: ens.grid.clone(),
            paths: ens.paths[..1].to_vec(),
        };
        assert!(empirical_covariance(&single, &[0.5]).unwrap().se.is_none());
        assert!(empirical_covariance(&ens, &[0.3]).is_err());
    }

    #[test]
    fn zero_kernel_reference_is_zero() {
        let zero = make_kernel(KernelSpec::Custom {
            name: "zero".into(),
            f: crate::kernels::BivariateFn::new(|_, _| 0.0),
            modulus: None,
        })
        .unwrap();
        let grid = TimeGrid::uniform(11).unwrap();
        let p = reference_gaussian_path(ReferenceSource::Kernel(&zero), &grid, 3).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
        let kl = analytic_kl(AnalyticKl::BrownianBridge, 20).unwrap();
        let a = reference_gaussian_path(ReferenceSource::Kl(&kl), &grid, 5).unwrap();
        let b = reference_gaussian_path(ReferenceSource::Kl(&kl), &grid, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.meta.method.as_deref(), Some("kl_truncation"));
    }

    #[test]
    fn constant_sample_is_rejected() {
        let grid = TimeGrid::uniform(3).unwrap();
        let meta = PathMeta {
            n: 1,
            k: 1,
            l: 1,
            family: "c".into(),
            seed: 0,
            method: None,
        };
        let ens = Ensemble {
            grid,
            paths: vec![
                PathSample {
                    values: vec![5.0; 3],
                    meta,
                };
                200
            ],
        };
        let r = gaussianity_test(&ens, 0.5, 1.0).unwrap();
        assert!(r.p_value < 1e-10);
        assert!(gaussianity_test(&ens, 0.5, 0.0).is_err());
        let small = Ensemble {
            grid: ens.grid.clone(),
            paths: ens.paths[..10].to_vec(),
        };
        assert!(matches!(
            gaussianity_test(&small, 0.5, 1.0),
            Err(Error::InsufficientReplicates { needed: 50, got: 10 })
        ));
    }

    #[test]
    fn kolmogorov_tail_known_values() {
        // P(K > 1.36) ≈ 0.049, P(K > 1.63) ≈ 0.0098
        assert!((kolmogorov_tail(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_tail(1.63) - 0.0098).abs() < 1e-3);
        assert_eq!(kolmogorov_tail(0.0), 1.0);
    }

    #[test]
    fn moment_factors() {
        assert_eq!(moment_factor(3, 3, 3, 3), 1.0);
        assert_eq!(moment_factor(3, 3, 4, 4), 0.0);
        assert_eq!(moment_factor(3, 4, 4, 3), 1.0);
        assert_eq!(moment_factor(3, 4, 3, 4), 1.0);
        assert_eq!(moment_factor(3, 4, 3, 5), 0.0);
    }

    #[test]
    fn mismatched_seeds_rejected() {
        let fam = orthonormal_projector_family(20).unwrap();
        let grid = TimeGrid::uniform(5).unwrap();
        let a = run_ensemble(&bb_config(20, 3, 1), &fam, 10, 10, &grid).unwrap();
        let b = run_ensemble(&bb_config(20, 3, 2), &fam, 10, 10, &grid).unwrap();
        assert!(matches!(
            cross_covariance_check(&a, &fam, 0.5, &b, &fam, 0.5),
            Err(Error::InvalidPairing(_))
        ));
    }

    #[test]
    fn holder_diagnostic_orthonormal() {
        let fam = orthonormal_projector_family(100).unwrap();
        let r = holder_diagnostic(&fam, &TimeGrid::uniform(21).unwrap()).unwrap();
        assert!(r.pass && r.max_ratio <= 1.0);
        assert_eq!(fam.increment_variance(0.3, 0.3), 0.0);
        assert!(holder_diagnostic(&fam, &TimeGrid::uniform(2).unwrap()).is_err());
    }

    #[test]
    fn diagonal_path_matches_dense() {
        let n = 10;
        let fam = separable_family(n, SeparableProfile::OrnsteinUhlenbeck { theta: 2.0, sigma: 1.0 }).unwrap();
        let w = sample_wigner(&flat_profile(n).unwrap(), EntryLaw::Gaussian, 4);
        let sd = spectral_decompose(&w).unwrap();
        let grid = TimeGrid::uniform(11).unwrap();
        for (k, l) in [(5, 5), (3, 7)] {
            let path = eval_path(&sd, &fam, k, l, &grid).unwrap();
            let (uk, ul) = (sd.eigenvector(k).unwrap(), sd.eigenvector(l).unwrap());
            let pref = if k == l {
                (n as f64 / 2.0).sqrt()
            } else {
                (n as f64).sqrt()
            };
            for (i, &t) in grid.times().iter().enumerate() {
                let a = fam.evaluate_at(t).unwrap().to_dense();
                let want = pref * uk.dot(&(a * &ul));
                assert!((path.values[i] - want).abs() < 1e-12);
            }
        }
    }
}
