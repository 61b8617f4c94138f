//! Target covariance kernels on `[0,1]²`, their Karhunen–Loève (Mercer)
//! decompositions, and positive-type / increment-modulus checks.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{fix_sign, symmetric_eigen_sorted};
use crate::specfun::{bessel_j, bessel_j_prime, bessel_j_unchecked, bessel_zeros, gamma_fn};

/// Number of points of the uniform grid used to locate `‖ψ‖∞`.
pub const SUP_GRID_POINTS: usize = 10_001;

/// A user supplied function of two variables.
#[derive(Clone)]
pub struct BivariateFn(pub Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>);

impl BivariateFn {
    pub fn new(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    #[inline]
    pub fn call(&self, x: f64, y: f64) -> f64 {
        (self.0)(x, y)
    }
}

impl fmt::Debug for BivariateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BivariateFn(..)")
    }
}

/// Increment modulus `|K(s,s)+K(t,t)−2K(s,t)| ≤ L·|t−s|^γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Modulus {
    pub l: f64,
    pub gamma: f64,
}

/// The perturbation `F` of the general Gram construction.
#[derive(Debug, Clone)]
pub enum GramFunction {
    /// `F(x,y) = π² sin(πx) sin(πy)`.
    SinPi2,
    /// A symmetric `F ≥ −1` with a known bound on `sup |F|`.
    Custom { f: BivariateFn, sup_abs: f64 },
}

impl GramFunction {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            GramFunction::SinPi2 => PI * PI * (PI * x).sin() * (PI * y).sin(),
            GramFunction::Custom { f, .. } => f.call(x, y),
        }
    }

    fn sup_abs(&self) -> f64 {
        match self {
            GramFunction::SinPi2 => PI * PI,
            GramFunction::Custom { sup_abs, .. } => *sup_abs,
        }
    }

    /// `∫₀ˢ∫₀ᵗ F(x,y) dy dx`.
    pub fn double_integral(&self, s: f64, t: f64) -> f64 {
        match self {
            GramFunction::SinPi2 => ((PI * s).cos() - 1.0) * ((PI * t).cos() - 1.0),
            GramFunction::Custom { f, .. } => {
                let f = f.clone();
                adaptive_simpson(&|x| adaptive_simpson(&|y| f.call(x, y), 0.0, t, 1e-11), 0.0, s, 1e-9)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum KernelSpec {
    BrownianBridge,
    BrownianMotion,
    /// Limit of the equiangular projector family: `s∧t + (γ²−1)·s·t`.
    Equiangular {
        gamma: f64,
    },
    /// `s∧t + ∫₀ˢ∫₀ᵗ F`.
    FromF(GramFunction),
    OrnsteinUhlenbeck {
        theta: f64,
        sigma: f64,
    },
    FractionalBm {
        hurst: f64,
    },
    RiemannLiouvilleFbm {
        hurst: f64,
    },
    Custom {
        name: String,
        f: BivariateFn,
        modulus: Option<Modulus>,
    },
}

/// A covariance function `K(s,t)` on `[0,1]²`.
#[derive(Debug, Clone)]
pub struct Kernel {
    spec: KernelSpec,
    modulus: Option<Modulus>,
}

/// Builds a kernel, validating its parameters.
pub fn make_kernel(spec: KernelSpec) -> Result<Kernel> {
    let modulus = match &spec {
        KernelSpec::BrownianBridge | KernelSpec::BrownianMotion => Some(Modulus { l: 1.0, gamma: 1.0 }),
        KernelSpec::Equiangular { gamma } => {
            if !gamma.is_finite() {
                return Err(Error::param("equiangular gamma must be finite"));
            }
            Some(Modulus {
                l: (gamma * gamma).max(1.0),
                gamma: 1.0,
            })
        }
        KernelSpec::FromF(g) => {
            if let GramFunction::Custom { f, sup_abs } = g {
                if !(sup_abs.is_finite() && *sup_abs >= 0.0) {
                    return Err(Error::param("sup |F| must be finite"));
                }
                for i in 0..=20 {
                    for j in 0..=20 {
                        let (x, y) = (i as f64 / 20.0, j as f64 / 20.0);
                        let v = f.call(x, y);
                        if v.is_nan() || v < -1.0 {
                            return Err(Error::param(format!("F({x}, {y}) = {v} < -1")));
                        }
                        if (v - f.call(y, x)).abs() > 1e-12 * v.abs().max(1.0) {
                            return Err(Error::param("F must be symmetric"));
                        }
                    }
                }
            }
            Some(Modulus {
                l: 1.0 + g.sup_abs(),
                gamma: 1.0,
            })
        }
        KernelSpec::OrnsteinUhlenbeck { theta, sigma } => {
            if !(*theta > 0.0 && theta.is_finite()) {
                return Err(Error::param(format!("theta must be positive, got {theta}")));
            }
            if !(*sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::param(format!("sigma must be positive, got {sigma}")));
            }
            Some(Modulus {
                l: sigma * sigma * (1.0 + 0.5 * theta),
                gamma: 1.0,
            })
        }
        KernelSpec::FractionalBm { hurst } => {
            check_hurst(*hurst)?;
            Some(Modulus {
                l: 1.0,
                gamma: 2.0 * hurst,
            })
        }
        KernelSpec::RiemannLiouvilleFbm { hurst } => {
            check_hurst(*hurst)?;
            let c = rl_scale(*hurst)?;
            // t^{2H} − s^{2H} ≤ (t−s)^{2H} for H ≤ 1/2 and ≤ 2H(t−s) above.
            if *hurst <= 0.5 {
                Some(Modulus {
                    l: c,
                    gamma: 2.0 * hurst,
                })
            } else {
                Some(Modulus {
                    l: c * 2.0 * hurst,
                    gamma: 1.0,
                })
            }
        }
        KernelSpec::Custom { modulus, .. } => *modulus,
    };
    Ok(Kernel { spec, modulus })
}

fn check_hurst(h: f64) -> Result<()> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::param(format!("Hurst exponent must lie in (0,1), got {h}")));
    }
    Ok(())
}

/// `1 / (2H·Γ(H+½)²)`, the Riemann–Liouville variance scale.
fn rl_scale(h: f64) -> Result<f64> {
    let g = gamma_fn(h + 0.5)?;
    Ok(1.0 / (2.0 * h * g * g))
}

impl Kernel {
    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn modulus(&self) -> Option<Modulus> {
        self.modulus
    }

    pub fn name(&self) -> String {
        match &self.spec {
            KernelSpec::BrownianBridge => "brownian_bridge".into(),
            KernelSpec::BrownianMotion => "brownian_motion".into(),
            KernelSpec::Equiangular { gamma } => format!("equiangular(gamma={gamma})"),
            KernelSpec::FromF(GramFunction::SinPi2) => "from_f(sin_pi2)".into(),
            KernelSpec::FromF(_) => "from_f(custom)".into(),
            KernelSpec::OrnsteinUhlenbeck { theta, sigma } => {
                format!("ornstein_uhlenbeck(theta={theta},sigma={sigma})")
            }
            KernelSpec::FractionalBm { hurst } => format!("fbm(H={hurst})"),
            KernelSpec::RiemannLiouvilleFbm { hurst } => format!("rl_fbm(H={hurst})"),
            KernelSpec::Custom { name, .. } => name.clone(),
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
        match &self.spec {
            KernelSpec::BrownianBridge => lo * (1.0 - hi),
            KernelSpec::BrownianMotion => lo,
            KernelSpec::Equiangular { gamma } => lo + (gamma * gamma - 1.0) * lo * hi,
            KernelSpec::FromF(g) => lo + g.double_integral(lo, hi),
            KernelSpec::OrnsteinUhlenbeck { theta, sigma } => {
                sigma * sigma / (2.0 * theta) * ((-theta * (hi - lo)).exp() - (-theta * (hi + lo)).exp())
            }
            KernelSpec::FractionalBm { hurst } => {
                let e = 2.0 * hurst;
                0.5 * (lo.powf(e) + hi.powf(e) - (hi - lo).powf(e))
            }
            KernelSpec::RiemannLiouvilleFbm { hurst } => {
                // validated in make_kernel
                let c = rl_scale(*hurst).unwrap_or(f64::NAN);
                c * lo.powf(2.0 * hurst)
            }
            KernelSpec::Custom { f, .. } => f.call(s, t),
        }
    }

    /// Gram matrix `[K(t_i, t_j)]`.
    pub fn gram(&self, grid: &[f64]) -> DMatrix<f64> {
        let m = grid.len();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = self.eval(grid[i], grid[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    simpson_rec(f, a, fa, b, fb, m, fm, whole, tol, 40)
}

/// An eigenfunction `ψ` on `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeFunction {
    /// `√2·sin(freq·t)`.
    Sine { freq: f64 },
    /// `norm·t^H·J_ν(zero·t^{H+½})`.
    RiemannLiouville { hurst: f64, nu: f64, zero: f64, norm: f64 },
    /// Piecewise-linear interpolation through `(knots[i], values[i])`.
    Tabulated { knots: Vec<f64>, values: Vec<f64> },
}

impl ModeFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ModeFunction::Sine { freq } => std::f64::consts::SQRT_2 * (freq * t).sin(),
            ModeFunction::RiemannLiouville { hurst, nu, zero, norm } => {
                if t <= 0.0 {
                    return 0.0;
                }
                norm * t.powf(*hurst) * bessel_j_unchecked(*nu, zero * t.powf(hurst + 0.5))
            }
            ModeFunction::Tabulated { knots, values } => interpolate(knots, values, t),
        }
    }
}

fn interpolate(knots: &[f64], values: &[f64], t: f64) -> f64 {
    if t <= knots[0] {
        return values[0];
    }
    let last = knots.len() - 1;
    if t >= knots[last] {
        return values[last];
    }
    let hi = knots.partition_point(|&k| k <= t);
    let lo = hi - 1;
    let w = (t - knots[lo]) / (knots[hi] - knots[lo]);
    values[lo] + w * (values[hi] - values[lo])
}

/// `sup_{[0,1]} |f|` by maximization over a uniform 10 001-point grid,
/// polished by a golden-section search in the cells around the best point.
pub fn sup_norm(f: &dyn Fn(f64) -> f64) -> f64 {
    let h = 1.0 / (SUP_GRID_POINTS - 1) as f64;
    let mut best = 0.0;
    let mut arg = 0usize;
    for i in 0..SUP_GRID_POINTS {
        let v = f(i as f64 * h).abs();
        if v > best {
            best = v;
            arg = i;
        }
    }
    let mut a = (arg as f64 - 1.0).max(0.0) * h;
    let mut b = ((arg + 1) as f64 * h).min(1.0);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c).abs() >= f(d).abs() {
            b = d;
        } else {
            a = c;
        }
    }
    best.max(f(0.5 * (a + b)).abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlMode {
    pub lambda: f64,
    pub psi: ModeFunction,
    pub sup_norm: f64,
}

impl KlMode {
    fn new(lambda: f64, psi: ModeFunction) -> Self {
        let sup_norm = match &psi {
            ModeFunction::Tabulated { values, .. } => values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            other => sup_norm(&|t| other.eval(t)),
        };
        Self { lambda, psi, sup_norm }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KlSource {
    AnalyticBb,
    AnalyticBm,
    AnalyticRlFbm,
    Nystrom,
}

/// A (truncated) Mercer eigensystem `{(λ_k, ψ_k)}` with eigenvalues
/// nonincreasing.
#[derive(Debug, Clone)]
pub struct KlDecomposition {
    modes: Vec<KlMode>,
    source: KlSource,
    modulus: Option<Modulus>,
    modulus_slack: f64,
}

impl KlDecomposition {
    /// Assembles a decomposition from explicit modes.
    pub fn from_modes(modes: Vec<KlMode>, source: KlSource, modulus: Option<Modulus>, modulus_slack: f64) -> Self {
        Self {
            modes,
            source,
            modulus,
            modulus_slack,
        }
    }

    pub fn modes(&self) -> &[KlMode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn source(&self) -> KlSource {
        self.source
    }

    /// Increment modulus of the kernel the modes come from.
    pub fn modulus(&self) -> Option<Modulus> {
        self.modulus
    }

    /// Extra additive slack on the modulus of the reconstructed kernel
    /// (nonzero for interpolated Nyström modes).
    pub fn modulus_slack(&self) -> f64 {
        self.modulus_slack
    }

    /// Keeps the leading `m` modes.
    pub fn truncated(&self, m: usize) -> Self {
        let mut out = self.clone();
        out.modes.truncate(m);
        out
    }

    /// `Σ_k λ_k ‖ψ_k‖∞²` over the held modes.
    pub fn weighted_sup_sum(&self) -> f64 {
        self.modes.iter().map(|m| m.lambda * m.sup_norm * m.sup_norm).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticKl {
    BrownianBridge,
    BrownianMotion,
    RiemannLiouvilleFbm { hurst: f64 },
}

/// Closed-form KL decompositions with `m` modes.
pub fn analytic_kl(which: AnalyticKl, m: usize) -> Result<KlDecomposition> {
    if m == 0 {
        return Err(Error::param("need at least one mode"));
    }
    let unit = Some(Modulus { l: 1.0, gamma: 1.0 });
    match which {
        AnalyticKl::BrownianBridge => {
            let modes = (1..=m)
                .map(|k| {
                    let freq = k as f64 * PI;
                    KlMode::new(1.0 / (freq * freq), ModeFunction::Sine { freq })
                })
                .collect();
            Ok(KlDecomposition::from_modes(modes, KlSource::AnalyticBb, unit, 0.0))
        }
        AnalyticKl::BrownianMotion => {
            let modes = (1..=m)
                .map(|k| {
                    let freq = (k as f64 - 0.5) * PI;
                    KlMode::new(1.0 / (freq * freq), ModeFunction::Sine { freq })
                })
                .collect();
            Ok(KlDecomposition::from_modes(modes, KlSource::AnalyticBm, unit, 0.0))
        }
        AnalyticKl::RiemannLiouvilleFbm { hurst } => {
            check_hurst(hurst)?;
            let kernel = make_kernel(KernelSpec::RiemannLiouvilleFbm { hurst })?;
            let nu = 2.0 * hurst / (2.0 * hurst + 1.0);
            let g = gamma_fn(hurst + 1.5)?;
            let zeros = bessel_zeros(nu, m)?;
            let mut modes = Vec::with_capacity(m);
            for &z in zeros.zeros() {
                let jn = bessel_j(nu, z)?;
                let jp = bessel_j_prime(nu, z)?;
                let denom = (z * z * jp * jp + (z * z - nu * nu) * jn * jn).sqrt();
                if denom.is_nan() || denom <= 0.0 {
                    return Err(Error::NumericalFailure(format!(
                        "degenerate normalization at Bessel zero {z}"
                    )));
                }
                let norm = (2.0 * hurst + 1.0).sqrt() * z / denom;
                modes.push(KlMode::new(
                    1.0 / (z * z * g * g),
                    ModeFunction::RiemannLiouville {
                        hurst,
                        nu,
                        zero: z,
                        norm,
                    },
                ));
            }
            Ok(KlDecomposition::from_modes(
                modes,
                KlSource::AnalyticRlFbm,
                kernel.modulus(),
                0.0,
            ))
        }
    }
}

/// Nyström approximation of the leading `m` KL modes on the midpoint grid
/// `t_i = (i−½)/g` with uniform weights `1/g`.
///
/// Eigenfunctions are the scaled eigenvectors on the grid, linearly
/// interpolated in between. The end points `0` and `1` are filled with the
/// Nyström extension `ψ(x) = (gλ)⁻¹ Σ_j K(x,t_j)ψ(t_j)`.
pub fn nystrom_kl(kernel: &Kernel, grid_size: usize, m: usize) -> Result<KlDecomposition> {
    if grid_size < 4 * m || grid_size == 0 {
        return Err(Error::param(format!(
            "grid_size {grid_size} must be at least 4 x modes ({m})"
        )));
    }
    let g = grid_size as f64;
    let grid: Vec<f64> = (0..grid_size).map(|i| (i as f64 + 0.5) / g).collect();
    let gram = kernel.gram(&grid) / g;
    let (vals, vecs) = symmetric_eigen_sorted(gram)?;
    let top = *vals.last().unwrap_or(&0.0);
    let bottom = vals[0];
    if bottom < -1e-8 * top.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveType {
            min_eigenvalue: bottom,
            max_eigenvalue: top,
        });
    }
    let mut knots = Vec::with_capacity(grid_size + 2);
    knots.push(0.0);
    knots.extend_from_slice(&grid);
    knots.push(1.0);
    let mut modes = Vec::with_capacity(m);
    for r in 0..m {
        let idx = grid_size - 1 - r;
        let lambda = if vals[idx] < 1e-12 { 0.0 } else { vals[idx] };
        let mut v = vecs.column(idx).into_owned();
        fix_sign(&mut v);
        let inner: Vec<f64> = v.iter().map(|x| x * g.sqrt()).collect();
        let extend = |x: f64| -> f64 {
            if lambda > 0.0 {
                grid.iter()
                    .zip(&inner)
                    .map(|(tj, pj)| kernel.eval(x, *tj) * pj)
                    .sum::<f64>()
                    / (g * lambda)
            } else if x < 0.5 {
                inner[0]
            } else {
                inner[grid_size - 1]
            }
        };
        let mut values = Vec::with_capacity(grid_size + 2);
        values.push(extend(0.0));
        values.extend_from_slice(&inner);
        values.push(extend(1.0));
        modes.push(KlMode::new(
            lambda,
            ModeFunction::Tabulated {
                knots: knots.clone(),
                values,
            },
        ));
    }
    // Interpolating between grid points of spacing h perturbs the increment
    // variance by at most L·(2h)^γ.
    let slack = kernel
        .modulus()
        .map(|md| md.l * (2.0 / g).powf(md.gamma))
        .unwrap_or(0.0);
    Ok(KlDecomposition::from_modes(
        modes,
        KlSource::Nystrom,
        kernel.modulus(),
        slack,
    ))
}

/// Partial Mercer sum `Σ_k λ_k ψ_k(s) ψ_k(t)`.
pub fn kl_reconstruct(kl: &KlDecomposition, s: f64, t: f64) -> f64 {
    kl.modes.iter().map(|m| m.lambda * m.psi.eval(s) * m.psi.eval(t)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositiveTypeReport {
    pub positive: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

/// Positive type on the probe grid: the smallest Gram eigenvalue is at least
/// `−1e-8·max(1, λ_max)`.
pub fn positive_type_check(kernel: &Kernel, grid: &[f64]) -> Result<PositiveTypeReport> {
    if grid.is_empty() {
        return Err(Error::param("probe grid is empty"));
    }
    let (vals, _) = symmetric_eigen_sorted(kernel.gram(grid))?;
    let min_eigenvalue = vals[0];
    let max_eigenvalue = *vals.last().unwrap();
    Ok(PositiveTypeReport {
        positive: min_eigenvalue >= -1e-8 * max_eigenvalue.max(1.0),
        min_eigenvalue,
        max_eigenvalue,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovlipReport {
    /// Smallest `L` that works with the checked exponent on the grid.
    pub l_hat: f64,
    /// Log-slope of the worst increment between the two smallest lags.
    pub gamma_hat: f64,
    pub declared: Option<Modulus>,
    pub pass: bool,
    pub worst_pair: (f64, f64),
}

/// Checks `|K(s,s)+K(t,t)−2K(s,t)| ≤ L|t−s|^γ` over all grid pairs against
/// `declared`, falling back to the kernel's own modulus.
pub fn covlip_check(kernel: &Kernel, grid: &[f64], declared: Option<Modulus>) -> Result<CovlipReport> {
    if grid.len() < 3 {
        return Err(Error::param("covlip check needs at least 3 grid points"));
    }
    let declared = declared.or(kernel.modulus());
    let diag: Vec<f64> = grid.iter().map(|&t| kernel.eval(t, t)).collect();
    let increment = |i: usize, j: usize| (diag[i] + diag[j] - 2.0 * kernel.eval(grid[i], grid[j])).abs();

    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut lags: Vec<f64> = sorted.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    lags.sort_by(f64::total_cmp);
    let h = lags.first().copied().unwrap_or(0.0);
    let worst_at = |lag: f64| {
        let mut w = 0.0f64;
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                if ((grid[j] - grid[i]) - lag).abs() <= 1e-12 {
                    w = w.max(increment(i, j));
                }
            }
        }
        w
    };
    let (w1, w2) = (worst_at(h), worst_at(2.0 * h));
    let gamma_hat = if w1 > 0.0 && w2 > 0.0 {
        (w2 / w1).ln() / 2f64.ln()
    } else {
        f64::NAN
    };

    let gamma = declared.map(|d| d.gamma).unwrap_or(gamma_hat);
    let mut l_hat = 0.0f64;
    let mut worst_pair = (grid[0], grid[0]);
    for i in 0..grid.len() {
        for j in (i + 1)..grid.len() {
            let lag = (grid[j] - grid[i]).abs();
            if lag == 0.0 {
                continue;
            }
            let ratio = increment(i, j) / lag.powf(gamma);
            if ratio > l_hat {
                l_hat = ratio;
                worst_pair = (grid[i], grid[j]);
            }
        }
    }
    let pass = match declared {
        Some(d) => l_hat <= d.l * (1.0 + 1e-12) + 1e-14,
        None => false,
    };
    Ok(CovlipReport {
        l_hat,
        gamma_hat,
        declared,
        pass,
        worst_pair,
    })
}

/// Uniform grid `0, 1/(p−1), …, 1`.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        p => (0..p).map(|i| i as f64 / (p - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb() -> Kernel {
        make_kernel(KernelSpec::BrownianBridge).unwrap()
    }

    #[test]
    fn printed_kernel_values() {
        let eq1 = make_kernel(KernelSpec::Equiangular { gamma: 1.0 }).unwrap();
        for &(s, t) in &[(0.2, 0.7), (0.9, 0.1), (0.5, 0.5)] {
            assert!((eq1.eval(s, t) - f64::min(s, t)).abs() < 1e-15);
        }
        let eq0 = make_kernel(KernelSpec::Equiangular { gamma: 0.0 }).unwrap();
        assert!((eq0.eval(0.25, 0.5) - 0.125).abs() < 1e-15);
        let sin = make_kernel(KernelSpec::FromF(GramFunction::SinPi2)).unwrap();
        assert!((sin.eval(1.0, 1.0) - 5.0).abs() < 1e-14);
        let ou = make_kernel(KernelSpec::OrnsteinUhlenbeck { theta: 2.0, sigma: 1.0 }).unwrap();
        assert!((ou.eval(1.0, 1.0) - 0.25 * (1.0 - (-4.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn custom_f_quadrature_matches_closed_form() {
        let f = GramFunction::Custom {
            f: BivariateFn::new(|x, y| PI * PI * (PI * x).sin() * (PI * y).sin()),
            sup_abs: PI * PI,
        };
        for &(s, t) in &[(0.3, 0.8), (1.0, 1.0), (0.05, 0.6)] {
            let closed = GramFunction::SinPi2.double_integral(s, t);
            assert!((f.double_integral(s, t) - closed).abs() < 1e-8);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(make_kernel(KernelSpec::OrnsteinUhlenbeck { theta: 0.0, sigma: 1.0 }).is_err());
        assert!(make_kernel(KernelSpec::OrnsteinUhlenbeck {
            theta: 1.0,
            sigma: -1.0
        })
        .is_err());
        assert!(make_kernel(KernelSpec::FractionalBm { hurst: 1.0 }).is_err());
        assert!(make_kernel(KernelSpec::RiemannLiouvilleFbm { hurst: 0.0 }).is_err());
        let below = GramFunction::Custom {
            f: BivariateFn::new(|_, _| -2.0),
            sup_abs: 2.0,
        };
        assert!(make_kernel(KernelSpec::FromF(below)).is_err());
    }

    #[test]
    fn analytic_first_modes() {
        let kl = analytic_kl(AnalyticKl::BrownianBridge, 3).unwrap();
        assert!((kl.modes()[0].lambda - 0.101_321_18).abs() < 1e-8);
        assert!((kl.modes()[0].psi.eval(0.5) - 2f64.sqrt()).abs() < 1e-15);
        let bm = analytic_kl(AnalyticKl::BrownianMotion, 3).unwrap();
        assert!((bm.modes()[0].lambda - 0.405_284_73).abs() < 1e-8);
        assert!((bm.modes()[0].lambda - 4.0 / (PI * PI)).abs() < 1e-15);
    }

    #[test]
    fn sup_norms_reach_sqrt2() {
        let kl = analytic_kl(AnalyticKl::BrownianBridge, 7).unwrap();
        for m in kl.modes() {
            assert!((m.sup_norm - 2f64.sqrt()).abs() < 1e-12);
        }
    }

    fn l2_inner(a: &ModeFunction, b: &ModeFunction) -> f64 {
        // composite Simpson on 10 001 points
        let n = SUP_GRID_POINTS - 1;
        let h = 1.0 / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let t = i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += w * a.eval(t) * b.eval(t);
        }
        s * h / 3.0
    }

    #[test]
    fn analytic_modes_orthonormal() {
        for which in [
            AnalyticKl::BrownianBridge,
            AnalyticKl::BrownianMotion,
            AnalyticKl::RiemannLiouvilleFbm { hurst: 0.7 },
        ] {
            let kl = analytic_kl(which, 4).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let ip = l2_inner(&kl.modes()[i].psi, &kl.modes()[j].psi);
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((ip - want).abs() < 1e-6, "{which:?} ({i},{j}): {ip}");
                }
            }
        }
    }

    #[test]
    fn rl_fbm_at_half_is_bm() {
        let rl = analytic_kl(AnalyticKl::RiemannLiouvilleFbm { hurst: 0.5 }, 10).unwrap();
        let bm = analytic_kl(AnalyticKl::BrownianMotion, 10).unwrap();
        for (a, b) in rl.modes().iter().zip(bm.modes()) {
            assert!((a.lambda - b.lambda).abs() < 1e-10);
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                assert!((a.psi.eval(t) - b.psi.eval(t)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rl_fbm_eigenvalues_match_nystrom() {
        let h = 0.2;
        let kernel = make_kernel(KernelSpec::RiemannLiouvilleFbm { hurst: h }).unwrap();
        let ny = nystrom_kl(&kernel, 400, 3).unwrap();
        let rl = analytic_kl(AnalyticKl::RiemannLiouvilleFbm { hurst: h }, 3).unwrap();
        for (a, b) in rl.modes().iter().zip(ny.modes()) {
            assert!((a.lambda / b.lambda - 1.0).abs() < 0.02, "{} vs {}", a.lambda, b.lambda);
        }
    }

    #[test]
    fn nystrom_bb_eigenvalues() {
        let ny = nystrom_kl(&bb(), 500, 5).unwrap();
        for (k, m) in ny.modes().iter().enumerate() {
            let exact = 1.0 / ((k as f64 + 1.0) * PI).powi(2);
            assert!((m.lambda / exact - 1.0).abs() < 0.01);
        }
        let coarse = nystrom_kl(&bb(), 250, 1).unwrap();
        let rel = (coarse.modes()[0].lambda / ny.modes()[0].lambda - 1.0).abs();
        assert!(rel <= 0.005);
        assert!(nystrom_kl(&bb(), 10, 5).is_err());
    }

    #[test]
    fn nystrom_reconstruction() {
        let ny = nystrom_kl(&bb(), 500, 50).unwrap();
        for i in 0..=10 {
            for j in 0..=10 {
                let (s, t) = (i as f64 / 10.0, j as f64 / 10.0);
                assert!((kl_reconstruct(&ny, s, t) - bb().eval(s, t)).abs() < 5e-3);
            }
        }
    }

    #[test]
    fn nystrom_zero_kernel() {
        let zero = make_kernel(KernelSpec::Custom {
            name: "zero".into(),
            f: BivariateFn::new(|_, _| 0.0),
            modulus: None,
        })
        .unwrap();
        let ny = nystrom_kl(&zero, 20, 3).unwrap();
        assert!(ny.modes().iter().all(|m| m.lambda == 0.0));
    }

    #[test]
    fn nystrom_rejects_indefinite() {
        let neg = make_kernel(KernelSpec::Custom {
            name: "neg".into(),
            f: BivariateFn::new(|s, t| if (s - t).abs() < 1e-12 { 0.0 } else { 1.0 }),
            modulus: None,
        })
        .unwrap();
        assert!(matches!(nystrom_kl(&neg, 20, 2), Err(Error::NotPositiveType { .. })));
    }

    #[test]
    fn reconstruct_edge_cases() {
        let kl = analytic_kl(AnalyticKl::BrownianBridge, 200).unwrap();
        assert!((kl_reconstruct(&kl, 0.5, 0.5) - 0.25).abs() < 1e-3);
        assert!((kl_reconstruct(&kl, 0.3, 0.8) - kl_reconstruct(&kl, 0.8, 0.3)).abs() < 1e-15);
        assert_eq!(kl_reconstruct(&kl.truncated(0), 0.3, 0.8), 0.0);
    }

    #[test]
    fn positive_type_cases() {
        assert!(positive_type_check(&bb(), &uniform_grid(11)).unwrap().positive);
        let neg = make_kernel(KernelSpec::Custom {
            name: "minus_one".into(),
            f: BivariateFn::new(|_, _| -1.0),
            modulus: None,
        })
        .unwrap();
        assert!(!positive_type_check(&neg, &uniform_grid(11)).unwrap().positive);
        let eq2 = make_kernel(KernelSpec::Equiangular { gamma: 2.0 }).unwrap();
        assert!(positive_type_check(&eq2, &uniform_grid(21)).unwrap().positive);
    }

    #[test]
    fn covlip_cases() {
        let r = covlip_check(&bb(), &uniform_grid(21), None).unwrap();
        assert!(r.pass && r.l_hat <= 1.0);
        assert!((r.gamma_hat - 1.0).abs() < 0.1);
        let fbm = make_kernel(KernelSpec::FractionalBm { hurst: 0.2 }).unwrap();
        let r = covlip_check(&fbm, &uniform_grid(21), Some(Modulus { l: 1.0, gamma: 0.4 })).unwrap();
        assert!(r.pass);
        assert!((r.l_hat - 1.0).abs() < 1e-12);
        assert!((r.gamma_hat - 0.4).abs() < 1e-9);
    }

    #[test]
    fn every_shipped_kernel_is_positive_and_modulus_holds() {
        let specs = vec![
            KernelSpec::BrownianBridge,
            KernelSpec::BrownianMotion,
            KernelSpec::Equiangular { gamma: 0.0 },
            KernelSpec::Equiangular { gamma: 2.0 },
            KernelSpec::FromF(GramFunction::SinPi2),
            KernelSpec::OrnsteinUhlenbeck { theta: 2.0, sigma: 1.0 },
            KernelSpec::OrnsteinUhlenbeck {
                theta: 20.0,
                sigma: 1.0,
            },
            KernelSpec::FractionalBm { hurst: 0.2 },
            KernelSpec::FractionalBm { hurst: 0.9 },
            KernelSpec::RiemannLiouvilleFbm { hurst: 0.2 },
            KernelSpec::RiemannLiouvilleFbm { hurst: 0.9 },
        ];
        let grid = uniform_grid(21);
        for spec in specs {
            let k = make_kernel(spec).unwrap();
            assert!(positive_type_check(&k, &grid).unwrap().positive, "{}", k.name());
            assert!(covlip_check(&k, &grid, None).unwrap().pass, "{}", k.name());
            for &s in &grid {
                for &t in &grid {
                    assert_eq!(k.eval(s, t), k.eval(t, s));
                }
            }
        }
    }

    #[test]
    fn admissibility_partial_sums_bounded() {
        let kl = analytic_kl(AnalyticKl::BrownianBridge, 100).unwrap();
        let mut acc = 0.0;
        for m in kl.modes() {
            let next = acc + m.lambda * m.sup_norm * m.sup_norm;
            assert!(next >= acc);
            acc = next;
        }
        // Σ 2/(kπ)² = 1/3
        assert!(acc < 1.0 / 3.0);
    }
}
