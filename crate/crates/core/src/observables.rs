//! Time-indexed families `t ↦ A_t` of traceless symmetric observables.
//!
//! Three builders are provided: sums of rank-one projectors minus their
//! trace part, separable diagonal families with `(−,+)` sign pairs, and
//! diagonal families built from a truncated KL decomposition. All of them
//! satisfy `A_0 = 0`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{BivariateFn, GramFunction, KlDecomposition, KlMode};
use crate::linalg::{exact_floor, psd_top_eigenvalue, semidefinite_cholesky};

/// Declared increment bound `⟨(A_t−A_s)²⟩ ≤ L|t−s|^γ + slack`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderBound {
    pub l: f64,
    pub gamma: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    ProjectorSum,
    SeparableDiagonal,
    KlDiagonal,
}

/// `A_t = Σ_{α≤⌊nt⌋} (q_α q_αᵀ − I/n)`.
#[derive(Debug, Clone)]
pub struct ProjectorPayload {
    /// Rows are the vectors `q_α`; `None` stands for the standard basis.
    vectors: Option<DMatrix<f64>>,
    /// `(n+1)²` table of `Σ_{α≤a, β≤b} ⟨q_α,q_β⟩²`, row-major in `a`.
    gram_sq_prefix: Option<Vec<f64>>,
    gram: Option<DMatrix<f64>>,
    gram_top: f64,
    max_offdiag_sq: f64,
}

impl ProjectorPayload {
    /// Rows `q_α`, or `None` for the standard basis.
    pub fn vectors(&self) -> Option<&DMatrix<f64>> {
        self.vectors.as_ref()
    }

    /// Largest eigenvalue of the full Gram matrix.
    pub fn gram_top(&self) -> f64 {
        self.gram_top
    }

    /// `max_{α≠β} ⟨q_α,q_β⟩²`.
    pub fn max_offdiag_sq(&self) -> f64 {
        self.max_offdiag_sq
    }

    fn gram_sq_sum(&self, n: usize, a: usize, b: usize) -> f64 {
        match &self.gram_sq_prefix {
            None => a.min(b) as f64,
            Some(p) => p[a * (n + 1) + b],
        }
    }
}

/// `f_u(t)` profiles for the separable family.
#[derive(Clone)]
pub enum SeparableProfile {
    /// `σ e^{−θ(t−u)} 𝟙{t ≥ u}`.
    OrnsteinUhlenbeck { theta: f64, sigma: f64 },
    /// `𝟙{t ≥ u}`.
    Indicator,
    /// Arbitrary `(u, t) ↦ f_u(t)` with `sup |f| ≤ sup` and a declared
    /// increment bound for the resulting family.
    Custom {
        f: BivariateFn,
        sup: f64,
        holder: HolderBound,
    },
}

impl std::fmt::Debug for SeparableProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeparableProfile::OrnsteinUhlenbeck { theta, sigma } => f
                .debug_struct("OrnsteinUhlenbeck")
                .field("theta", theta)
                .field("sigma", sigma)
                .finish(),
            SeparableProfile::Indicator => f.write_str("Indicator"),
            SeparableProfile::Custom { sup, holder, .. } => f
                .debug_struct("Custom")
                .field("sup", sup)
                .field("holder", holder)
                .finish_non_exhaustive(),
        }
    }
}

impl SeparableProfile {
    pub fn eval(&self, u: f64, t: f64) -> f64 {
        match self {
            SeparableProfile::OrnsteinUhlenbeck { theta, sigma } => {
                if t >= u {
                    sigma * (-theta * (t - u)).exp()
                } else {
                    0.0
                }
            }
            SeparableProfile::Indicator => {
                if t >= u {
                    1.0
                } else {
                    0.0
                }
            }
            SeparableProfile::Custom { f, .. } => f.call(u, t),
        }
    }

    fn sup(&self) -> f64 {
        match self {
            SeparableProfile::OrnsteinUhlenbeck { sigma, .. } => *sigma,
            SeparableProfile::Indicator => 1.0,
            SeparableProfile::Custom { sup, .. } => *sup,
        }
    }

    /// Increment bound of the family with `m` blocks on the midpoint grid.
    fn holder(&self, m: usize) -> HolderBound {
        let m = m as f64;
        match self {
            // Blocks with u ≤ s contribute at most σ²(θ/2 + θ²/m)(t−s)², the
            // at most m(t−s)+1 blocks with s < u ≤ t at most σ² each.
            SeparableProfile::OrnsteinUhlenbeck { theta, sigma } => HolderBound {
                l: sigma * sigma * (1.0 + 0.5 * theta + theta * theta / m),
                gamma: 1.0,
                slack: sigma * sigma / m,
            },
            SeparableProfile::Indicator => HolderBound {
                l: 1.0,
                gamma: 1.0,
                slack: 1.0 / m,
            },
            SeparableProfile::Custom { holder, .. } => *holder,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeparablePayload {
    profile: SeparableProfile,
    m: usize,
    u_grid: Vec<f64>,
    weight: f64,
}

impl SeparablePayload {
    pub fn profile(&self) -> &SeparableProfile {
        &self.profile
    }
    pub fn blocks(&self) -> usize {
        self.m
    }
    pub fn u_grid(&self) -> &[f64] {
        &self.u_grid
    }
    pub fn weight(&self) -> f64 {
        self.weight
    }
}

#[derive(Debug, Clone)]
pub struct KlPayload {
    modes: Vec<KlMode>,
    kappa: f64,
    t_kappa: f64,
    weights: Vec<f64>,
    block_sizes: Vec<usize>,
    rounding: Vec<f64>,
}

impl KlPayload {
    pub fn modes(&self) -> &[KlMode] {
        &self.modes
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    /// `T = Σ_i λ_i ‖ψ_i‖∞²` over the kept modes.
    pub fn t_kappa(&self) -> f64 {
        self.t_kappa
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }
    /// `n·ω_i − 2n_i`, each in `[0, 2)`.
    pub fn rounding(&self) -> &[f64] {
        &self.rounding
    }
}

#[derive(Debug, Clone)]
pub enum Payload {
    Projector(ProjectorPayload),
    Separable(SeparablePayload),
    Kl(KlPayload),
}

/// A run of `2·half` diagonal entries starting at `start`: the first `half`
/// equal `lead_sign·scale·a(t)`, the next `half` the negation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagonalComponent {
    pub start: usize,
    pub half: usize,
    pub scale: f64,
    pub lead_sign: f64,
}

#[derive(Clone)]
pub struct ObservableFamily {
    n: usize,
    payload: Payload,
    components: Vec<DiagonalComponent>,
    holder: HolderBound,
    norm_bound: f64,
}

impl std::fmt::Debug for ObservableFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObservableFamily")
            .field("n", &self.n)
            .field("kind", &self.kind())
            .field("holder", &self.holder)
            .field("norm_bound", &self.norm_bound)
            .finish_non_exhaustive()
    }
}

/// A materialized `A_t`.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservableMatrix {
    Dense(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl ObservableMatrix {
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ObservableMatrix::Dense(m) => m.clone(),
            ObservableMatrix::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            ObservableMatrix::Dense(m) => m.trace(),
            ObservableMatrix::Diagonal(d) => d.sum(),
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTime(t));
    }
    Ok(())
}

/// `⌊n·t⌋` clamped to `0..=n`.
pub fn step_count(n: usize, t: f64) -> usize {
    exact_floor(n as f64 * t.clamp(0.0, 1.0)).clamp(0, n as i64) as usize
}

/// Projector family over the standard basis.
pub fn orthonormal_projector_family(n: usize) -> Result<ObservableFamily> {
    if n < 2 {
        return Err(Error::InvalidDimension(n, 2));
    }
    Ok(ObservableFamily {
        n,
        payload: Payload::Projector(ProjectorPayload {
            vectors: None,
            gram_sq_prefix: None,
            gram: None,
            gram_top: 1.0,
            max_offdiag_sq: 0.0,
        }),
        components: Vec::new(),
        holder: HolderBound {
            l: 1.0,
            gamma: 1.0,
            slack: 1.0 / n as f64,
        },
        norm_bound: 1.0,
    })
}

/// How to build the Gram matrix `Γ` of a vector family.
#[derive(Debug, Clone)]
pub enum GramSpec {
    /// Off-diagonal entries `γ/√n`.
    Equiangular { gamma: f64 },
    /// Off-diagonal entries `√(1+F(α/n, β/n))/√n` with 1-based `α, β`.
    FromF(GramFunction),
}

/// The Gram matrix described by `spec`.
pub fn gram_matrix(n: usize, spec: &GramSpec) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::InvalidDimension(n, 2));
    }
    let rn = (n as f64).sqrt();
    let mut g = DMatrix::identity(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let v = match spec {
                GramSpec::Equiangular { gamma } => gamma / rn,
                GramSpec::FromF(f) => {
                    let x = f.eval((a + 1) as f64 / n as f64, (b + 1) as f64 / n as f64);
                    let y = f.eval((b + 1) as f64 / n as f64, (a + 1) as f64 / n as f64);
                    if (x - y).abs() > 1e-12 * x.abs().max(1.0) {
                        return Err(Error::InvalidInput("F must be symmetric".into()));
                    }
                    if x < -1.0 {
                        return Err(Error::InvalidInput(format!("F = {x} < -1 at ({}, {})", a + 1, b + 1)));
                    }
                    (1.0 + x).max(0.0).sqrt() / rn
                }
            };
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    Ok(g)
}

/// Unit vectors (rows of the result) whose Gram matrix is `Γ(spec)`.
pub fn gram_vectors(n: usize, spec: &GramSpec) -> Result<DMatrix<f64>> {
    let g = gram_matrix(n, spec)?;
    semidefinite_cholesky(&g)
}

/// Projector family from unit vectors given as the rows of `vectors`.
pub fn projector_family(vectors: DMatrix<f64>) -> Result<ObservableFamily> {
    let n = vectors.nrows();
    if n < 2 {
        return Err(Error::InvalidDimension(n, 2));
    }
    if vectors.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "need n vectors of dimension n, got {} of dimension {}",
            n,
            vectors.ncols()
        )));
    }
    for (a, row) in vectors.row_iter().enumerate() {
        let norm = row.norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("vector {} has norm {norm}", a + 1)));
        }
    }
    let gram = &vectors * vectors.transpose();
    let w = n + 1;
    let mut prefix = vec![0.0; w * w];
    let mut max_offdiag_sq = 0.0f64;
    for a in 1..=n {
        let mut row_sum = 0.0;
        for b in 1..=n {
            let g2 = gram[(a - 1, b - 1)].powi(2);
            if a != b {
                max_offdiag_sq = max_offdiag_sq.max(g2);
            }
            row_sum += g2;
            prefix[a * w + b] = prefix[(a - 1) * w + b] + row_sum;
        }
    }
    let gram_top = psd_top_eigenvalue(&gram);
    let c = (n as f64 * max_offdiag_sq).max(1.0);
    Ok(ObservableFamily {
        n,
        payload: Payload::Projector(ProjectorPayload {
            vectors: Some(vectors),
            gram_sq_prefix: Some(prefix),
            gram: Some(gram),
            gram_top,
            max_offdiag_sq,
        }),
        components: Vec::new(),
        // ⟨(A_t−A_s)²⟩ = (S − k²/n)/n ≤ c·k/n with k = ⌊nt⌋−⌊ns⌋ ≤ n|t−s| + 1.
        holder: HolderBound {
            l: c,
            gamma: 1.0,
            slack: c / n as f64,
        },
        norm_bound: 1.0 + gram_top,
    })
}

/// Separable diagonal family with `m = ⌊n/2⌋` blocks at the midpoints
/// `u_α = (α−½)/m`; block `α` holds `∓√(n/m)·f_{u_α}(t)/√2` at entries
/// `2α−1, 2α` (1-based).
pub fn separable_family(n: usize, profile: SeparableProfile) -> Result<ObservableFamily> {
    if n < 4 {
        return Err(Error::InvalidDimension(n, 4));
    }
    match &profile {
        SeparableProfile::OrnsteinUhlenbeck { theta, sigma } => {
            if !(*theta > 0.0 && theta.is_finite()) || !(*sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::param("OU profile needs theta > 0 and sigma > 0"));
            }
        }
        SeparableProfile::Indicator => {}
        SeparableProfile::Custom { sup, .. } => {
            if !(sup.is_finite() && *sup >= 0.0) {
                return Err(Error::param("profile sup must be finite"));
            }
        }
    }
    let m = n / 2;
    let weight = (n as f64 / m as f64).sqrt();
    let u_grid: Vec<f64> = (1..=m).map(|a| (a as f64 - 0.5) / m as f64).collect();
    let components = (0..m)
        .map(|a| DiagonalComponent {
            start: 2 * a,
            half: 1,
            scale: weight / std::f64::consts::SQRT_2,
            lead_sign: -1.0,
        })
        .collect();
    let holder = profile.holder(m);
    let norm_bound = weight * profile.sup();
    Ok(ObservableFamily {
        n,
        payload: Payload::Separable(SeparablePayload {
            profile,
            m,
            u_grid,
            weight,
        }),
        components,
        holder,
        norm_bound,
    })
}

/// Number of modes kept at dimension `n`: `⌊n^κ⌋`.
pub fn kl_mode_count(n: usize, kappa: f64) -> usize {
    exact_floor((n as f64).powf(kappa)).max(0) as usize
}

/// Diagonal family from the leading `⌊n^κ⌋` modes of `kl`.
///
/// Mode `i` gets `n_i = ⌊n·ω_i/2⌋` entries equal to `(√T/‖ψ_i‖∞)·ψ_i(t)`
/// followed by `n_i` entries of the opposite sign, where
/// `ω_i = λ_i‖ψ_i‖∞²/T`. The remaining entries are zero.
pub fn kl_family(n: usize, kl: &KlDecomposition, kappa: f64) -> Result<ObservableFamily> {
    if n < 2 {
        return Err(Error::InvalidDimension(n, 2));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::param(format!("kappa must lie in (0,1), got {kappa}")));
    }
    let m = kl_mode_count(n, kappa);
    if m == 0 || m > kl.len() {
        return Err(Error::InvalidInput(format!(
            "need {m} modes for n = {n}, kappa = {kappa}; decomposition has {}",
            kl.len()
        )));
    }
    let modes: Vec<KlMode> = kl.modes()[..m].to_vec();
    if let Some((i, md)) = modes
        .iter()
        .enumerate()
        .find(|(_, md)| md.lambda.is_nan() || md.lambda < 0.0)
    {
        return Err(Error::InvalidInput(format!("eigenvalue {} is {}", i + 1, md.lambda)));
    }
    let t_kappa: f64 = modes.iter().map(|md| md.lambda * md.sup_norm * md.sup_norm).sum();
    if !t_kappa.is_finite() {
        return Err(Error::InvalidInput("weighted sup-norm sum is not finite".into()));
    }
    let weights: Vec<f64> = modes
        .iter()
        .map(|md| {
            if t_kappa > 0.0 {
                md.lambda * md.sup_norm * md.sup_norm / t_kappa
            } else {
                0.0
            }
        })
        .collect();
    let nf = n as f64;
    let block_sizes: Vec<usize> = weights
        .iter()
        .map(|w| exact_floor(0.5 * nf * w).max(0) as usize)
        .collect();
    let rounding: Vec<f64> = weights
        .iter()
        .zip(&block_sizes)
        .map(|(w, &b)| (nf * w - 2.0 * b as f64).max(0.0))
        .collect();
    let mut components = Vec::with_capacity(m);
    let mut start = 0;
    for (md, &half) in modes.iter().zip(&block_sizes) {
        let scale = if md.sup_norm > 0.0 {
            t_kappa.sqrt() / md.sup_norm
        } else {
            0.0
        };
        components.push(DiagonalComponent {
            start,
            half,
            scale,
            lead_sign: 1.0,
        });
        start += 2 * half;
    }
    debug_assert!(start <= n);
    // 2n_i ≤ nω_i, so the increments are dominated term by term by the
    // truncated Mercer sum, hence by the kernel's own modulus.
    let holder = match kl.modulus() {
        Some(md) => HolderBound {
            l: md.l,
            gamma: md.gamma,
            slack: kl.modulus_slack(),
        },
        None => HolderBound {
            l: f64::INFINITY,
            gamma: 1.0,
            slack: 0.0,
        },
    };
    Ok(ObservableFamily {
        n,
        payload: Payload::Kl(KlPayload {
            modes,
            kappa,
            t_kappa,
            weights,
            block_sizes,
            rounding,
        }),
        components,
        holder,
        norm_bound: t_kappa.sqrt(),
    })
}

impl ObservableFamily {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> FamilyKind {
        match self.payload {
            Payload::Projector(_) => FamilyKind::ProjectorSum,
            Payload::Separable(_) => FamilyKind::SeparableDiagonal,
            Payload::Kl(_) => FamilyKind::KlDiagonal,
        }
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn holder(&self) -> HolderBound {
        self.holder
    }

    /// Returns the family with a different declared increment bound.
    pub fn with_holder(mut self, holder: HolderBound) -> Self {
        self.holder = holder;
        self
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    /// Diagonal layout; empty for projector families.
    pub fn components(&self) -> &[DiagonalComponent] {
        &self.components
    }

    /// Amplitudes `a_c(t)` of the diagonal components, in order.
    pub fn diagonal_amplitudes(&self, t: f64) -> Vec<f64> {
        match &self.payload {
            Payload::Projector(_) => Vec::new(),
            Payload::Separable(p) => p.u_grid.iter().map(|&u| p.profile.eval(u, t)).collect(),
            Payload::Kl(p) => p.modes.iter().map(|md| md.psi.eval(t)).collect(),
        }
    }

    fn diagonal(&self, t: f64) -> DVector<f64> {
        let mut d = DVector::zeros(self.n);
        for (c, a) in self.components.iter().zip(self.diagonal_amplitudes(t)) {
            let v = c.lead_sign * c.scale * a;
            for j in 0..c.half {
                d[c.start + j] = v;
                d[c.start + c.half + j] = -v;
            }
        }
        d
    }

    /// Materializes `A_t`.
    pub fn evaluate_at(&self, t: f64) -> Result<ObservableMatrix> {
        check_time(t)?;
        match &self.payload {
            Payload::Projector(p) => {
                let n = self.n;
                let b = step_count(n, t);
                let mut m = match &p.vectors {
                    None => {
                        let mut m = DMatrix::zeros(n, n);
                        for a in 0..b {
                            m[(a, a)] = 1.0;
                        }
                        m
                    }
                    Some(q) => {
                        let head = q.rows(0, b);
                        head.transpose() * head
                    }
                };
                let shift = b as f64 / n as f64;
                for i in 0..n {
                    m[(i, i)] -= shift;
                }
                Ok(ObservableMatrix::Dense(m))
            }
            _ => Ok(ObservableMatrix::Diagonal(self.diagonal(t))),
        }
    }

    /// `⟨A_s A_t⟩ = Tr(A_s A_t)/n`, computed from the structure. Times are
    /// clamped to `[0,1]`.
    pub fn trace_inner(&self, s: f64, t: f64) -> f64 {
        let n = self.n;
        let nf = n as f64;
        match &self.payload {
            Payload::Projector(p) => {
                let (a, b) = (step_count(n, s), step_count(n, t));
                let (a, b) = (a.min(b), a.max(b));
                (p.gram_sq_sum(n, a, b) - (a * b) as f64 / nf) / nf
            }
            _ => {
                let (x, y) = (self.diagonal_amplitudes(s), self.diagonal_amplitudes(t));
                let mut acc = 0.0;
                for ((c, xs), yt) in self.components.iter().zip(&x).zip(&y) {
                    acc += 2.0 * c.half as f64 * c.scale * c.scale * (xs * yt);
                }
                acc / nf
            }
        }
    }

    /// `⟨(A_t − A_s)²⟩`.
    pub fn increment_variance(&self, s: f64, t: f64) -> f64 {
        (self.trace_inner(t, t) + self.trace_inner(s, s) - 2.0 * self.trace_inner(s, t)).max(0.0)
    }

    /// Exact trace of `A_t` from the structure.
    pub fn trace_at(&self, t: f64) -> f64 {
        match &self.payload {
            Payload::Projector(p) => {
                let b = step_count(self.n, t);
                let sq_norms: f64 = match &p.vectors {
                    None => b as f64,
                    Some(q) => q.rows(0, b).row_iter().map(|r| r.norm_squared()).sum(),
                };
                sq_norms - b as f64
            }
            _ => {
                // pair each entry with its sign partner so the sum is exact
                let d = self.diagonal(t);
                let mut covered = 0;
                let mut acc = 0.0;
                for c in &self.components {
                    for j in 0..c.half {
                        acc += d[c.start + j] + d[c.start + c.half + j];
                    }
                    covered += 2 * c.half;
                }
                acc + d.rows(covered, self.n - covered).sum()
            }
        }
    }

    /// `‖A_t‖` for diagonal families and an upper bound from the Gram data
    /// for projector families.
    pub fn norm_proxy(&self, t: f64) -> f64 {
        match &self.payload {
            Payload::Projector(p) => {
                let n = self.n;
                let b = step_count(n, t);
                if b == 0 {
                    return 0.0;
                }
                let shift = b as f64 / n as f64;
                let top = match &p.gram {
                    None => 1.0,
                    Some(g) => psd_top_eigenvalue(&g.view((0, 0), (b, b)).into_owned()),
                };
                // nonzero spectrum of Σ q qᵀ is that of the leading Gram block
                if b < n {
                    (top - shift).max(shift)
                } else {
                    (top - 1.0).max(1.0)
                }
            }
            _ => self.diagonal(t).amax(),
        }
    }
}

/// `⟨A_s B_t⟩` for two families of the same dimension.
pub fn mixed_trace_inner(a: &ObservableFamily, s: f64, b: &ObservableFamily, t: f64) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::InvalidInput(format!(
            "families have different dimensions {} and {}",
            a.n, b.n
        )));
    }
    let n = a.n;
    let nf = n as f64;
    let value = match (&a.payload, &b.payload) {
        (Payload::Projector(pa), Payload::Projector(pb)) => {
            let (ka, kb) = (step_count(n, s), step_count(n, t));
            let sum_sq = match (&pa.vectors, &pb.vectors) {
                (None, None) => ka.min(kb) as f64,
                (Some(q), None) => q.rows(0, ka).columns(0, kb).norm_squared(),
                (None, Some(p)) => p.rows(0, kb).columns(0, ka).norm_squared(),
                (Some(q), Some(p)) => (q.rows(0, ka) * p.rows(0, kb).transpose()).norm_squared(),
            };
            (sum_sq - (ka * kb) as f64 / nf) / nf
        }
        (Payload::Projector(p), _) => projector_diagonal(p, n, step_count(n, s), &b.diagonal(t)),
        (_, Payload::Projector(p)) => projector_diagonal(p, n, step_count(n, t), &a.diagonal(s)),
        _ => a.diagonal(s).dot(&b.diagonal(t)) / nf,
    };
    Ok(value)
}

fn projector_diagonal(p: &ProjectorPayload, n: usize, k: usize, d: &DVector<f64>) -> f64 {
    let nf = n as f64;
    let weighted: f64 = match &p.vectors {
        None => d.rows(0, k).sum(),
        Some(q) => q
            .rows(0, k)
            .row_iter()
            .map(|r| r.iter().zip(d.iter()).map(|(x, y)| x * x * y).sum::<f64>())
            .sum(),
    };
    (weighted - k as f64 / nf * d.sum()) / nf
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub max_abs_trace: f64,
    pub trace_tolerance: f64,
    pub trace_ok: bool,
    pub max_norm: f64,
    pub norm_bound: f64,
    pub norm_ok: bool,
    /// Smallest `⟨A_t²⟩` over grid times `t > 0`.
    pub min_variance: f64,
    pub variance_floor: f64,
    pub variance_ok: bool,
    /// Largest `(⟨(A_t−A_s)²⟩ − slack)/|t−s|^γ` over grid pairs.
    pub holder_ratio: f64,
    pub holder: HolderBound,
    pub holder_ok: bool,
    pub delta: f64,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.trace_ok && self.norm_ok && self.variance_ok && self.holder_ok
    }
}

/// Checks tracelessness, the norm bound, the variance floor
/// `⟨A_t²⟩ ≥ n^{−1+δ}` and the declared increment bound on `grid`.
///
/// A terminal time `t = 1` at which `A_1` vanishes identically (a pinned
/// family such as the bridge) is left out of the variance floor.
pub fn norm_and_hypothesis_report(family: &ObservableFamily, grid: &[f64], delta: f64) -> Result<HypothesisReport> {
    for &t in grid {
        check_time(t)?;
    }
    let nf = family.n as f64;
    let scale = family.norm_bound.max(f64::MIN_POSITIVE);
    let mut max_abs_trace = 0.0f64;
    let mut max_norm = 0.0f64;
    let mut min_variance = f64::INFINITY;
    let variances: Vec<f64> = grid.iter().map(|&t| family.trace_inner(t, t)).collect();
    for (&t, &v) in grid.iter().zip(&variances) {
        max_abs_trace = max_abs_trace.max(family.trace_at(t).abs());
        max_norm = max_norm.max(family.norm_proxy(t));
        let pinned_end = t == 1.0 && v <= 1e-14 * scale * scale;
        if t > 0.0 && !pinned_end {
            min_variance = min_variance.min(v);
        }
    }
    let variance_floor = nf.powf(-1.0 + delta);
    let h = family.holder;
    let mut holder_ratio = f64::NEG_INFINITY;
    for i in 0..grid.len() {
        for j in (i + 1)..grid.len() {
            let d = (grid[j] - grid[i]).abs();
            if d == 0.0 {
                continue;
            }
            let inc = (variances[i] + variances[j] - 2.0 * family.trace_inner(grid[i], grid[j])).max(0.0);
            holder_ratio = holder_ratio.max((inc - h.slack) / d.powf(h.gamma));
        }
    }
    let trace_tolerance = 1e-12 * nf * scale;
    Ok(HypothesisReport {
        max_abs_trace,
        trace_tolerance,
        trace_ok: max_abs_trace <= trace_tolerance,
        max_norm,
        norm_bound: family.norm_bound,
        norm_ok: max_norm <= family.norm_bound * (1.0 + 1e-12),
        min_variance,
        variance_floor,
        variance_ok: min_variance >= variance_floor,
        holder_ratio,
        holder: h,
        holder_ok: h.l.is_finite() && holder_ratio <= h.l * (1.0 + 1e-12),
        delta,
    })
}

/// Convenience constructor for a custom separable profile.
pub fn custom_profile(
    f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    sup: f64,
    holder: HolderBound,
) -> SeparableProfile {
    SeparableProfile::Custom {
        f: BivariateFn(Arc::new(f)),
        sup,
        holder,
    }
}
