//! Generalized Wigner matrices: variance profiles, seeded sampling and full
//! spectral decomposition.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{exact_ceil, exact_floor, symmetric_eigen_sorted};

/// Entry variances `s_ij` of a generalized Wigner matrix together with the
/// declared flatness constants `c ≤ n·s_ij ≤ C`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    n: usize,
    s: DMatrix<f64>,
    c: f64,
    big_c: f64,
}

impl VarianceProfile {
    /// Validates symmetry, unit row sums (to `1e-12`) and the flatness bounds.
    pub fn new(s: DMatrix<f64>, c: f64, big_c: f64) -> Result<Self> {
        let n = s.nrows();
        if n < 2 {
            return Err(Error::InvalidDimension(n, 2));
        }
        if s.ncols() != n {
            return Err(Error::InvalidInput("variance profile must be square".into()));
        }
        if !(c > 0.0 && big_c >= c) {
            return Err(Error::param(format!("need 0 < c <= C, got c = {c}, C = {big_c}")));
        }
        let nf = n as f64;
        for i in 0..n {
            for j in 0..n {
                let v = s[(i, j)];
                if v != s[(j, i)] {
                    return Err(Error::InvalidInput(format!("s[{i},{j}] != s[{j},{i}]")));
                }
                if !(v >= c / nf && v <= big_c / nf) {
                    return Err(Error::InvalidInput(format!("s[{i},{j}] = {v} outside [c/n, C/n]")));
                }
            }
            let row: f64 = s.row(i).iter().sum();
            if (row - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("row {i} sums to {row}")));
            }
        }
        Ok(Self { n, s, c, big_c })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn variance(&self, i: usize, j: usize) -> f64 {
        self.s[(i, j)]
    }

    pub fn variances(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.c, self.big_c)
    }
}

/// The flat profile `s_ij = 1/n`.
pub fn flat_profile(n: usize) -> Result<VarianceProfile> {
    if n < 2 {
        return Err(Error::InvalidDimension(n, 2));
    }
    let v = 1.0 / n as f64;
    let s = DMatrix::from_element(n, n, v);
    // rows sum to 1 up to the rounding of 1/n
    VarianceProfile::new(s, 1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryLaw {
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone)]
pub struct WignerMatrix {
    entries: DMatrix<f64>,
    profile: VarianceProfile,
    law: EntryLaw,
    seed: u64,
}

impl WignerMatrix {
    pub fn n(&self) -> usize {
        self.profile.n
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn profile(&self) -> &VarianceProfile {
        &self.profile
    }

    pub fn law(&self) -> EntryLaw {
        self.law
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Wraps an explicit symmetric matrix, mostly for tests and examples.
    pub fn from_entries(entries: DMatrix<f64>, law: EntryLaw) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n {
            return Err(Error::InvalidInput("matrix must be square".into()));
        }
        if entries != entries.transpose() {
            return Err(Error::InvalidInput("matrix must be symmetric".into()));
        }
        Ok(Self {
            entries,
            profile: flat_profile(n)?,
            law,
            seed: 0,
        })
    }
}

/// Samples the upper triangle (diagonal included) row by row from a ChaCha8
/// stream seeded with `seed`, then mirrors it.
pub fn sample_wigner(profile: &VarianceProfile, law: EntryLaw, seed: u64) -> WignerMatrix {
    let n = profile.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let sd = profile.s[(i, j)].sqrt();
            let x = match law {
                EntryLaw::Rademacher => {
                    if rng.random::<bool>() {
                        sd
                    } else {
                        -sd
                    }
                }
                EntryLaw::Gaussian => sd * rng.sample::<f64, _>(StandardNormal),
            };
            entries[(i, j)] = x;
            entries[(j, i)] = x;
        }
    }
    WignerMatrix {
        entries,
        profile: profile.clone(),
        law,
        seed,
    }
}

/// Eigenvalues in ascending order with orthonormal eigenvectors stored as
/// columns; column `k` pairs with eigenvalue `k`.
#[derive(Debug, Clone)]
pub struct SpectralData {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralData {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Eigenvector for the 1-based index `k`.
    pub fn eigenvector(&self, k: usize) -> Result<DVector<f64>> {
        let n = self.n();
        if k == 0 || k > n {
            return Err(Error::InvalidIndex { index: k, n });
        }
        Ok(self.eigenvectors.column(k - 1).into_owned())
    }
}

/// Full symmetric eigendecomposition. Each eigenvector's first
/// non-negligible coordinate is positive.
pub fn spectral_decompose(w: &WignerMatrix) -> Result<SpectralData> {
    let (eigenvalues, eigenvectors) = symmetric_eigen_sorted(w.entries.clone())?;
    Ok(SpectralData {
        eigenvalues,
        eigenvectors,
    })
}

/// Bulk index window `[⌈αn⌉, ⌊(1−α)n⌋]` (1-based, inclusive).
pub fn bulk_indices(n: usize, alpha: f64) -> Result<RangeInclusive<usize>> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::param(format!("alpha must lie in (0, 1/2), got {alpha}")));
    }
    let nf = n as f64;
    let lo = exact_ceil(alpha * nf).max(1) as usize;
    let hi = exact_floor((1.0 - alpha) * nf) as usize;
    Ok(lo..=hi)
}

/// The middle index `⌈n/2⌉`.
pub fn middle_index(n: usize) -> usize {
    n.div_ceil(2)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replicate `index` of a run with `master` seed.
///
/// `master + (index+1)·φ` (φ the 64-bit golden-ratio constant, which is odd)
/// is injective in `index`, and the splitmix64 finalizer is a bijection, so
/// replicate seeds of one run are pairwise distinct and do not depend on the
/// order replicates are executed in.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}
