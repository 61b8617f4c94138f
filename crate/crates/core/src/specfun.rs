//! Gamma function, Bessel functions of the first kind of real order and the
//! positive zeros of `J_{ν−1}`.
//!
//! Only the orders needed for the Riemann–Liouville fBM eigenfunctions are
//! supported: `J_ν` with `ν ∈ (−1, 2]`, arguments in `(0, 500]`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest argument accepted by [`bessel_j`].
pub const BESSEL_MAX_ARG: f64 = 500.0;

/// The ascending series is used up to this argument; above it the Hankel
/// asymptotic expansion takes over.
pub const SERIES_SWITCH: f64 = 12.0;

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

fn lanczos(x: f64) -> f64 {
    if x < 0.5 {
        PI / ((PI * x).sin() * lanczos(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = LANCZOS_COEF[0];
        let t = x + LANCZOS_G + 0.5;
        for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}

/// `Γ(x)` for `x ∈ (0, 50]`.
pub fn gamma_fn(x: f64) -> Result<f64> {
    if !(x > 0.0 && x <= 50.0) {
        return Err(Error::OutOfDomain(format!("gamma argument {x} outside (0, 50]")));
    }
    // integers are exact factorials
    if x == x.round() && x <= 20.0 {
        return Ok((1..x as u64).product::<u64>() as f64);
    }
    Ok(lanczos(x))
}

fn check_order(nu: f64) -> Result<()> {
    if !(nu > -1.0 && nu <= 2.0) {
        return Err(Error::OutOfDomain(format!("Bessel order {nu} outside (-1, 2]")));
    }
    Ok(())
}

/// Ascending power series of `J_ν(x)`.
pub(crate) fn bessel_j_series(nu: f64, x: f64) -> f64 {
    let half = 0.5 * x;
    let q = -half * half;
    let mut term = half.powf(nu) / lanczos(nu + 1.0);
    let mut sum = term;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= q / (k * (k + nu));
        sum += term;
        if k > half && term.abs() <= 1e-17 * sum.abs().max(1e-300) {
            break;
        }
        if k > 500.0 {
            break;
        }
    }
    sum
}

/// Hankel asymptotic expansion of `J_ν(x)` for large `x`, summed until the
/// terms stop decreasing.
pub(crate) fn bessel_j_asymptotic(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let omega = x - 0.5 * nu * PI - 0.25 * PI;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut a = 1.0; // a_k(ν) / x^k
    let mut last = f64::INFINITY;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        a *= (mu - odd * odd) / (kf * 8.0 * x);
        if a.abs() >= last || a == 0.0 {
            break;
        }
        last = a.abs();
        // P collects even k with alternating signs, Q the odd ones.
        match k % 4 {
            1 => q += a,
            2 => p -= a,
            3 => q -= a,
            _ => p += a,
        }
        if a.abs() < 1e-17 {
            break;
        }
    }
    (2.0 / (PI * x)).sqrt() * (p * omega.cos() - q * omega.sin())
}

/// `J_ν(x)` for `ν ∈ (−1, 2]`, `x ∈ (0, 500]`.
pub fn bessel_j(nu: f64, x: f64) -> Result<f64> {
    check_order(nu)?;
    if !(x > 0.0 && x <= BESSEL_MAX_ARG) {
        return Err(Error::OutOfDomain(format!("Bessel argument {x} outside (0, 500]")));
    }
    Ok(bessel_j_unchecked(nu, x))
}

pub(crate) fn bessel_j_unchecked(nu: f64, x: f64) -> f64 {
    if x <= SERIES_SWITCH {
        bessel_j_series(nu, x)
    } else {
        bessel_j_asymptotic(nu, x)
    }
}

/// `J_ν′(x) = J_{ν−1}(x) − (ν/x)·J_ν(x)`; requires `ν − 1 > −1`.
pub fn bessel_j_prime(nu: f64, x: f64) -> Result<f64> {
    Ok(bessel_j(nu - 1.0, x)? - nu / x * bessel_j(nu, x)?)
}

/// Ascending positive zeros `γ_1 < γ_2 < …` of `J_{ν−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BesselZeroTable {
    nu: f64,
    zeros: Vec<f64>,
}

impl BesselZeroTable {
    /// The `ν` whose shifted order `ν − 1` the zeros belong to.
    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn zeros(&self) -> &[f64] {
        &self.zeros
    }
}

/// McMahon's leading-order approximation to the `k`-th zero of `J_μ`.
fn mcmahon(mu: f64, k: usize) -> f64 {
    let beta = (k as f64 + 0.5 * mu - 0.25) * PI;
    beta - (4.0 * mu * mu - 1.0) / (8.0 * beta)
}

fn refine_zero(mu: f64, mut lo: f64, mut hi: f64) -> f64 {
    let f = |x: f64| bessel_j_unchecked(mu, x);
    let mut flo = f(lo);
    while hi - lo > 1e-8 * hi {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    // Newton with J_μ′ = (μ/x)J_μ − J_{μ+1}, kept inside the bracket.
    let mut x = 0.5 * (lo + hi);
    for _ in 0..20 {
        let fx = f(x);
        let d = mu / x * fx - bessel_j_unchecked(mu + 1.0, x);
        if d == 0.0 {
            break;
        }
        let next = x - fx / d;
        if !(next > lo && next < hi) {
            break;
        }
        let step = (next - x).abs();
        x = next;
        if step <= 1e-15 * x {
            break;
        }
    }
    x
}

/// First `count` positive zeros of `J_{ν−1}` for `ν ∈ (0, 2]`.
///
/// Each zero is bracketed by a sign-change scan (step ≤ 0.1) that starts
/// near the McMahon estimate for that index, then refined by bisection and
/// Newton steps.
pub fn bessel_zeros(nu: f64, count: usize) -> Result<BesselZeroTable> {
    if count == 0 {
        return Err(Error::param("need at least one zero"));
    }
    let mu = nu - 1.0;
    check_order(mu)?;
    let f = |x: f64| bessel_j_unchecked(mu, x);
    let mut zeros: Vec<f64> = Vec::with_capacity(count);
    let mut x = 1e-3;
    for k in 1..=count {
        if let Some(&prev) = zeros.last() {
            // consecutive zeros are more than 2 apart for these orders
            let guess: f64 = mcmahon(mu, k);
            x = (prev + 1.0_f64).max(guess - 1.5).min(prev + 2.0);
        }
        let mut fx = f(x);
        let mut found = None;
        while x < BESSEL_MAX_ARG {
            let step = (0.5 * x).min(0.1);
            let next = (x + step).min(BESSEL_MAX_ARG);
            let fn_ = f(next);
            if fn_ == 0.0 {
                found = Some(next);
                break;
            }
            if (fn_ > 0.0) != (fx > 0.0) {
                found = Some(refine_zero(mu, x, next));
                break;
            }
            x = next;
            fx = fn_;
        }
        let z = found.ok_or_else(|| Error::NumericalFailure(format!("could not bracket zero {k} of J_{mu}")))?;
        if f(z).abs() > 1e-10 {
            return Err(Error::NumericalFailure(format!(
                "zero {k} of J_{mu} has residual {:e}",
                f(z)
            )));
        }
        zeros.push(z);
        x = z;
    }
    Ok(BesselZeroTable { nu, zeros })
}
