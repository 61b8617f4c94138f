//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Pivots in `[PIVOT_TOLERANCE, 0]` are treated as exact zeros.
pub const PIVOT_TOLERANCE: f64 = -1e-10;

/// Lower-triangular factor `L` with `a = L Lᵀ` for a positive semi-definite
/// matrix.
///
/// Zero pivots (within [`PIVOT_TOLERANCE`]) zero out their column, so rank
/// deficient inputs factor without error. A pivot below the tolerance is
/// reported as [`Error::NotPsd`] with its 0-based index.
pub fn semidefinite_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    // Row-major storage so the inner products run over contiguous memory.
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let row_j = &l[j * n..j * n + j];
        let d = a[(j, j)] - dot(row_j, row_j);
        if d < PIVOT_TOLERANCE {
            return Err(Error::NotPsd { pivot: j, value: d });
        }
        if d <= 0.0 {
            continue;
        }
        let piv = d.sqrt();
        l[j * n + j] = piv;
        for i in (j + 1)..n {
            let (head, tail) = l.split_at_mut(i * n);
            let s = dot(&tail[..j], &head[j * n..j * n + j]);
            tail[j] = (a[(i, j)] - s) / piv;
        }
    }
    Ok(DMatrix::from_row_slice(n, n, &l))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// ascending order and each eigenvector's first non-negligible coordinate
/// made positive.
pub fn symmetric_eigen_sorted(m: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| Error::NumericalFailure(format!("symmetric eigensolver did not converge (n = {n})")))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite eigenvalue".into()));
    }
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok((values, vectors))
}

/// Flips `v` so that its first coordinate with magnitude above `1e-12·‖v‖∞`
/// is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration started from the all-ones vector. Returns the Rayleigh quotient
/// plus the final residual norm, which bounds the distance to an eigenvalue.
pub fn psd_top_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut rq = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..2000 {
        let w = m * &v;
        rq = v.dot(&w);
        residual = (&w - &v * rq).norm();
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if residual <= 1e-13 * rq.abs().max(1.0) {
            break;
        }
    }
    rq + residual
}

/// `⌊x⌋` for values that are meant to be exact products such as `n·t` with
/// `t` a decimal grid time: values within `1e-9` of an integer snap to it.
pub fn exact_floor(x: f64) -> i64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as i64
    } else {
        x.floor() as i64
    }
}

/// `⌈x⌉` with the same snapping rule as [`exact_floor`].
pub fn exact_ceil(x: f64) -> i64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as i64
    } else {
        x.ceil() as i64
    }
}
