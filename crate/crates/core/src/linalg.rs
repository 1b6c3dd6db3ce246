//! Small dense linear-algebra helpers shared by the solver and the SME
//! integrator. Everything here works on `nalgebra` dynamic matrices; the
//! problems in this crate are low dimensional so no sparse paths exist.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance used for the full-column-rank check on `A`.
pub const RANK_TOL: f64 = 1e-10;

/// Relative tolerance below zero tolerated for PSD matrices.
pub const PSD_TOL: f64 = 1e-10;

/// Hilbert matrix `H[i][j] = 1 / (i + j + 1)` (zero based).
pub fn hilbert(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| 1.0 / ((i + j + 1) as f64))
}

/// `n` evenly spaced points over `[a, b]`, matching numpy's `linspace`.
pub fn linspace(a: f64, b: f64, n: usize) -> DVector<f64> {
    match n {
        0 => DVector::zeros(0),
        1 => DVector::from_element(1, a),
        _ => {
            let h = (b - a) / (n - 1) as f64;
            DVector::from_fn(n, |i, _| if i == n - 1 { b } else { a + h * i as f64 })
        }
    }
}

/// Ratio of smallest to largest singular value. Returns 0 for an empty or
/// all-zero matrix.
pub fn singular_value_ratio(a: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 || a.nrows() < a.ncols() {
        return 0.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max <= 0.0 {
        return 0.0;
    }
    sv.min() / max
}

/// Checks that `a` has full column rank with the crate-wide tolerance.
pub fn check_full_column_rank(a: &DMatrix<f64>) -> Result<()> {
    let ratio = singular_value_ratio(a);
    if ratio > RANK_TOL {
        Ok(())
    } else {
        Err(Error::RankDeficient { ratio })
    }
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 1 {
        return vec![m[(0, 0)]];
    }
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Symmetric PSD square root factor `S` with `S Sᵀ = sigma`.
///
/// Eigenvalues in `[-PSD_TOL * λmax, 0)` are clamped to zero; anything more
/// negative is rejected. The returned factor is the symmetric square root
/// `V diag(√λ) Vᵀ`, so `psd_sqrt(diag(4, 9)) = diag(2, 3)`.
pub fn psd_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if n != sigma.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "psd_sqrt needs a square matrix, got {}x{}",
            n,
            sigma.ncols()
        )));
    }
    if n == 1 {
        let s = sigma[(0, 0)];
        if s < 0.0 {
            return Err(Error::NotPsd { eigenvalue: s, tolerance: 0.0 });
        }
        return Ok(DMatrix::from_element(1, 1, s.max(0.0).sqrt()));
    }
    let eig = sigma.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.max().max(0.0);
    let tol = PSD_TOL * lmax;
    let mut roots = DVector::zeros(n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -tol {
            return Err(Error::NotPsd { eigenvalue: l, tolerance: -tol });
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Relative Frobenius distance `‖a - b‖_F / max(‖b‖_F, tiny)`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
