//! Small dense linear-algebra helpers shared by the loss formulas.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value threshold used for every numerical rank decision.
pub const RANK_TOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue of the symmetric part of `m`, with a unit eigenvector.
pub fn max_eigen(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let (idx, val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    (val, eig.eigenvectors.column(idx).into_owned())
}

pub fn eigenvalues_sym(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    eigenvalues_sym(m).min()
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    Ok(chol.inverse())
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    Ok(chol.solve(b))
}

pub fn log_det_spd(a: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Singular values below `RANK_TOL` times the largest count as zero.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

/// Orthogonal projector onto the column space of `m`.
pub fn column_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.max();
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| top > 0.0 && s > RANK_TOL * top)
        .map(|(i, _)| i)
        .collect();
    let basis = u.select_columns(&keep);
    &basis * basis.transpose()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Row-major lower-triangle entries of a square matrix.
pub fn lower_to_vec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn vec_to_lower(v: &[f64], n: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), n * (n + 1) / 2);
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = v[k];
            k += 1;
        }
    }
    m
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && max_abs_diff(m, &m.transpose()) <= tol
}
