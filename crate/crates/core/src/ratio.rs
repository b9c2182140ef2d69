//! Worst-case determinant-loss ratio of OLS to GLS under a fixed
//! equicorrelated covariance, its closed form, and a family of designs that
//! makes the ratio unbounded.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_det_spd, symmetrize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioVia {
    Direct,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub r: f64,
    #[serde(rename = "S")]
    pub s: f64,
    /// Present for equicorrelated `C0`.
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub via: RatioVia,
}

/// Orthonormal basis of `col(X)` via thin QR.
fn orthonormal(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if p == 0 || n < p {
        return Err(Error::Dimension(format!("X is {n} x {p}")));
    }
    if crate::linalg::numerical_rank(x) < p {
        return Err(Error::RankDeficient {
            rank: crate::linalg::numerical_rank(x),
            expected: p,
        });
    }
    Ok(x.clone().qr().q())
}

/// `|Q'C0^{-2}Q| / |Q'C0^{-1}Q|^2` for an orthonormal basis `Q` of `col(X)`.
pub fn ratio_direct(x: &DMatrix<f64>, c0: &DMatrix<f64>) -> Result<RatioReport> {
    if c0.nrows() != x.nrows() || !c0.is_square() {
        return Err(Error::Dimension(format!(
            "C0 is {} x {} but X has {} rows",
            c0.nrows(),
            c0.ncols(),
            x.nrows()
        )));
    }
    let q = orthonormal(x)?;
    let chol = symmetrize(c0)
        .cholesky()
        .ok_or_else(|| Error::Singular("C0".into()))?;
    let ciq = chol.solve(&q);
    let m1 = symmetrize(&(q.transpose() * &ciq));
    let m2 = symmetrize(&(ciq.transpose() * &ciq));
    let log_r = log_det_spd(&m2, "Q'C0^-2Q")? - 2.0 * log_det_spd(&m1, "Q'C0^-1Q")?;
    let ones = DVector::from_element(x.nrows(), 1.0);
    let s = (q.transpose() * ones).norm_squared();
    Ok(RatioReport {
        r: log_r.exp(),
        s,
        beta: None,
        gamma: None,
        via: RatioVia::Direct,
    })
}

/// `(1 - rho) I + rho 1 1'`.
pub fn equicorrelation(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho })
}

/// `beta = alpha / (1 + n alpha)` and `gamma = 2 beta - n beta^2` with `alpha = rho / (1 - rho)`.
pub fn equicorr_params(n: usize, rho: f64) -> Result<(f64, f64)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::OutOfRange {
            name: "rho",
            value: rho,
            range: "(0, 1)".into(),
        });
    }
    let alpha = rho / (1.0 - rho);
    let beta = alpha / (1.0 + n as f64 * alpha);
    Ok((beta, 2.0 * beta - n as f64 * beta * beta))
}

/// `1 + S beta^2 (n - S) / (1 - S beta)^2`.
pub fn ratio_equicorr(n: usize, rho: f64, s: f64) -> Result<RatioReport> {
    let (beta, gamma) = equicorr_params(n, rho)?;
    let nf = n as f64;
    if !(s >= -1e-10 && s <= nf + 1e-10) {
        return Err(Error::OutOfRange {
            name: "S",
            value: s,
            range: format!("[0, {n}]"),
        });
    }
    let denom = 1.0 - s * beta;
    Ok(RatioReport {
        r: 1.0 + s * beta * beta * (nf - s) / (denom * denom),
        s,
        beta: Some(beta),
        gamma: Some(gamma),
        via: RatioVia::ClosedForm,
    })
}

/// `(n - eps)(1/n - eps)^2 / (n + 1/n - eps)^2`.
pub fn phi_n(n: usize, eps: f64) -> f64 {
    let nf = n as f64;
    (nf - eps) * (1.0 / nf - eps).powi(2) / (nf + 1.0 / nf - eps).powi(2)
}

/// `lim_{eps -> 0} phi_n(eps) = n / (n^2 + 1)^2`.
pub fn phi_n_limit(n: usize) -> f64 {
    let nf = n as f64;
    nf / (nf * nf + 1.0).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub rho: f64,
    pub epsilon: f64,
    pub direct: RatioReport,
    pub closed: RatioReport,
}

/// A single regressor with mean 1 and variance `eps / (n - eps)` (two values,
/// split as evenly as `n` allows) and `rho` chosen so that `beta = 1/n - eps`.
/// Then `S = n - eps` and `r = 1 + phi_n(eps) / eps`.
pub fn unboundedness_witness(n: usize, epsilon: f64) -> Result<Witness> {
    if n < 2 {
        return Err(Error::InvalidInput("the witness needs n >= 2".into()));
    }
    let nf = n as f64;
    if !(epsilon > 0.0 && epsilon < 1.0 / nf) {
        return Err(Error::OutOfRange {
            name: "epsilon",
            value: epsilon,
            range: format!("(0, {})", 1.0 / nf),
        });
    }
    let k = n / 2;
    let kf = k as f64;
    let var = epsilon / (nf - epsilon);
    let t = (var / (kf * (nf - kf))).sqrt();
    let x: Vec<f64> = (0..n)
        .map(|i| if i < k { 1.0 + t * (nf - kf) } else { 1.0 - t * kf })
        .collect();
    let beta = 1.0 / nf - epsilon;
    let alpha = beta / (1.0 - nf * beta);
    let rho = alpha / (1.0 + alpha);
    let xm = DMatrix::from_column_slice(n, 1, &x);
    let direct = ratio_direct(&xm, &equicorrelation(n, rho))?;
    let closed = ratio_equicorr(n, rho, nf - epsilon)?;
    Ok(Witness {
        x,
        rho,
        epsilon,
        direct,
        closed,
    })
}
