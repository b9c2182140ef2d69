//! Induced matrix norms, norm-bounded covariance classes and the structured
//! covariance families (heteroscedastic, equicorrelated, MA(1), AR(1)).
//!
//! For a Loewner-monotone loss the maximum over a class
//! `{C : C >= 0, ||C|| <= eta^2}` is attained at `eta^2 I`; the sampling and
//! dominance routines here check that empirically.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixNormKind {
    /// Induced by the Euclidean norm: the largest singular value.
    Spectral,
    /// Maximum absolute column sum.
    OneNorm,
    /// Maximum absolute row sum.
    InfNorm,
}

impl MatrixNormKind {
    pub const ALL: [MatrixNormKind; 3] = [
        MatrixNormKind::Spectral,
        MatrixNormKind::OneNorm,
        MatrixNormKind::InfNorm,
    ];
}

pub fn matrix_norm(c: &DMatrix<f64>, kind: MatrixNormKind) -> f64 {
    match kind {
        MatrixNormKind::Spectral => {
            if c.is_empty() {
                0.0
            } else {
                c.clone().svd(false, false).singular_values.max()
            }
        }
        MatrixNormKind::OneNorm => c
            .column_iter()
            .map(|col| col.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        MatrixNormKind::InfNorm => c
            .row_iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max),
    }
}

/// The class of PSD `n x n` matrices with `||C||_M <= eta2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovClassSpec {
    pub norm: MatrixNormKind,
    pub eta2: f64,
    pub n: usize,
}

impl CovClassSpec {
    pub fn new(norm: MatrixNormKind, eta2: f64, n: usize) -> Result<Self> {
        if !(eta2 > 0.0 && eta2.is_finite()) {
            return Err(Error::OutOfRange {
                name: "eta2",
                value: eta2,
                range: "(0, inf)".into(),
            });
        }
        if n == 0 {
            return Err(Error::InvalidInput("class dimension must be >= 1".into()));
        }
        Ok(Self { norm, eta2, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovFamily {
    Heteroscedastic,
    Equicorrelated,
    Ma1,
    Ar1,
}

impl CovFamily {
    pub const ALL: [CovFamily; 4] = [
        CovFamily::Heteroscedastic,
        CovFamily::Equicorrelated,
        CovFamily::Ma1,
        CovFamily::Ar1,
    ];

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "hetero" | "heteroscedastic" => Ok(CovFamily::Heteroscedastic),
            "equi" | "equicorrelated" => Ok(CovFamily::Equicorrelated),
            "ma1" => Ok(CovFamily::Ma1),
            "ar1" => Ok(CovFamily::Ar1),
            _ => Err(Error::InvalidInput(format!("unknown covariance family '{name}'"))),
        }
    }

    /// The norm under which the family's bound is stated.
    pub fn natural_norm(self) -> MatrixNormKind {
        match self {
            CovFamily::Heteroscedastic | CovFamily::Ar1 => MatrixNormKind::Spectral,
            CovFamily::Equicorrelated | CovFamily::Ma1 => MatrixNormKind::InfNorm,
        }
    }
}

/// A concrete member of one of the structured families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StructuredCov {
    Heteroscedastic(Vec<f64>),
    Equicorrelated { sigma2: f64, rho: f64 },
    Ma1 { sigma2: f64, rho: f64 },
    Ar1 { sigma2: f64, rho: f64 },
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "sigma2",
            value: sigma2,
            range: "(0, inf)".into(),
        })
    }
}

fn rho_range(family: CovFamily, n: usize) -> (f64, f64, bool) {
    // (lower, upper, lower-exclusive)
    match family {
        CovFamily::Heteroscedastic => (0.0, 0.0, false),
        CovFamily::Equicorrelated => {
            let lo = if n > 1 { -1.0 / (n as f64 - 1.0) } else { f64::NEG_INFINITY };
            (lo, 1.0, true)
        }
        CovFamily::Ma1 => (-0.5, 0.5, false),
        CovFamily::Ar1 => (-1.0, 1.0, true),
    }
}

fn check_rho(family: CovFamily, rho: f64, n: usize) -> Result<()> {
    let (lo, hi, open) = rho_range(family, n);
    let ok = match family {
        CovFamily::Heteroscedastic => true,
        CovFamily::Ar1 => rho.abs() < 1.0,
        _ => (if open { rho > lo } else { rho >= lo }) && rho <= hi,
    };
    if ok && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "rho",
            value: rho,
            range: format!("{family:?} with n = {n}: [{lo}, {hi}]"),
        })
    }
}

pub fn build_cov(spec: &StructuredCov, n: usize) -> Result<DMatrix<f64>> {
    match spec {
        StructuredCov::Heteroscedastic(vars) => {
            if vars.len() != n {
                return Err(Error::Dimension(format!(
                    "{} variances for a {n} x {n} matrix",
                    vars.len()
                )));
            }
            if let Some(&bad) = vars.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::OutOfRange {
                    name: "sigma_i^2",
                    value: bad,
                    range: "[0, inf)".into(),
                });
            }
            Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(vars)))
        }
        StructuredCov::Equicorrelated { sigma2, rho } => {
            check_sigma2(*sigma2)?;
            check_rho(CovFamily::Equicorrelated, *rho, n)?;
            Ok(DMatrix::from_fn(n, n, |i, j| {
                sigma2 * if i == j { 1.0 } else { *rho }
            }))
        }
        StructuredCov::Ma1 { sigma2, rho } => {
            check_sigma2(*sigma2)?;
            check_rho(CovFamily::Ma1, *rho, n)?;
            Ok(DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
                0 => *sigma2,
                1 => sigma2 * rho,
                _ => 0.0,
            }))
        }
        StructuredCov::Ar1 { sigma2, rho } => {
            check_sigma2(*sigma2)?;
            check_rho(CovFamily::Ar1, *rho, n)?;
            Ok(DMatrix::from_fn(n, n, |i, j| {
                sigma2 * rho.powi(i.abs_diff(j) as i32)
            }))
        }
    }
}

/// Largest eigenvalue of the AR(1) autocorrelation matrix, maximized over
/// `|rho| <= rho_max`: dense eigensolves on a 1e-3 grid, then golden-section
/// refinement around the best grid point.
pub fn ar1_lambda_star(rho_max: f64, n: usize) -> Result<f64> {
    check_rho(CovFamily::Ar1, rho_max, n)?;
    let rho_max = rho_max.abs();
    let top = |rho: f64| {
        let c = DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32));
        linalg::eigenvalues_sym(&c).max()
    };
    let steps = (2.0 * rho_max / 1e-3).ceil().max(1.0) as usize;
    let grid: Vec<f64> = (0..=steps)
        .map(|k| -rho_max + 2.0 * rho_max * k as f64 / steps as f64)
        .collect();
    let (best_k, mut best) = grid
        .iter()
        .enumerate()
        .map(|(k, &r)| (k, top(r)))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let mut lo = grid[best_k.saturating_sub(1)];
    let mut hi = grid[(best_k + 1).min(steps)];
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut f1, mut f2) = (top(x1), top(x2));
    for _ in 0..60 {
        if f1 > f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = top(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = top(x2);
        }
    }
    best = best.max(f1).max(f2);
    Ok(best)
}

/// `eta^2` bounding the family's natural norm for all `|rho| <= rho_max`.
///
/// For the heteroscedastic family `sigma2` is the largest variance and
/// `rho_max` is ignored.
pub fn eta_bound(family: CovFamily, rho_max: f64, sigma2: f64, n: usize) -> Result<f64> {
    check_sigma2(sigma2)?;
    match family {
        CovFamily::Heteroscedastic => Ok(sigma2),
        CovFamily::Equicorrelated => {
            check_rho(family, rho_max, n)?;
            if rho_max < 0.0 {
                return Err(Error::OutOfRange {
                    name: "rho_max",
                    value: rho_max,
                    range: "[0, 1]".into(),
                });
            }
            Ok(sigma2 * (1.0 + (n as f64 - 1.0) * rho_max))
        }
        CovFamily::Ma1 => {
            check_rho(family, rho_max, n)?;
            Ok(sigma2 * (1.0 + 2.0 * rho_max.abs()))
        }
        CovFamily::Ar1 => Ok(sigma2 * ar1_lambda_star(rho_max, n)?),
    }
}

/// Bounds for the union of the four families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnionBound {
    pub heteroscedastic: f64,
    pub equicorrelated: f64,
    pub ma1: f64,
    pub ar1: f64,
    pub max: f64,
}

pub fn union_eta_bound(rho_max: f64, sigma2: f64, n: usize) -> Result<UnionBound> {
    let h = eta_bound(CovFamily::Heteroscedastic, rho_max, sigma2, n)?;
    let e = eta_bound(CovFamily::Equicorrelated, rho_max, sigma2, n)?;
    let m = eta_bound(CovFamily::Ma1, rho_max.min(0.5), sigma2, n)?;
    let a = eta_bound(CovFamily::Ar1, rho_max.min(1.0 - 1e-12), sigma2, n)?;
    Ok(UnionBound {
        heteroscedastic: h,
        equicorrelated: e,
        ma1: m,
        ar1: a,
        max: h.max(e).max(m).max(a),
    })
}

fn uniform_unit_open_low(rng: &mut Rng) -> f64 {
    // (0, 1]
    1.0 - rng.random::<f64>()
}

/// A random member of the class: `A'A` for standard normal `A`, rescaled so
/// that its norm is a uniform fraction in `(0, 1]` of `eta2`.
pub fn sample_member(spec: &CovClassSpec, rng: &mut Rng) -> DMatrix<f64> {
    let n = spec.n;
    let a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let c = a.transpose() * &a;
    let norm = matrix_norm(&c, spec.norm);
    let target = uniform_unit_open_low(rng) * spec.eta2;
    if norm > 0.0 {
        linalg::symmetrize(&(c * (target / norm)))
    } else {
        DMatrix::identity(n, n) * target
    }
}

/// Where the sampled covariance matrices come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CovSource {
    Class(CovClassSpec),
    /// Members of one structured family with `|rho| <= rho_max`.
    Family {
        family: CovFamily,
        rho_max: f64,
        sigma2: f64,
        n: usize,
    },
}

impl CovSource {
    pub fn n(&self) -> usize {
        match self {
            CovSource::Class(s) => s.n,
            CovSource::Family { n, .. } => *n,
        }
    }

    pub fn eta2(&self) -> Result<f64> {
        match self {
            CovSource::Class(s) => Ok(s.eta2),
            CovSource::Family {
                family,
                rho_max,
                sigma2,
                n,
            } => eta_bound(*family, *rho_max, *sigma2, *n),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<DMatrix<f64>> {
        match self {
            CovSource::Class(s) => Ok(sample_member(s, rng)),
            CovSource::Family {
                family,
                rho_max,
                sigma2,
                n,
            } => {
                let n = *n;
                let spec = match family {
                    CovFamily::Heteroscedastic => StructuredCov::Heteroscedastic(
                        (0..n).map(|_| sigma2 * uniform_unit_open_low(rng)).collect(),
                    ),
                    CovFamily::Equicorrelated => {
                        let lo = (-rho_max).max(rho_range(*family, n).0 + 1e-9);
                        let rho = lo + (rho_max - lo) * rng.random::<f64>();
                        StructuredCov::Equicorrelated { sigma2: *sigma2, rho }
                    }
                    CovFamily::Ma1 => StructuredCov::Ma1 {
                        sigma2: *sigma2,
                        rho: rho_max * (2.0 * rng.random::<f64>() - 1.0),
                    },
                    CovFamily::Ar1 => StructuredCov::Ar1 {
                        sigma2: *sigma2,
                        rho: rho_max * (2.0 * rng.random::<f64>() - 1.0),
                    },
                };
                build_cov(&spec, n)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub trials: usize,
    /// `max_trials loss(C) - loss(eta^2 I)`; `<= 0` for Loewner-monotone losses.
    pub max_violation: f64,
    pub reference_loss: f64,
    pub worst_loss: f64,
}

/// Empirical check that `loss(eta^2 I)` dominates `loss(C)` over the source.
pub fn verify_dominance<L>(
    loss: L,
    source: &CovSource,
    trials: usize,
    rng: &mut Rng,
) -> Result<DominanceReport>
where
    L: Fn(&DMatrix<f64>) -> f64,
{
    let n = source.n();
    let eta2 = source.eta2()?;
    let reference = loss(&(DMatrix::identity(n, n) * eta2));
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let c = source.sample(rng)?;
        worst = worst.max(loss(&c));
    }
    Ok(DominanceReport {
        trials,
        max_violation: worst - reference,
        reference_loss: reference,
        worst_loss: worst,
    })
}
