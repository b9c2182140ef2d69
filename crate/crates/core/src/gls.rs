//! Generalized least squares with a trace-normalized precision matrix, the
//! Loewner-monotone loss functionals and the residual variance estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, column_projector, numerical_rank, spd_solve, symmetrize};

/// Symmetric positive definite `P` with `tr(P) = n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix(DMatrix<f64>);

impl PrecisionMatrix {
    pub const TRACE_TOL: f64 = 1e-10;

    /// Validates an already normalized matrix.
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() || p.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "precision matrix must be square and nonempty, got {} x {}",
                p.nrows(),
                p.ncols()
            )));
        }
        let n = p.nrows() as f64;
        let scale = p.amax().max(1.0);
        if !linalg::is_symmetric(&p, 1e-10 * scale) {
            return Err(Error::InvalidInput("precision matrix is not symmetric".into()));
        }
        if (p.trace() - n).abs() > Self::TRACE_TOL * n {
            return Err(Error::OutOfRange {
                name: "tr(P)",
                value: p.trace(),
                range: format!("{n} +/- {:e}", Self::TRACE_TOL * n),
            });
        }
        let p = symmetrize(&p);
        if p.clone().cholesky().is_none() {
            return Err(Error::InvalidInput("precision matrix is not positive definite".into()));
        }
        Ok(Self(p))
    }

    /// Rescales a symmetric positive definite matrix to trace `n`.
    pub fn normalized(p: DMatrix<f64>) -> Result<Self> {
        let tr = p.trace();
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::InvalidInput(format!("cannot normalize matrix with trace {tr}")));
        }
        let n = p.nrows() as f64;
        Self::new(symmetrize(&(p * (n / tr))))
    }

    /// `P = L L'` rescaled to trace `n`.
    pub fn from_cholesky(l: &DMatrix<f64>) -> Result<Self> {
        Self::normalized(l * l.transpose())
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// Entrywise distance from `I_n`.
    pub fn distance_from_identity(&self) -> f64 {
        linalg::max_abs_diff(&self.0, &DMatrix::identity(self.n(), self.n()))
    }
}

impl Serialize for PrecisionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self.0.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PrecisionMatrix {
    /// Rows of a symmetric positive definite matrix; rescaled to trace `n`.
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let m = rows_to_matrix(&rows).map_err(serde::de::Error::custom)?;
        Self::normalized(m).map_err(serde::de::Error::custom)
    }
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension("matrix rows have unequal lengths".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Loewner-monotone scalar functions of a covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFunctional {
    Trace,
    Determinant,
    MaxEigenvalue,
    /// `tr(K S)` for a PSD weight `K`.
    WeightedTrace(DMatrix<f64>),
}

impl LossFunctional {
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "trace" | "tr" => Ok(Self::Trace),
            "det" | "determinant" => Ok(Self::Determinant),
            "maxeig" | "max_eigenvalue" | "chmax" => Ok(Self::MaxEigenvalue),
            _ => Err(Error::InvalidInput(format!(
                "unknown loss functional '{name}' (weighted_trace needs a weight matrix)"
            ))),
        }
    }

    pub fn weighted_trace(k: DMatrix<f64>) -> Result<Self> {
        if !linalg::is_symmetric(&k, 1e-10 * k.amax().max(1.0)) {
            return Err(Error::InvalidInput("weight matrix K is not symmetric".into()));
        }
        if linalg::min_eigenvalue(&k) < -1e-10 * k.amax().max(1.0) {
            return Err(Error::InvalidInput("weight matrix K is not PSD".into()));
        }
        Ok(Self::WeightedTrace(k))
    }

    /// `log det S` for the determinant functional, `None` otherwise or when
    /// `S` is not positive definite.
    pub fn log_value(&self, s: &DMatrix<f64>) -> Option<f64> {
        match self {
            Self::Determinant => linalg::log_det_spd(s, "covariance").ok(),
            _ => None,
        }
    }

    pub fn eval(&self, s: &DMatrix<f64>) -> f64 {
        match self {
            Self::Trace => s.trace(),
            Self::Determinant => match self.log_value(s) {
                Some(ld) => ld.exp(),
                // singular PSD input
                None => symmetrize(s).determinant().max(0.0),
            },
            Self::MaxEigenvalue => linalg::eigenvalues_sym(s).max(),
            Self::WeightedTrace(k) => (k * s).trace(),
        }
    }
}

fn check_shapes(x: &DMatrix<f64>, p: &PrecisionMatrix) -> Result<()> {
    if x.nrows() != p.n() {
        return Err(Error::Dimension(format!(
            "X has {} rows but P is {} x {}",
            x.nrows(),
            p.n(),
            p.n()
        )));
    }
    Ok(())
}

/// `X'PX`.
fn information(x: &DMatrix<f64>, p: &PrecisionMatrix) -> DMatrix<f64> {
    symmetrize(&(x.transpose() * p.matrix() * x))
}

/// `(X'PX)^{-1} X'P`.
fn gls_operator(x: &DMatrix<f64>, p: &PrecisionMatrix) -> Result<DMatrix<f64>> {
    check_shapes(x, p)?;
    let xp = x.transpose() * p.matrix();
    spd_solve(&information(x, p), &xp, "X'PX")
}

pub fn gls_estimate(x: &DMatrix<f64>, p: &PrecisionMatrix, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "y has length {} but X has {} rows",
            y.len(),
            x.nrows()
        )));
    }
    Ok(gls_operator(x, p)? * y)
}

/// `(X'PX)^{-1} X'PCPX (X'PX)^{-1}`.
pub fn gls_cov(x: &DMatrix<f64>, p: &PrecisionMatrix, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c.nrows() != x.nrows() || c.ncols() != x.nrows() {
        return Err(Error::Dimension(format!(
            "C is {} x {} but X has {} rows",
            c.nrows(),
            c.ncols(),
            x.nrows()
        )));
    }
    let a = gls_operator(x, p)?;
    Ok(symmetrize(&(&a * c * a.transpose())))
}

/// Worst case of `phi(cov)` over the class with bound `eta2`, attained at `eta2 I`.
pub fn max_loss(x: &DMatrix<f64>, p: &PrecisionMatrix, phi: &LossFunctional, eta2: f64) -> Result<f64> {
    let a = gls_operator(x, p)?;
    let cov = symmetrize(&(&a * a.transpose() * eta2));
    Ok(phi.eval(&cov))
}

/// `log` of the worst-case determinant.
pub fn max_log_det_loss(x: &DMatrix<f64>, p: &PrecisionMatrix, eta2: f64) -> Result<f64> {
    let a = gls_operator(x, p)?;
    let cov = symmetrize(&(&a * a.transpose() * eta2));
    linalg::log_det_spd(&cov, "GLS covariance")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    #[serde(rename = "S2")]
    pub s2: f64,
    pub df: usize,
}

/// Projector `H` onto `col(X | PX)`.
pub fn residual_projector_basis(x: &DMatrix<f64>, p: &PrecisionMatrix) -> Result<DMatrix<f64>> {
    check_shapes(x, p)?;
    let px = p.matrix() * x;
    let mut aug = DMatrix::zeros(x.nrows(), 2 * x.ncols());
    aug.columns_mut(0, x.ncols()).copy_from(x);
    aug.columns_mut(x.ncols(), x.ncols()).copy_from(&px);
    Ok(aug)
}

/// `S^2 = ||(I - H) y||^2 / (n - rk(H))`.
pub fn variance_estimate(x: &DMatrix<f64>, p: &PrecisionMatrix, y: &DVector<f64>) -> Result<VarianceEstimate> {
    if y.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "y has length {} but X has {} rows",
            y.len(),
            x.nrows()
        )));
    }
    let aug = residual_projector_basis(x, p)?;
    let rank = numerical_rank(&aug);
    let n = x.nrows();
    if n <= rank {
        return Err(Error::NoDegreesOfFreedom { n, rank });
    }
    let h = column_projector(&aug);
    let resid = y - &h * y;
    Ok(VarianceEstimate {
        s2: resid.norm_squared() / (n - rank) as f64,
        df: n - rank,
    })
}

/// `(X'PX)^{-1} X'P psi_X`.
pub fn bias_vector(x: &DMatrix<f64>, p: &PrecisionMatrix, psi_x: &DVector<f64>) -> Result<DVector<f64>> {
    gls_estimate(x, p, psi_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covclasses::{sample_member, CovClassSpec, CovFamily, CovSource, MatrixNormKind};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn random_x(n: usize, p: usize, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
    }

    fn random_p(n: usize, rng: &mut crate::rng::Rng) -> PrecisionMatrix {
        let a: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        PrecisionMatrix::normalized(a.transpose() * a + DMatrix::identity(n, n) * 0.1).unwrap()
    }

    #[test]
    fn sample_mean() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 3.0]);
        let t = gls_estimate(&x, &PrecisionMatrix::identity(2), &y).unwrap();
        assert!((t[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn precision_validation() {
        assert!(PrecisionMatrix::new(DMatrix::identity(3, 3) * 2.0).is_err());
        assert!(PrecisionMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(PrecisionMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0])).is_err());
        let p = PrecisionMatrix::normalized(DMatrix::identity(3, 3) * 5.0).unwrap();
        assert_eq!(p.distance_from_identity(), 0.0);
    }

    #[test]
    fn zero_residual_fit() {
        let mut rng = seeded(1);
        let x = random_x(8, 3, &mut rng);
        let theta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let y = &x * &theta;
        let c0 = crate::covclasses::build_cov(
            &crate::covclasses::StructuredCov::Ar1 { sigma2: 1.0, rho: 0.6 },
            8,
        )
        .unwrap();
        let p = PrecisionMatrix::normalized(linalg::spd_inverse(&c0, "C0").unwrap()).unwrap();
        let t = gls_estimate(&x, &p, &y).unwrap();
        assert!((t - theta).amax() < 1e-10);
    }

    #[test]
    fn singular_information_is_error() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let p = PrecisionMatrix::identity(3);
        assert!(matches!(
            gls_estimate(&x, &p, &DVector::zeros(3)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn cov_special_cases() {
        let mut rng = seeded(2);
        let x = random_x(7, 2, &mut rng);
        let i = DMatrix::identity(7, 7);
        let xtx_inv = linalg::spd_inverse(&(x.transpose() * &x), "X'X").unwrap();
        let cov = gls_cov(&x, &PrecisionMatrix::identity(7), &(i.clone() * 2.0)).unwrap();
        assert!(linalg::max_abs_diff(&cov, &(xtx_inv * 2.0)) < 1e-12);
        // P = C^{-1}: BLUE covariance
        let a = random_x(7, 7, &mut rng);
        let c = a.transpose() * &a + &i;
        let cinv = linalg::spd_inverse(&c, "C").unwrap();
        let p = PrecisionMatrix::normalized(cinv.clone()).unwrap();
        let blue = linalg::spd_inverse(&(x.transpose() * &cinv * &x), "X'C^-1X").unwrap();
        assert!(linalg::max_abs_diff(&gls_cov(&x, &p, &c).unwrap(), &blue) < 1e-10);
    }

    #[test]
    fn gauss_markov_lower_bound() {
        let mut rng = seeded(3);
        for _ in 0..50 {
            let x = random_x(9, 3, &mut rng);
            let p = random_p(9, &mut rng);
            let a = random_x(9, 9, &mut rng);
            let c = a.transpose() * &a + DMatrix::identity(9, 9) * 0.01;
            let cov = gls_cov(&x, &p, &c).unwrap();
            let cinv = linalg::spd_inverse(&c, "C").unwrap();
            let blue = linalg::spd_inverse(&(x.transpose() * cinv * &x), "BLUE").unwrap();
            let gap = linalg::min_eigenvalue(&(cov - &blue));
            assert!(gap >= -1e-9 * blue.amax(), "gap {gap}");
        }
    }

    #[test]
    fn max_loss_trace_example() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        // X'X = diag(2, 2)
        let v = max_loss(&x, &PrecisionMatrix::identity(4), &LossFunctional::Trace, 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn max_loss_dominates_sampled_members() {
        let mut rng = seeded(4);
        let x = random_x(6, 2, &mut rng);
        let p = random_p(6, &mut rng);
        let source = CovSource::Family {
            family: CovFamily::Equicorrelated,
            rho_max: 0.3,
            sigma2: 1.0,
            n: 6,
        };
        let eta2 = source.eta2().unwrap();
        for phi in [LossFunctional::Trace, LossFunctional::Determinant, LossFunctional::MaxEigenvalue] {
            let bound = max_loss(&x, &p, &phi, eta2).unwrap();
            let attained = phi.eval(&gls_cov(&x, &p, &(DMatrix::identity(6, 6) * eta2)).unwrap());
            // same quantity computed two ways
            assert!((bound - attained).abs() <= 1e-9 * bound.abs().max(1.0));
            let mut best = f64::NEG_INFINITY;
            for _ in 0..1000 {
                let c = source.sample(&mut rng).unwrap();
                best = best.max(phi.eval(&gls_cov(&x, &p, &c).unwrap()));
            }
            assert!(best <= bound + 1e-9, "{phi:?}: {best} > {bound}");
        }
    }

    #[test]
    fn variance_estimate_df() {
        let mut rng = seeded(5);
        let x = random_x(10, 2, &mut rng);
        let y = DVector::from_fn(10, |_, _| StandardNormal.sample(&mut rng));
        let ols = variance_estimate(&x, &PrecisionMatrix::identity(10), &y).unwrap();
        assert_eq!(ols.df, 8);
        let xtx_inv = linalg::spd_inverse(&(x.transpose() * &x), "X'X").unwrap();
        let resid = &y - &x * (xtx_inv * x.transpose() * &y);
        assert!((ols.s2 - resid.norm_squared() / 8.0).abs() < 1e-12);
        let p = random_p(10, &mut rng);
        assert_eq!(variance_estimate(&x, &p, &y).unwrap().df, 6);
    }

    #[test]
    fn variance_estimate_no_df() {
        let mut rng = seeded(6);
        let x = random_x(4, 2, &mut rng);
        let p = random_p(4, &mut rng);
        let y = DVector::from_element(4, 1.0);
        assert!(matches!(
            variance_estimate(&x, &p, &y),
            Err(Error::NoDegreesOfFreedom { n: 4, rank: 4 })
        ));
    }

    #[test]
    fn projector_properties() {
        let mut rng = seeded(7);
        let x = random_x(10, 3, &mut rng);
        let p = random_p(10, &mut rng);
        let aug = residual_projector_basis(&x, &p).unwrap();
        let h = column_projector(&aug);
        assert!(linalg::max_abs_diff(&(&h * &h), &h) < 1e-10);
        assert!(linalg::is_symmetric(&h, 1e-10));
        let i_h = DMatrix::identity(10, 10) - &h;
        assert!((&i_h * &aug).amax() < 1e-10);
    }

    #[test]
    fn bias_vector_matches_expectation() {
        let mut rng = seeded(8);
        let x = random_x(8, 2, &mut rng);
        let p = random_p(8, &mut rng);
        let theta = DVector::from_vec(vec![0.3, -1.1]);
        let psi = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
        // noiseless response under the misspecified model
        let y = &x * &theta + &psi;
        let b = bias_vector(&x, &p, &psi).unwrap();
        let t = gls_estimate(&x, &p, &y).unwrap();
        assert!((t - &theta - &b).amax() < 1e-12);
        assert_eq!(bias_vector(&x, &p, &DVector::zeros(8)).unwrap(), DVector::zeros(2));
        let psi_m = DMatrix::from_column_slice(8, 1, psi.as_slice());
        let coef = linalg::spd_solve(&(x.transpose() * &x), &(x.transpose() * &psi_m), "X'X").unwrap();
        let orth = &psi_m - &x * coef;
        let b0 = bias_vector(&x, &PrecisionMatrix::identity(8), &orth.column(0).into_owned()).unwrap();
        assert!(b0.amax() < 1e-12);
    }

    #[test]
    fn monte_carlo_class_members_are_dominated() {
        let mut rng = seeded(9);
        let x = random_x(5, 2, &mut rng);
        let p = random_p(5, &mut rng);
        for kind in MatrixNormKind::ALL {
            let spec = CovClassSpec::new(kind, 1.5, 5).unwrap();
            let bound = max_loss(&x, &p, &LossFunctional::MaxEigenvalue, 1.5).unwrap();
            for _ in 0..500 {
                let c = sample_member(&spec, &mut rng);
                let v = LossFunctional::MaxEigenvalue.eval(&gls_cov(&x, &p, &c).unwrap());
                assert!(v <= bound + 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scale_invariance(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = seeded(seed);
            let x = random_x(7, 3, &mut rng);
            let p = random_p(7, &mut rng);
            let y = DVector::from_fn(7, |_, _| StandardNormal.sample(&mut rng));
            // raw scaling bypasses the trace normalization
            let scaled = PrecisionMatrix(p.matrix() * c);
            let a = gls_estimate(&x, &p, &y).unwrap();
            let b = gls_estimate(&x, &scaled, &y).unwrap();
            prop_assert!((a - b).amax() <= 1e-12 * (1.0 + y.amax()) * 10.0);
        }

        #[test]
        fn gauss_markov_minimax(seed in any::<u64>(), eta2 in 0.1f64..10.0, which in 0usize..4) {
            let mut rng = seeded(seed);
            let x = random_x(8, 2, &mut rng);
            let p = random_p(8, &mut rng);
            let phi = match which {
                0 => LossFunctional::Trace,
                1 => LossFunctional::Determinant,
                2 => LossFunctional::MaxEigenvalue,
                _ => {
                    let k = random_x(2, 2, &mut rng);
                    LossFunctional::weighted_trace(k.transpose() * k).unwrap()
                }
            };
            let gap = max_loss(&x, &p, &phi, eta2).unwrap()
                - max_loss(&x, &PrecisionMatrix::identity(8), &phi, eta2).unwrap();
            prop_assert!(gap >= -1e-10);
        }
    }
}
