//! Maximum integrated mean squared prediction error over the contamination
//! class, its variance and bias components, the rank-`q` precision `P0` and
//! its regularization `P_eps`, and a brute-force check of the closed form.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::{self, PrecisionMatrix};
use crate::linalg::{self, spd_solve, symmetrize};
use crate::linmodel::{IndicatorStructure, OrthoBasis};
use crate::rng::seeded;

/// Default regularization for `P_eps`.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Epsilons listed in the `nu0` report.
pub const NU0_EPS_GRID: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "I0")]
    pub i0: f64,
    #[serde(rename = "I1")]
    pub i1: f64,
    pub nu: f64,
    #[serde(rename = "Inu")]
    pub inu: f64,
}

impl LossBreakdown {
    pub fn new(i0: f64, i1: f64, nu: f64) -> Self {
        Self {
            i0,
            i1,
            nu,
            inu: (1.0 - nu) * i0 + nu * i1,
        }
    }
}

pub(crate) fn check_nu(nu: f64) -> Result<()> {
    if (0.0..=1.0).contains(&nu) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "nu",
            value: nu,
            range: "[0, 1]".into(),
        })
    }
}

/// Sums the rows of `w` by design point: `J' w`.
pub(crate) fn group_rows(w: &DMatrix<f64>, obs_point: &[usize], big_n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(big_n, w.ncols());
    for (r, &pt) in obs_point.iter().enumerate() {
        let row = w.row(r);
        let mut dst = out.row_mut(pt);
        dst += row;
    }
    out
}

/// `(I0, I1)` for an arbitrary symmetric `P` with `Q'J'PJQ` nonsingular.
fn components_for(j: &IndicatorStructure, basis: &OrthoBasis, p: &DMatrix<f64>) -> Result<(f64, f64)> {
    if p.nrows() != j.n() || p.ncols() != j.n() {
        return Err(Error::Dimension(format!(
            "precision is {} x {} but the design has n = {}",
            p.nrows(),
            p.ncols(),
            j.n()
        )));
    }
    if basis.big_n() != j.big_n() {
        return Err(Error::Dimension(format!(
            "design has {} points but the basis has {}",
            j.big_n(),
            basis.big_n()
        )));
    }
    let z = j.jq(basis);
    let w = p * &z;
    let a = symmetrize(&(z.transpose() * &w));
    let what = "Q'UQ (design and precision incompatible)";
    // A^{-1} W'
    let aw = spd_solve(&a, &w.transpose(), what)?;
    let i0 = aw.norm_squared();
    let g = group_rows(&w, j.obs_point(), j.big_n());
    // rows of G A^{-1}
    let ga = spd_solve(&a, &g.transpose(), what)?;
    let m = symmetrize(&(&ga * ga.transpose()));
    let i1 = linalg::eigenvalues_sym(&m).max();
    Ok((i0, i1))
}

/// Variance and bias components `(I0, I1)`.
pub fn imspe_components(j: &IndicatorStructure, basis: &OrthoBasis, p: &PrecisionMatrix) -> Result<(f64, f64)> {
    components_for(j, basis, p.matrix())
}

/// Same as [`imspe_components`] for a PSD, possibly singular `P` such as `P0`.
pub fn imspe_components_psd(j: &IndicatorStructure, basis: &OrthoBasis, p: &DMatrix<f64>) -> Result<(f64, f64)> {
    components_for(j, basis, p)
}

pub fn imspe_nu(j: &IndicatorStructure, basis: &OrthoBasis, p: &PrecisionMatrix, nu: f64) -> Result<LossBreakdown> {
    check_nu(nu)?;
    let (i0, i1) = imspe_components(j, basis, p)?;
    Ok(LossBreakdown::new(i0, i1, nu))
}

/// `I_nu` at `P = I_n`.
pub fn imspe_nu_identity(j: &IndicatorStructure, basis: &OrthoBasis, nu: f64) -> Result<LossBreakdown> {
    imspe_nu(j, basis, &PrecisionMatrix::identity(j.n()), nu)
}

fn check_reduced(d_plus: &DMatrix<f64>, q_plus: &DMatrix<f64>) -> Result<()> {
    if d_plus.nrows() != q_plus.nrows() || !d_plus.is_square() {
        return Err(Error::Dimension(format!(
            "D+ is {} x {} but Q+ has {} rows",
            d_plus.nrows(),
            d_plus.ncols(),
            q_plus.nrows()
        )));
    }
    Ok(())
}

/// Reduced forms at `P = I_n`:
/// `I0 = tr{(Q+'D+Q+)^{-1}}`,
/// `I1 = ch_max{(Q+'D+Q+)^{-1} Q+'D+^2 Q+ (Q+'D+Q+)^{-1}}`.
pub fn ols_closed_forms(d_plus: &DMatrix<f64>, q_plus: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_reduced(d_plus, q_plus)?;
    let dq = d_plus * q_plus;
    let a = symmetrize(&(q_plus.transpose() * &dq));
    let what = "Q+'D+Q+";
    let i0 = linalg::spd_inverse(&a, what)?.trace();
    let s = spd_solve(&a, &dq.transpose(), what)?;
    let i1 = linalg::eigenvalues_sym(&(&s * s.transpose())).max();
    Ok((i0, i1))
}

/// Reduced forms at `P0`:
/// `I0 = tr{(Q+'Q+)^{-1} Q+'D+^{-1}Q+ (Q+'Q+)^{-1}}`, `I1 = ch_max{(Q+'Q+)^{-1}}`.
pub fn p0_closed_forms(d_plus: &DMatrix<f64>, q_plus: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_reduced(d_plus, q_plus)?;
    let what = "Q+'Q+";
    let g = symmetrize(&(q_plus.transpose() * q_plus));
    let inv_d = DMatrix::from_diagonal(&d_plus.diagonal().map(|v| 1.0 / v));
    let mid = q_plus.transpose() * inv_d * q_plus;
    let ginv = linalg::spd_inverse(&g, what)?;
    let i0 = (&ginv * mid * &ginv).trace();
    let i1 = linalg::eigenvalues_sym(&ginv).max();
    Ok((i0, i1))
}

/// `P0 = alpha J+ D+^{-2} J+'` with `alpha = n / tr(D+^{-1})`.
pub fn p0_matrix(j: &IndicatorStructure) -> DMatrix<f64> {
    let counts = j.counts();
    let obs = j.obs_point();
    let inv_sum: f64 = j.support().iter().map(|&i| 1.0 / counts[i] as f64).sum();
    let alpha = j.n() as f64 / inv_sum;
    let n = j.n();
    DMatrix::from_fn(n, n, |r, c| {
        if obs[r] == obs[c] {
            let k = counts[obs[r]] as f64;
            alpha / (k * k)
        } else {
            0.0
        }
    })
}

/// `P_eps = (P0 + eps I) / (1 + eps)`.
pub fn p_eps(p0: &DMatrix<f64>, epsilon: f64) -> Result<PrecisionMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::OutOfRange {
            name: "epsilon",
            value: epsilon,
            range: "(0, inf)".into(),
        });
    }
    let n = p0.nrows();
    let m = (p0 + DMatrix::identity(n, n) * epsilon) / (1.0 + epsilon);
    PrecisionMatrix::normalized(m)
}

/// A difference counts as zero below `1e-9 (1 + |magnitude|)`.
pub fn is_zero_difference(diff: f64, magnitude: f64) -> bool {
    diff < 1e-9 * (1.0 + magnitude.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nu0AtEps {
    pub epsilon: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub nu0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Diagnostics {
    pub epsilon: f64,
    /// `I0(P_eps) - I0(I)`.
    pub delta0: f64,
    /// `I1(I) - I1(P_eps)`.
    pub delta1: f64,
    /// `delta0 / (delta0 + delta1)`, present when both conditions fail.
    pub nu0: Option<f64>,
    pub cond_inverse_holds: bool,
    pub cond_square_holds: bool,
    #[serde(rename = "I0_identity")]
    pub i0_identity: f64,
    #[serde(rename = "I1_identity")]
    pub i1_identity: f64,
    #[serde(rename = "I0_p0")]
    pub i0_p0: f64,
    #[serde(rename = "I1_p0")]
    pub i1_p0: f64,
    pub nu0_by_eps: Vec<Nu0AtEps>,
    /// `I_nu(P_eps) < I_nu(I)` on a grid of `nu` in `(nu0, 1]`; absent without `nu0`.
    pub improvement_verified: Option<bool>,
}

fn nu0_from(delta0: f64, delta1: f64) -> Option<f64> {
    let s = delta0 + delta1;
    if delta0 >= 0.0 && delta1 >= 0.0 && s > 0.0 {
        Some(delta0 / s)
    } else {
        None
    }
}

pub fn theorem3_check(j: &IndicatorStructure, basis: &OrthoBasis, epsilon: f64) -> Result<Theorem3Diagnostics> {
    let (i0_i, i1_i) = imspe_components(j, basis, &PrecisionMatrix::identity(j.n()))?;
    let p0 = p0_matrix(j);
    let (i0_p0, i1_p0) = imspe_components_psd(j, basis, &p0)?;
    let cond_inverse_holds = is_zero_difference(i0_p0 - i0_i, i0_i);
    let cond_square_holds = is_zero_difference(i1_i - i1_p0, i1_i);
    let both_fail = !cond_inverse_holds && !cond_square_holds;

    let at = |eps: f64| -> Result<Nu0AtEps> {
        let pe = p_eps(&p0, eps)?;
        let (i0, i1) = imspe_components(j, basis, &pe)?;
        let (delta0, delta1) = (i0 - i0_i, i1_i - i1);
        Ok(Nu0AtEps {
            epsilon: eps,
            delta0,
            delta1,
            nu0: if both_fail { nu0_from(delta0, delta1) } else { None },
        })
    };
    let main = at(epsilon)?;
    let nu0_by_eps = NU0_EPS_GRID.iter().map(|&e| at(e)).collect::<Result<Vec<_>>>()?;

    let improvement_verified = match main.nu0 {
        Some(nu0) => {
            let pe = p_eps(&p0, epsilon)?;
            let (i0_e, i1_e) = imspe_components(j, basis, &pe)?;
            let ok = (1..=10).all(|k| {
                let nu = nu0 + (1.0 - nu0) * k as f64 / 10.0;
                LossBreakdown::new(i0_e, i1_e, nu).inu < LossBreakdown::new(i0_i, i1_i, nu).inu
            });
            Some(ok)
        }
        None => None,
    };

    Ok(Theorem3Diagnostics {
        epsilon,
        delta0: main.delta0,
        delta1: main.delta1,
        nu0: main.nu0,
        cond_inverse_holds,
        cond_square_holds,
        i0_identity: i0_i,
        i1_identity: i1_i,
        i0_p0,
        i1_p0,
        nu0_by_eps,
        improvement_verified,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BruteForceMode {
    /// Top eigenvector of the bias quadratic form.
    ExactEigen,
    /// Best of `samples` uniform directions on the unit sphere (a lower bound).
    RandomSearch { seed: u64, samples: usize },
}

/// The contaminant `psi = tau Q* beta` for a unit `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContaminationSpec {
    pub tau2: f64,
    pub beta: DVector<f64>,
}

impl ContaminationSpec {
    pub fn new(tau2: f64, beta: DVector<f64>) -> Result<Self> {
        if !(tau2 >= 0.0) {
            return Err(Error::OutOfRange {
                name: "tau2",
                value: tau2,
                range: "[0, inf)".into(),
            });
        }
        let norm = beta.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidInput("beta must be nonzero".into()));
        }
        Ok(Self { tau2, beta: beta / norm })
    }

    pub fn psi(&self, basis: &OrthoBasis) -> DVector<f64> {
        basis.q_star() * &self.beta * self.tau2.sqrt()
    }
}

/// Maximum IMSPE evaluated directly: the variance trace at `C = eta2 I`
/// plus the largest squared bias and `||psi||^2` over contaminants with
/// `||psi||^2 = tau2` orthogonal to the regressors.
pub fn brute_force_max_imspe(
    j: &IndicatorStructure,
    basis: &OrthoBasis,
    p: &PrecisionMatrix,
    eta2: f64,
    tau2: f64,
    mode: BruteForceMode,
) -> Result<f64> {
    let f = basis.q() * basis.r();
    let x = j.design_matrix(&crate::linmodel::RegressorMatrix::from_matrix(f.clone())?);
    let n = j.n();
    let cov = gls::gls_cov(&x, p, &(DMatrix::identity(n, n) * eta2))?;
    let variance = (&f * cov * f.transpose()).trace();
    // b(beta) = F (X'PX)^{-1} X'P J Q* beta
    let xp = x.transpose() * p.matrix();
    let info = symmetrize(&(&xp * &x));
    let jqs = basis.q_star().select_rows(j.obs_point());
    let b = &f * spd_solve(&info, &(&xp * jqs), "X'PX")?;
    let btb = symmetrize(&(b.transpose() * &b));
    let bias = match mode {
        BruteForceMode::ExactEigen => {
            if btb.nrows() == 0 {
                0.0
            } else {
                linalg::max_eigen(&btb).0.max(0.0)
            }
        }
        BruteForceMode::RandomSearch { seed, samples } => {
            let mut rng = seeded(seed);
            let dim = btb.nrows();
            let mut best: f64 = 0.0;
            for _ in 0..samples {
                let v = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
                let nv = v.norm_squared();
                if nv > 0.0 {
                    best = best.max((v.transpose() * &btb * &v)[(0, 0)] / nv);
                }
            }
            best
        }
    };
    Ok(variance + tau2 * (bias + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TMeasures {
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T2")]
    pub t2: f64,
    #[serde(rename = "T3")]
    pub t3: f64,
}

/// Percent reduction in `I_nu`, percent increase in `I0`, percent decrease
/// in `I1`, each relative to `P = I_n`.
pub fn t_measures(j: &IndicatorStructure, basis: &OrthoBasis, p_nu: &PrecisionMatrix, nu: f64) -> Result<TMeasures> {
    let at_i = imspe_nu_identity(j, basis, nu)?;
    let at_p = imspe_nu(j, basis, p_nu, nu)?;
    Ok(t_from(&at_i, &at_p))
}

pub fn t_from(at_i: &LossBreakdown, at_p: &LossBreakdown) -> TMeasures {
    TMeasures {
        t1: 100.0 * (at_i.inu - at_p.inu) / at_i.inu,
        t2: 100.0 * (at_p.i0 - at_i.i0) / at_i.i0,
        t3: 100.0 * (at_i.i1 - at_p.i1) / at_i.i1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{indicator_from_design, Design, ModelSpec, Problem};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn problem(model: ModelSpec, big_n: usize) -> Problem {
        Problem::equispaced(model, big_n).unwrap()
    }

    /// Explicit `U = J'PJ`, `V = J'P^2J` evaluation.
    fn direct(j: &IndicatorStructure, basis: &OrthoBasis, p: &DMatrix<f64>) -> (f64, f64) {
        let u = j.j().transpose() * p * j.j();
        let v = j.j().transpose() * p * p * j.j();
        let q = basis.q();
        let a_inv = (q.transpose() * &u * q).try_inverse().unwrap();
        let i0 = (&a_inv * q.transpose() * &v * q * &a_inv).trace();
        let m = &a_inv * q.transpose() * &u * &u * q * &a_inv;
        (i0, linalg::eigenvalues_sym(&m).max())
    }

    fn random_precision(n: usize, rng: &mut crate::rng::Rng) -> PrecisionMatrix {
        let a: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        PrecisionMatrix::normalized(a.transpose() * a + DMatrix::identity(n, n) * 0.05).unwrap()
    }

    fn random_design(big_n: usize, p: usize, rng: &mut crate::rng::Rng) -> Design {
        loop {
            let counts: Vec<usize> = (0..big_n).map(|_| rng.random_range(0..3)).collect();
            if counts.iter().filter(|&&c| c > 0).count() >= p {
                return Design::new(counts).unwrap();
            }
        }
    }

    #[test]
    fn uniform_full_design() {
        for (model, p) in [(ModelSpec::linear(), 2), (ModelSpec::quadratic(), 3)] {
            let pr = problem(model, 7);
            for k in 1..=3 {
                let d = Design::new(vec![k; 7]).unwrap();
                let j = indicator_from_design(&d);
                let (i0, i1) = imspe_components(&j, &pr.basis, &PrecisionMatrix::identity(7 * k)).unwrap();
                assert!((i0 - p as f64 / k as f64).abs() < 1e-12);
                assert!((i1 - 1.0).abs() < 1e-12);
            }
        }
        let pr = problem(ModelSpec::linear(), 11);
        let j = indicator_from_design(&Design::new(vec![1; 11]).unwrap());
        let l = imspe_nu_identity(&j, &pr.basis, 0.5).unwrap();
        assert!((l.inu - 1.5).abs() < 1e-12);
        assert!((imspe_nu_identity(&j, &pr.basis, 1.0).unwrap().inu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fast_path_matches_direct() {
        let mut rng = seeded(21);
        for _ in 0..30 {
            let pr = problem(ModelSpec::quadratic(), 6);
            let d = random_design(6, 3, &mut rng);
            let j = indicator_from_design(&d);
            let p = random_precision(d.n(), &mut rng);
            let (a0, a1) = imspe_components(&j, &pr.basis, &p).unwrap();
            let (b0, b1) = direct(&j, &pr.basis, p.matrix());
            assert!((a0 - b0).abs() < 1e-8 * b0 && (a1 - b1).abs() < 1e-8 * b1);
        }
    }

    #[test]
    fn reduced_forms_match_generic() {
        let pr = problem(ModelSpec::quadratic(), 3);
        let j = indicator_from_design(&Design::new(vec![2, 1, 2]).unwrap());
        let (g0, g1) = imspe_components(&j, &pr.basis, &PrecisionMatrix::identity(5)).unwrap();
        let (r0, r1) = ols_closed_forms(j.d_plus(), &j.q_plus(&pr.basis)).unwrap();
        assert!((g0 - r0).abs() < 1e-12 && (g1 - r1).abs() < 1e-12);

        let mut rng = seeded(22);
        for _ in 0..30 {
            let pr = problem(ModelSpec::cubic(), 9);
            let d = random_design(9, 4, &mut rng);
            let j = indicator_from_design(&d);
            let qp = j.q_plus(&pr.basis);
            let (g0, g1) = imspe_components(&j, &pr.basis, &PrecisionMatrix::identity(d.n())).unwrap();
            let (r0, r1) = ols_closed_forms(j.d_plus(), &qp).unwrap();
            assert!((g0 - r0).abs() < 1e-10 * g0 && (g1 - r1).abs() < 1e-10 * g1);
            let (p0a, p1a) = imspe_components_psd(&j, &pr.basis, &p0_matrix(&j)).unwrap();
            let (p0b, p1b) = p0_closed_forms(j.d_plus(), &qp).unwrap();
            assert!((p0a - p0b).abs() < 1e-10 * p0b && (p1a - p1b).abs() < 1e-10 * p1b);
            // limit consistency through P_eps
            let pe = p_eps(&p0_matrix(&j), 1e-8).unwrap();
            let (e0, e1) = imspe_components(&j, &pr.basis, &pe).unwrap();
            assert!((e0 - p0b).abs() < 1e-5 * p0b && (e1 - p1b).abs() < 1e-5 * p1b);
            // lower bound on I1 at P = I
            let g = qp.transpose() * &qp;
            let lb = linalg::eigenvalues_sym(&g.try_inverse().unwrap()).max();
            assert!(r1 >= lb - 1e-10 * (1.0 + lb), "{r1} {lb} {:?}", d.counts());
        }
    }

    #[test]
    fn p0_example() {
        let j = indicator_from_design(&Design::new(vec![2, 1]).unwrap());
        let p0 = p0_matrix(&j);
        let want = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 2.0]);
        assert!(linalg::max_abs_diff(&p0, &want) < 1e-15);
        assert!((p0.trace() - 3.0).abs() < 1e-15);
        let pe = p_eps(&p0, 0.1).unwrap();
        assert!(linalg::min_eigenvalue(pe.matrix()) >= 0.1 / 1.1 - 1e-12);
        assert!((pe.matrix().trace() - 3.0).abs() < 1e-12);
        assert!(p_eps(&p0, 0.0).is_err());
        assert!(p_eps(&p0, -1.0).is_err());

        let j = indicator_from_design(&Design::new(vec![1, 0, 1, 1]).unwrap());
        assert_eq!(p0_matrix(&j), DMatrix::identity(3, 3));
    }

    #[test]
    fn p0_rank_is_q() {
        let mut rng = seeded(23);
        for _ in 0..20 {
            let d = random_design(8, 1, &mut rng);
            let j = indicator_from_design(&d);
            let p0 = p0_matrix(&j);
            let ev = linalg::eigenvalues_sym(&p0);
            let nonzero = ev.iter().filter(|&&e| e > 1e-10).count();
            assert_eq!(nonzero, d.support_size());
            assert!((p0.trace() - d.n() as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn p_eps_continuity() {
        let pr = problem(ModelSpec::quadratic(), 7);
        let j = indicator_from_design(&Design::new(vec![3, 1, 1, 0, 1, 1, 2]).unwrap());
        let p0 = p0_matrix(&j);
        let (l0, l1) = imspe_components_psd(&j, &pr.basis, &p0).unwrap();
        let limit = LossBreakdown::new(l0, l1, 0.5).inu;
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let pe = p_eps(&p0, 10f64.powi(-k)).unwrap();
            let gap = (imspe_nu(&j, &pr.basis, &pe, 0.5).unwrap().inu - limit).abs();
            assert!(gap < prev || gap < 1e-12);
            prev = gap;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn p0_bias_strictly_smaller_for_nonuniform() {
        let pr = problem(ModelSpec::quadratic(), 5);
        let j = indicator_from_design(&Design::new(vec![3, 1, 1, 1, 1]).unwrap());
        let qp = j.q_plus(&pr.basis);
        let (_, i1_p0) = p0_closed_forms(j.d_plus(), &qp).unwrap();
        let (_, i1_ols) = ols_closed_forms(j.d_plus(), &qp).unwrap();
        let t3 = theorem3_check(&j, &pr.basis, DEFAULT_EPS).unwrap();
        assert!(!t3.cond_square_holds);
        assert!(i1_p0 < i1_ols);
    }

    #[test]
    fn identity_conditions_hold_for_uniform() {
        let pr = problem(ModelSpec::cubic(), 9);
        let j = indicator_from_design(&Design::uniform_on(9, &[0, 2, 4, 6, 8], 2).unwrap());
        let t = theorem3_check(&j, &pr.basis, DEFAULT_EPS).unwrap();
        assert!(t.cond_inverse_holds && t.cond_square_holds);
        assert!(t.nu0.is_none() && t.improvement_verified.is_none());
    }

    #[test]
    fn identity_conditions_fail_for_nonuniform_quadratic() {
        let pr = problem(ModelSpec::quadratic(), 5);
        let j = indicator_from_design(&Design::new(vec![3, 1, 1, 1, 1]).unwrap());
        let t = theorem3_check(&j, &pr.basis, DEFAULT_EPS).unwrap();
        assert!(!t.cond_inverse_holds && !t.cond_square_holds);
        let nu0 = t.nu0.unwrap();
        assert!(nu0 > 0.0 && nu0 < 1.0);
        assert_eq!(t.improvement_verified, Some(true));
        assert_eq!(t.nu0_by_eps.len(), 3);
        let nu = (1.0 + nu0) / 2.0;
        let p0 = p0_matrix(&j);
        let pe = p_eps(&p0, DEFAULT_EPS).unwrap();
        let at_p = imspe_nu(&j, &pr.basis, &pe, nu).unwrap().inu;
        let at_i = imspe_nu_identity(&j, &pr.basis, nu).unwrap().inu;
        assert!(at_p < at_i);
    }

    #[test]
    fn block_diagonal_case_satisfies_conditions() {
        // separate straight lines on each half of the grid
        let model = ModelSpec::custom("two-piece linear", 4, |x| {
            let t = x[0];
            if t < 0.0 {
                vec![1.0, t, 0.0, 0.0]
            } else {
                vec![0.0, 0.0, 1.0, t]
            }
        })
        .unwrap();
        let pr = problem(model, 10);
        let counts = vec![2, 0, 2, 0, 2, 3, 0, 3, 0, 3];
        let d = Design::new(counts).unwrap();
        assert!(!d.is_uniform_on_support());
        let j = indicator_from_design(&d);
        let t = theorem3_check(&j, &pr.basis, DEFAULT_EPS).unwrap();
        assert!(t.cond_inverse_holds && t.cond_square_holds, "{t:?}");

        // the two matrix identities themselves
        let qp = j.q_plus(&pr.basis);
        let g = qp.transpose() * &qp;
        let eig = g.clone().symmetric_eigen();
        let g_inv_half = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
            * eig.eigenvectors.transpose();
        let a = &qp * g_inv_half;
        let dp = j.d_plus();
        let dinv = DMatrix::from_diagonal(&dp.diagonal().map(|v| 1.0 / v));
        let lhs = a.transpose() * &dinv * &a;
        let ada_inv = (a.transpose() * dp * &a).try_inverse().unwrap();
        assert!(linalg::max_abs_diff(&lhs, &ada_inv) < 1e-10);
        let sq = &ada_inv * a.transpose() * dp * dp * &a * &ada_inv;
        assert!(linalg::max_abs_diff(&sq, &DMatrix::identity(4, 4)) < 1e-10);
    }

    #[test]
    fn oracle_matches_closed_form() {
        let mut rng = seeded(24);
        for trial in 0..40 {
            let big_n = rng.random_range(4..=12);
            let (model, p) = match trial % 3 {
                0 => (ModelSpec::linear(), 2),
                1 => (ModelSpec::quadratic(), 3),
                _ => (ModelSpec::cubic(), 4),
            };
            let pr = problem(model, big_n);
            let d = random_design(big_n, p, &mut rng);
            let j = indicator_from_design(&d);
            let pm = random_precision(d.n(), &mut rng);
            let eta2 = rng.random_range(0.1..3.0);
            let tau2 = rng.random_range(0.1..3.0);
            let nu = tau2 / (tau2 + eta2);
            let exact = brute_force_max_imspe(&j, &pr.basis, &pm, eta2, tau2, BruteForceMode::ExactEigen).unwrap();
            let closed = (tau2 + eta2) * imspe_nu(&j, &pr.basis, &pm, nu).unwrap().inu;
            assert!((exact - closed).abs() <= 1e-8 * closed, "{exact} vs {closed}");
            let rs = brute_force_max_imspe(
                &j,
                &pr.basis,
                &pm,
                eta2,
                tau2,
                BruteForceMode::RandomSearch { seed: trial, samples: 200 },
            )
            .unwrap();
            assert!(rs <= exact + 1e-12);
        }
    }

    #[test]
    fn oracle_without_contamination() {
        let pr = problem(ModelSpec::quadratic(), 6);
        let j = indicator_from_design(&Design::new(vec![2, 1, 0, 1, 1, 2]).unwrap());
        let p = PrecisionMatrix::identity(7);
        let v = brute_force_max_imspe(&j, &pr.basis, &p, 1.7, 0.0, BruteForceMode::ExactEigen).unwrap();
        let (i0, _) = imspe_components(&j, &pr.basis, &p).unwrap();
        assert!((v - 1.7 * i0).abs() < 1e-10);
    }

    #[test]
    fn contamination_psi_properties() {
        let pr = problem(ModelSpec::cubic(), 9);
        let beta = DVector::from_fn(5, |i, _| (i as f64 + 1.0).sin());
        let c = ContaminationSpec::new(2.0, beta).unwrap();
        let psi = c.psi(&pr.basis);
        assert!((psi.norm_squared() - 2.0).abs() < 1e-10);
        assert!((pr.f.matrix().transpose() * psi).amax() < 1e-10);
    }

    #[test]
    fn t_measures_zero_at_identity() {
        let pr = problem(ModelSpec::linear(), 5);
        let j = indicator_from_design(&Design::new(vec![2, 1, 0, 1, 1]).unwrap());
        let t = t_measures(&j, &pr.basis, &PrecisionMatrix::identity(5), 0.5).unwrap();
        assert_eq!((t.t1, t.t2, t.t3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn weighted_trace_matches_variance_term() {
        let pr = problem(ModelSpec::quadratic(), 7);
        let j = indicator_from_design(&Design::new(vec![1, 2, 0, 1, 0, 2, 1]).unwrap());
        let mut rng = seeded(25);
        let p = random_precision(7, &mut rng);
        let f = pr.f.matrix();
        let x = j.design_matrix(&pr.f);
        let phi = gls::LossFunctional::weighted_trace(f.transpose() * f).unwrap();
        let eta2 = 1.3;
        let ml = gls::max_loss(&x, &p, &phi, eta2).unwrap();
        let (i0, _) = imspe_components(&j, &pr.basis, &p).unwrap();
        assert!((ml - eta2 * i0).abs() < 1e-10 * ml);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn invariants_on_random_instances(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let big_n = rng.random_range(4..=10);
            let pr = problem(ModelSpec::quadratic(), big_n);
            let d = random_design(big_n, 3, &mut rng);
            let j = indicator_from_design(&d);
            let p = random_precision(d.n(), &mut rng);
            let (i0, i1) = imspe_components(&j, &pr.basis, &p).unwrap();
            let (o0, _) = imspe_components(&j, &pr.basis, &PrecisionMatrix::identity(d.n())).unwrap();
            let qp = j.q_plus(&pr.basis);
            let lb = linalg::eigenvalues_sym(&(qp.transpose() * &qp).try_inverse().unwrap()).max();
            prop_assert!(i1 >= 1.0 - 1e-12);
            prop_assert!(i0 > 0.0);
            prop_assert!(i0 >= o0 - 1e-10 * (1.0 + o0));
            prop_assert!(i1 >= lb - 1e-10 * (1.0 + lb));
            let l0 = LossBreakdown::new(i0, i1, 0.0).inu;
            let l1 = LossBreakdown::new(i0, i1, 1.0).inu;
            for nu in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let v = imspe_nu(&j, &pr.basis, &p, nu).unwrap().inu;
                prop_assert!((v - ((1.0 - nu) * l0 + nu * l1)).abs() <= 1e-14 * v.max(1.0));
            }
        }
    }
}
