//! Minimax precision matrices: minimize `I_nu(xi, L L')` over lower
//! triangular `L` with `||vec L||^2 = n`.
//!
//! `I_nu(LL')` is invariant to scaling `L`, so the gradient is orthogonal to
//! `l = vec L`; steps are taken freely and `l` is pulled back to the sphere
//! after each accepted step.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::PrecisionMatrix;
use crate::imspe::{self, check_nu, group_rows, LossBreakdown};
use crate::linalg::{self, lower_to_vec, symmetrize, vec_to_lower};
use crate::linmodel::{IndicatorStructure, OrthoBasis};
use crate::rng::rng_for;

/// Epsilons tried by [`polish_with_p_eps`].
pub const POLISH_EPS_GRID: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecOptConfig {
    pub max_iterations: usize,
    pub restarts: usize,
    /// Relative change in `I_nu` treated as convergence.
    pub tolerance: f64,
    /// `P^nu` is declared `I_n` when it improves on `I_n` by less than this
    /// fraction of `I_nu(I_n)`.
    pub identity_tolerance: f64,
    pub seed: u64,
    /// L-BFGS memory.
    pub memory: usize,
    /// Scale of the random perturbations used by restarts beyond the first two.
    pub perturbation: f64,
}

impl Default for PrecOptConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            restarts: 4,
            tolerance: 1e-12,
            identity_tolerance: 1e-6,
            seed: 0,
            memory: 8,
            perturbation: 0.3,
        }
    }
}

impl PrecOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) || !(self.identity_tolerance > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.memory == 0 {
            return Err(Error::InvalidInput("L-BFGS memory must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecOptResult {
    #[serde(rename = "P_nu")]
    pub p_nu: PrecisionMatrix,
    pub breakdown: LossBreakdown,
    pub identity_breakdown: LossBreakdown,
    pub is_identity: bool,
    pub iterations: usize,
    pub restarts_used: usize,
    pub identity_tolerance: f64,
}

/// Objective and analytic gradient of `I_nu(P)` for a fixed design.
#[derive(Debug, Clone)]
pub struct PrecisionObjective {
    z: DMatrix<f64>,
    obs_point: Vec<usize>,
    big_n: usize,
    nu: f64,
}

pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// `G` with `dI_nu = tr(G dP)`.
    pub grad_p: DMatrix<f64>,
}

impl PrecisionObjective {
    pub fn new(j: &IndicatorStructure, basis: &OrthoBasis, nu: f64) -> Result<Self> {
        check_nu(nu)?;
        Ok(Self {
            z: j.jq(basis),
            obs_point: j.obs_point().to_vec(),
            big_n: j.big_n(),
            nu,
        })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    /// `K x` with `K = J J'`: sums within replicate groups.
    fn k_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut sums = vec![0.0; self.big_n];
        for (r, &pt) in self.obs_point.iter().enumerate() {
            sums[pt] += x[r];
        }
        DVector::from_iterator(x.len(), self.obs_point.iter().map(|&pt| sums[pt]))
    }

    pub fn value(&self, p: &DMatrix<f64>) -> Result<LossBreakdown> {
        self.eval(p, false).map(|e| e.breakdown)
    }

    pub fn eval(&self, p: &DMatrix<f64>, with_grad: bool) -> Result<Evaluation> {
        let nu = self.nu;
        let z = &self.z;
        let w = p * z;
        let a = symmetrize(&(z.transpose() * &w));
        let ai = linalg::spd_inverse(&a, "Q'UQ")?;
        let b = w.transpose() * &w;
        let s = &ai * &ai;
        let i0 = (&b * &s).trace();
        let g = group_rows(&w, &self.obs_point, self.big_n);
        let c = g.transpose() * g;
        let m = symmetrize(&(&ai * c * &ai));
        let (lam, v) = linalg::max_eigen(&m);
        let breakdown = LossBreakdown::new(i0, lam, nu);
        let n = p.nrows();
        if !with_grad {
            return Ok(Evaluation {
                breakdown,
                grad_p: DMatrix::zeros(0, 0),
            });
        }
        let mut grad = DMatrix::zeros(n, n);
        if nu < 1.0 {
            let zsz = z * &s * z.transpose();
            let e = &s * &b * &ai + &ai * &b * &s;
            let g0 = p * &zsz + &zsz * p - z * e * z.transpose();
            grad += g0 * (1.0 - nu);
        }
        if nu > 0.0 {
            let u = &ai * &v;
            let av = z * &u;
            let zv = z * &v;
            let kpa = self.k_apply(&(p * &av));
            let g1 = &kpa * av.transpose() + &av * kpa.transpose()
                - (&zv * av.transpose() + &av * zv.transpose()) * lam;
            grad += g1 * nu;
        }
        Ok(Evaluation {
            breakdown,
            grad_p: symmetrize(&grad),
        })
    }

    /// Value and gradient in `l`, the row-major lower triangle of `L`.
    pub fn value_grad_l(&self, l: &[f64]) -> Result<(f64, Vec<f64>)> {
        let lm = vec_to_lower(l, self.n());
        let p = &lm * lm.transpose();
        let e = self.eval(&p, true)?;
        let gl = (e.grad_p * &lm) * 2.0;
        Ok((e.breakdown.inu, lower_to_vec(&gl)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn retract(x: &mut [f64], radius: f64) {
    let norm = dot(x, x).sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v *= radius / norm);
    }
}

struct Descent {
    l: Vec<f64>,
    value: f64,
    iterations: usize,
}

/// L-BFGS with Armijo backtracking; infeasible trial points count as `+inf`.
fn lbfgs(obj: &PrecisionObjective, start: Vec<f64>, cfg: &PrecOptConfig) -> Result<Descent> {
    let radius = (obj.n() as f64).sqrt();
    let mut x = start;
    retract(&mut x, radius);
    let (mut f, mut g) = obj.value_grad_l(&x)?;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let mut stall = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= 1e-14 * (1.0 + f.abs()) {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            q.iter_mut().zip(&y_hist[i]).for_each(|(a, b)| *a -= alpha[i] * b);
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / gnorm.max(1e-300)
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            q.iter_mut().zip(&s_hist[i]).for_each(|(a, b)| *a += (alpha[i] - beta) * b);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -v / gnorm).collect();
            slope = -gnorm;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            retract(&mut trial, radius);
            if let Ok((ft, gt)) = obj.value_grad_l(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if s_hist.is_empty() {
                break;
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        let change = f - fnew;
        x = xn;
        f = fnew;
        g = gn;
        if change <= cfg.tolerance * (1.0 + f.abs()) {
            stall += 1;
            if stall >= 3 {
                break;
            }
        } else {
            stall = 0;
        }
    }
    Ok(Descent {
        l: x,
        value: f,
        iterations,
    })
}

fn start_point(k: usize, j: &IndicatorStructure, cfg: &PrecOptConfig) -> Option<Vec<f64>> {
    let n = j.n();
    match k {
        0 => Some(lower_to_vec(&DMatrix::identity(n, n))),
        1 => {
            let pe = imspe::p_eps(&imspe::p0_matrix(j), 1e-2).ok()?;
            let l = pe.matrix().clone().cholesky()?.l();
            Some(lower_to_vec(&l))
        }
        _ => {
            let mut rng = rng_for(cfg.seed, "precopt-restart", k as u64);
            let mut l = DMatrix::identity(n, n);
            for r in 0..n {
                for c in 0..=r {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    l[(r, c)] += cfg.perturbation * e;
                }
            }
            Some(lower_to_vec(&l))
        }
    }
}

fn finish(
    obj: &PrecisionObjective,
    candidate: Option<(DMatrix<f64>, LossBreakdown)>,
    at_identity: LossBreakdown,
    iterations: usize,
    restarts_used: usize,
    identity_tolerance: f64,
) -> Result<PrecOptResult> {
    let n = obj.n();
    let threshold = at_identity.inu - identity_tolerance * at_identity.inu.abs();
    let (p_nu, breakdown, is_identity) = match candidate.filter(|(_, bd)| bd.inu < threshold) {
        Some((p, _)) => {
            let pm = PrecisionMatrix::normalized(p)?;
            let bd = obj.value(pm.matrix())?;
            (pm, bd, false)
        }
        None => (PrecisionMatrix::identity(n), at_identity, true),
    };
    Ok(PrecOptResult {
        p_nu,
        breakdown,
        identity_breakdown: at_identity,
        is_identity,
        iterations,
        restarts_used,
        identity_tolerance,
    })
}

/// Multi-start minimization of `I_nu(xi, P)`. Restarts begin at `I_n`, at
/// `chol(P_eps)` with `eps = 1e-2`, and at random perturbations of `I_n`;
/// the `P_eps` family is then tried as extra candidates.
pub fn minimize_precision(
    j: &IndicatorStructure,
    basis: &OrthoBasis,
    nu: f64,
    config: &PrecOptConfig,
) -> Result<PrecOptResult> {
    config.validate()?;
    let obj = PrecisionObjective::new(j, basis, nu)?;
    let n = j.n();
    let at_identity = obj.value(&DMatrix::identity(n, n))?;
    let runs: Vec<Option<(Descent, usize)>> = (0..config.restarts)
        .into_par_iter()
        .map(|k| {
            let start = start_point(k, j, config)?;
            lbfgs(&obj, start, config).ok().map(|d| (d, k))
        })
        .collect();
    let iterations: usize = runs.iter().flatten().map(|(d, _)| d.iterations).sum();
    let restarts_used = runs.iter().flatten().count();
    let best = runs
        .into_iter()
        .flatten()
        .filter(|(d, _)| d.value.is_finite())
        .min_by(|(a, ka), (b, kb)| a.value.total_cmp(&b.value).then(ka.cmp(kb)))
        .map(|(d, _)| d);
    let candidate = match best {
        Some(d) => {
            let lm = vec_to_lower(&d.l, n);
            let p = &lm * lm.transpose();
            let bd = obj.value(&p)?;
            Some((p, bd))
        }
        None => None,
    };
    let result = finish(&obj, candidate, at_identity, iterations, restarts_used, config.identity_tolerance)?;
    polish_with_p_eps(j, basis, nu, result)
}

/// Tries `P_eps` over [`POLISH_EPS_GRID`] and keeps the best of those and the input.
pub fn polish_with_p_eps(
    j: &IndicatorStructure,
    basis: &OrthoBasis,
    nu: f64,
    result: PrecOptResult,
) -> Result<PrecOptResult> {
    let obj = PrecisionObjective::new(j, basis, nu)?;
    let p0 = imspe::p0_matrix(j);
    let mut best: Option<(DMatrix<f64>, LossBreakdown)> = None;
    for eps in POLISH_EPS_GRID {
        let pe = imspe::p_eps(&p0, eps)?;
        if let Ok(bd) = obj.value(pe.matrix()) {
            if best.as_ref().is_none_or(|(_, b)| bd.inu < b.inu) {
                best = Some((pe.into_matrix(), bd));
            }
        }
    }
    match best {
        Some((p, bd)) if bd.inu < result.breakdown.inu => finish(
            &obj,
            Some((p, bd)),
            result.identity_breakdown,
            result.iterations,
            result.restarts_used,
            result.identity_tolerance,
        ),
        _ => Ok(result),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{indicator_from_design, Design, ModelSpec, Problem};
    use crate::rng::seeded;
    use rand::Rng as _;

    fn setup(model: ModelSpec, counts: Vec<usize>) -> (Problem, IndicatorStructure) {
        let pr = Problem::equispaced(model, counts.len()).unwrap();
        let j = indicator_from_design(&Design::new(counts).unwrap());
        (pr, j)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (pr, j) = setup(ModelSpec::quadratic(), vec![2, 1, 0, 1, 3]);
        let n = j.n();
        let mut rng = seeded(31);
        let mut l = DMatrix::<f64>::zeros(n, n);
        for r in 0..n {
            for c in 0..=r {
                l[(r, c)] = StandardNormal.sample(&mut rng);
            }
            l[(r, r)] += 2.0;
        }
        let lv = lower_to_vec(&l);
        for nu in [0.0, 0.5, 1.0] {
            let obj = PrecisionObjective::new(&j, &pr.basis, nu).unwrap();
            let (_, g) = obj.value_grad_l(&lv).unwrap();
            for idx in [0, 3, 7, lv.len() - 1] {
                let h = 1e-6;
                let mut up = lv.clone();
                up[idx] += h;
                let mut dn = lv.clone();
                dn[idx] -= h;
                let fd = (obj.value_grad_l(&up).unwrap().0 - obj.value_grad_l(&dn).unwrap().0) / (2.0 * h);
                assert!((fd - g[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "nu {nu} idx {idx}: {fd} vs {}", g[idx]);
            }
            // scale invariance: gradient orthogonal to l
            assert!(dot(&g, &lv).abs() < 1e-8 * dot(&g, &g).sqrt() * dot(&lv, &lv).sqrt() + 1e-12);
        }
    }

    #[test]
    fn uniform_design_is_identity() {
        let mut rng = seeded(32);
        for model in [ModelSpec::linear(), ModelSpec::quadratic()] {
            let (pr, j) = setup(model, vec![2, 0, 2, 0, 2, 2, 0]);
            let nu = rng.random::<f64>();
            let r = minimize_precision(&j, &pr.basis, nu, &PrecOptConfig::default()).unwrap();
            assert!(r.is_identity);
            assert_eq!(r.p_nu, PrecisionMatrix::identity(j.n()));
        }
    }

    #[test]
    fn nu_zero_is_identity() {
        let (pr, j) = setup(ModelSpec::quadratic(), vec![3, 1, 1, 1, 1]);
        let r = minimize_precision(&j, &pr.basis, 0.0, &PrecOptConfig::default()).unwrap();
        assert!(r.is_identity);
    }

    #[test]
    fn nonuniform_quadratic_improves() {
        let (pr, j) = setup(ModelSpec::quadratic(), vec![3, 1, 1, 1, 1]);
        let t3 = imspe::theorem3_check(&j, &pr.basis, imspe::DEFAULT_EPS).unwrap();
        assert!(t3.nu0.unwrap() < 1.0);
        let cfg = PrecOptConfig::default();
        let r = minimize_precision(&j, &pr.basis, 1.0, &cfg).unwrap();
        assert!(!r.is_identity);
        assert!(r.breakdown.inu < r.identity_breakdown.inu);
        let t = imspe::t_measures(&j, &pr.basis, &r.p_nu, 1.0).unwrap();
        assert!(t.t1 > 0.0);
        assert!((r.p_nu.matrix().trace() - j.n() as f64).abs() < 1e-8);
        // dominance over the P_eps family
        let p0 = imspe::p0_matrix(&j);
        for eps in POLISH_EPS_GRID {
            let pe = imspe::p_eps(&p0, eps).unwrap();
            let v = imspe::imspe_nu(&j, &pr.basis, &pe, 1.0).unwrap().inu;
            assert!(r.breakdown.inu <= v + 1e-9);
        }
        // polishing again changes nothing
        let again = polish_with_p_eps(&j, &pr.basis, 1.0, r.clone()).unwrap();
        assert!((again.breakdown.inu - r.breakdown.inu).abs() < 1e-12);
        // determinism
        let r2 = minimize_precision(&j, &pr.basis, 1.0, &cfg).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn polish_keeps_identity_for_uniform() {
        let (pr, j) = setup(ModelSpec::linear(), vec![1, 1, 1, 1]);
        let r = minimize_precision(&j, &pr.basis, 0.7, &PrecOptConfig::default()).unwrap();
        let p = polish_with_p_eps(&j, &pr.basis, 0.7, r.clone()).unwrap();
        assert_eq!(r, p);
        assert!(p.is_identity);
    }

    #[test]
    fn infeasible_design_reports_error() {
        let (pr, j) = setup(ModelSpec::quadratic(), vec![2, 0, 0, 3]);
        assert!(minimize_precision(&j, &pr.basis, 0.5, &PrecOptConfig::default()).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let (pr, j) = setup(ModelSpec::linear(), vec![1, 1, 1]);
        let cfg = PrecOptConfig {
            restarts: 0,
            ..PrecOptConfig::default()
        };
        assert!(minimize_precision(&j, &pr.basis, 0.5, &cfg).is_err());
    }
}
