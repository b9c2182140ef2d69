//! Minimax designs: particle swarm search over softmax-encoded weights,
//! largest-remainder rounding, an exchange polish, and the inner minimax
//! precision on the final design.

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::PrecisionMatrix;
use crate::imspe::{check_nu, t_from, LossBreakdown, TMeasures};
use crate::linalg;
use crate::linmodel::{indicator_from_design, Design, DesignSpace, ModelSpec, OrthoBasis, Problem};
use crate::precopt::{minimize_precision, PrecOptConfig, POLISH_EPS_GRID};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingRule {
    /// Floors of `n xi` plus one for the largest remainders, ties to the lower index.
    LargestRemainder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PSOConfig {
    pub swarm_size: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub seed: u64,
    pub rounding: RoundingRule,
    /// Componentwise bound on particle velocity.
    pub max_velocity: f64,
    /// Number of distinct swarm-best designs handed to the exchange polish.
    pub polish_starts: usize,
}

impl Default for PSOConfig {
    fn default() -> Self {
        Self {
            swarm_size: 40,
            iterations: 200,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            seed: 0,
            rounding: RoundingRule::LargestRemainder,
            max_velocity: 4.0,
            polish_starts: 8,
        }
    }
}

impl PSOConfig {
    pub fn validate(&self) -> Result<()> {
        if self.swarm_size < 2 {
            return Err(Error::InvalidInput("swarm_size must be >= 2".into()));
        }
        if !(self.inertia > 0.0 && self.cognitive > 0.0 && self.social > 0.0 && self.max_velocity > 0.0) {
            return Err(Error::InvalidInput("PSO coefficients must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOptResult {
    pub design: Design,
    #[serde(rename = "P_nu")]
    pub p_nu: PrecisionMatrix,
    pub breakdown: LossBreakdown,
    pub identity_breakdown: LossBreakdown,
    pub is_identity: bool,
    pub t: TMeasures,
    /// Swarm-best fitness after each iteration.
    pub history: Vec<f64>,
}

/// Largest-remainder apportionment of `n xi`.
pub fn round_design(xi: &[f64], n: usize) -> Result<Design> {
    if xi.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("design weights must be nonnegative".into()));
    }
    let total: f64 = xi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("design weights sum to {total}, not 1")));
    }
    let scaled: Vec<f64> = xi.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..xi.len()).collect();
    // remainders compared on a 1e-12 grid so that float noise does not break ties
    let key = |i: usize| ((scaled[i] - scaled[i].floor()) * 1e12).round() as i64;
    order.sort_by(|&a, &b| key(b).cmp(&key(a)).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Design::new(counts)
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `(I0, I1)` for precisions whose action on `JQ` scales the rows of support
/// point `i` by `w_i`. This covers `I_n` (`w = 1`) and every `P_eps`.
fn weighted_components(q: &DMatrix<f64>, counts: &[usize], w: &[f64]) -> Option<(f64, f64)> {
    let p = q.ncols();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DMatrix::<f64>::zeros(p, p);
    let mut c = DMatrix::<f64>::zeros(p, p);
    for (i, &k) in counts.iter().enumerate() {
        if k == 0 {
            continue;
        }
        let k = k as f64;
        let row = q.row(i);
        let outer = row.transpose() * row;
        a += &outer * (k * w[i]);
        b += &outer * (k * w[i] * w[i]);
        c += &outer * (k * k * w[i] * w[i]);
    }
    let chol = linalg::symmetrize(&a).cholesky()?;
    let ai = chol.inverse();
    if ai.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let i0 = (&ai * &b * &ai).trace();
    let i1 = linalg::eigenvalues_sym(&(&ai * c * &ai)).max();
    (i0.is_finite() && i1.is_finite() && i0 > 0.0).then_some((i0, i1))
}

/// Cheap fitness: the better of `I_nu(xi, I_n)` and `I_nu(xi, P_eps)` over
/// the polish grid. Infeasible designs get `+inf`.
pub fn screening_fitness(q: &DMatrix<f64>, counts: &[usize], nu: f64) -> f64 {
    let p = q.ncols();
    if counts.iter().filter(|&&c| c > 0).count() < p {
        return f64::INFINITY;
    }
    let ones = vec![1.0; counts.len()];
    let Some((i0, i1)) = weighted_components(q, counts, &ones) else {
        return f64::INFINITY;
    };
    let mut best = (1.0 - nu) * i0 + nu * i1;
    if counts.iter().any(|&c| c > 1) {
        let inv_sum: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| 1.0 / c as f64).sum();
        let alpha = counts.iter().sum::<usize>() as f64 / inv_sum;
        for eps in POLISH_EPS_GRID {
            let w: Vec<f64> = counts
                .iter()
                .map(|&c| if c > 0 { alpha / c as f64 + eps } else { 0.0 })
                .collect();
            if let Some((e0, e1)) = weighted_components(q, counts, &w) {
                best = best.min((1.0 - nu) * e0 + nu * e1);
            }
        }
    }
    best
}

/// First-improvement search over single-observation moves.
fn exchange_polish(q: &DMatrix<f64>, mut counts: Vec<usize>, nu: f64) -> (Vec<usize>, f64) {
    let big_n = counts.len();
    let mut f = screening_fitness(q, &counts, nu);
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..big_n {
            if counts[i] == 0 {
                continue;
            }
            for j in 0..big_n {
                if i == j {
                    continue;
                }
                counts[i] -= 1;
                counts[j] += 1;
                let g = screening_fitness(q, &counts, nu);
                if g < f - 1e-12 * (1.0 + f.abs()) {
                    f = g;
                    improved = true;
                } else {
                    counts[i] += 1;
                    counts[j] -= 1;
                }
                if counts[i] == 0 {
                    break;
                }
            }
        }
    }
    (counts, f)
}

/// Index set of `m` grid points nearest to the given targets.
fn nearest_indices(space: &DesignSpace, targets: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = targets
        .iter()
        .map(|&t| {
            (0..space.len())
                .min_by(|&a, &b| {
                    (space.point(a)[0] - t).abs().total_cmp(&(space.point(b)[0] - t).abs())
                })
                .unwrap_or(0)
        })
        .collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Softmax logits for the seeded particles: uniform on all points, uniform on
/// `p + 1` equispaced points, and uniform near the Chebyshev-Lobatto nodes.
fn seed_logits(space: &DesignSpace, p: usize) -> Vec<Vec<f64>> {
    let big_n = space.len();
    let mut seeds = vec![vec![0.0; big_n]];
    if space.dim() != 1 {
        return seeds;
    }
    let lo = space.points().iter().map(|x| x[0]).fold(f64::INFINITY, f64::min);
    let hi = space.points().iter().map(|x| x[0]).fold(f64::NEG_INFINITY, f64::max);
    let mid = (lo + hi) / 2.0;
    let half = (hi - lo) / 2.0;
    let equi: Vec<f64> = (0..=p).map(|k| lo + (hi - lo) * k as f64 / p as f64).collect();
    let cheb: Vec<f64> = if p > 1 {
        (0..p)
            .map(|k| mid - half * (std::f64::consts::PI * k as f64 / (p - 1) as f64).cos())
            .collect()
    } else {
        vec![mid]
    };
    for targets in [equi, cheb] {
        let support = nearest_indices(space, &targets);
        let mut logits = vec![-30.0; big_n];
        for i in support {
            logits[i] = 0.0;
        }
        seeds.push(logits);
    }
    seeds
}

/// Designs that the final answer must not lose to.
pub fn seed_designs(space: &DesignSpace, p: usize, n: usize) -> Result<Vec<Design>> {
    seed_logits(space, p)
        .iter()
        .map(|x| round_design(&softmax(x), n))
        .collect()
}

fn evaluate_final(
    basis: &OrthoBasis,
    design: &Design,
    nu: f64,
    prec: &PrecOptConfig,
) -> Result<(PrecisionMatrix, LossBreakdown, LossBreakdown, bool)> {
    let j = indicator_from_design(design);
    let r = minimize_precision(&j, basis, nu, prec)?;
    Ok((r.p_nu, r.breakdown, r.identity_breakdown, r.is_identity))
}

/// Joint minimization over designs with `n` observations and precisions.
pub fn pso_minimize(
    space: &DesignSpace,
    model: &ModelSpec,
    nu: f64,
    n: usize,
    pso: &PSOConfig,
    prec: &PrecOptConfig,
) -> Result<DesignOptResult> {
    check_nu(nu)?;
    pso.validate()?;
    prec.validate()?;
    let problem = Problem::new(space.clone(), model.clone())?;
    let p = model.p();
    if n < p {
        return Err(Error::InvalidInput(format!("n = {n} is smaller than p = {p}")));
    }
    let q = problem.basis.q().clone();
    let big_n = space.len();
    let mut rng = rng_for(pso.seed, "pso-init", 0);

    let fitness_of = |x: &[f64]| -> (Vec<usize>, f64) {
        match round_design(&softmax(x), n) {
            Ok(d) => {
                let f = screening_fitness(&q, d.counts(), nu);
                (d.counts().to_vec(), f)
            }
            Err(_) => (vec![0; big_n], f64::INFINITY),
        }
    };

    let seeds = seed_logits(space, p);
    let mut pos: Vec<Vec<f64>> = (0..pso.swarm_size)
        .map(|k| {
            if k < seeds.len() {
                seeds[k].clone()
            } else {
                (0..big_n).map(|_| rng.random_range(-2.0..2.0)).collect()
            }
        })
        .collect();
    let mut vel: Vec<Vec<f64>> = (0..pso.swarm_size)
        .map(|_| (0..big_n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let first: Vec<(Vec<usize>, f64)> = pos.par_iter().map(|x| fitness_of(x)).collect();
    let mut pbest_x = pos.clone();
    let mut pbest: Vec<(Vec<usize>, f64)> = first;
    let mut g = (0..pso.swarm_size)
        .min_by(|&a, &b| pbest[a].1.total_cmp(&pbest[b].1).then(a.cmp(&b)))
        .unwrap_or(0);
    let mut history = Vec::with_capacity(pso.iterations);

    for it in 0..pso.iterations {
        let mut step_rng = rng_for(pso.seed, "pso-step", it as u64);
        let gx = pbest_x[g].clone();
        for k in 0..pso.swarm_size {
            for d in 0..big_n {
                let r1: f64 = step_rng.random();
                let r2: f64 = step_rng.random();
                let v = pso.inertia * vel[k][d]
                    + pso.cognitive * r1 * (pbest_x[k][d] - pos[k][d])
                    + pso.social * r2 * (gx[d] - pos[k][d]);
                vel[k][d] = v.clamp(-pso.max_velocity, pso.max_velocity);
                pos[k][d] += vel[k][d];
            }
        }
        let fits: Vec<(Vec<usize>, f64)> = pos.par_iter().map(|x| fitness_of(x)).collect();
        for (k, fit) in fits.into_iter().enumerate() {
            if fit.1 < pbest[k].1 {
                pbest[k] = fit;
                pbest_x[k] = pos[k].clone();
            }
        }
        g = (0..pso.swarm_size)
            .min_by(|&a, &b| pbest[a].1.total_cmp(&pbest[b].1).then(a.cmp(&b)))
            .unwrap_or(0);
        history.push(pbest[g].1);
    }

    // distinct personal-best designs, best first
    let mut ranked: Vec<(Vec<usize>, f64)> = pbest.iter().filter(|(_, f)| f.is_finite()).cloned().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked.dedup_by(|a, b| a.0 == b.0);
    ranked.truncate(pso.polish_starts.max(1));
    if ranked.is_empty() {
        return Err(Error::Optimization("no feasible design found by the swarm".into()));
    }
    let polished: Vec<(Vec<usize>, f64)> = ranked
        .par_iter()
        .map(|(c, _)| exchange_polish(&q, c.clone(), nu))
        .collect();
    let (best_counts, _) = polished
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("nonempty");

    let mut candidates = vec![Design::new(best_counts)?];
    for d in seed_designs(space, p, n)? {
        if d.support_size() >= p && !candidates.contains(&d) {
            candidates.push(d);
        }
    }
    let evaluated: Vec<Result<_>> = candidates
        .par_iter()
        .map(|d| evaluate_final(&problem.basis, d, nu, prec))
        .collect();
    let mut best: Option<(usize, (PrecisionMatrix, LossBreakdown, LossBreakdown, bool))> = None;
    for (k, r) in evaluated.into_iter().enumerate() {
        let Ok(r) = r else { continue };
        if best.as_ref().is_none_or(|(_, b)| r.1.inu < b.1.inu) {
            best = Some((k, r));
        }
    }
    let (k, (p_nu, breakdown, identity_breakdown, is_identity)) =
        best.ok_or_else(|| Error::Optimization("inner precision optimization failed".into()))?;
    Ok(DesignOptResult {
        design: candidates[k].clone(),
        p_nu,
        breakdown,
        identity_breakdown,
        is_identity,
        t: t_from(&identity_breakdown, &breakdown),
        history,
    })
}

/// Design mass within `radius` of each center.
pub fn cluster_summary(space: &DesignSpace, design: &Design, centers: &[Vec<f64>], radius: f64) -> Result<Vec<f64>> {
    if design.big_n() != space.len() {
        return Err(Error::Dimension(format!(
            "design has {} points but the space has {}",
            design.big_n(),
            space.len()
        )));
    }
    let xi = design.xi();
    centers
        .iter()
        .map(|c| {
            if c.len() != space.dim() {
                return Err(Error::Dimension("center dimension differs from the space".into()));
            }
            Ok(space
                .points()
                .iter()
                .zip(&xi)
                .filter(|(x, _)| {
                    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= radius
                })
                .map(|(_, w)| w)
                .sum())
        })
        .collect()
}
