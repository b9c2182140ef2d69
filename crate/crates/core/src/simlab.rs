//! Simulation studies over random designs: multinomial draws from random
//! probability vectors, optionally symmetrized, each followed by the inner
//! precision optimization and the T-measures.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imspe::t_from;
use crate::linmodel::{indicator_from_design, Design, ModelSpec, Problem};
use crate::precopt::{minimize_precision, PrecOptConfig};
use crate::rng::{rng_for, Rng};

/// Retries allowed when a draw has fewer than `p` support points.
pub const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimplexSampler {
    /// iid Uniform(0, 1) weights divided by their sum.
    #[default]
    NormalizedUniform,
    /// Dirichlet with all concentrations 1.
    FlatDirichlet,
}

pub fn random_simplex(big_n: usize, sampler: SimplexSampler, rng: &mut Rng) -> Vec<f64> {
    if big_n == 0 {
        return Vec::new();
    }
    let raw: Vec<f64> = match sampler {
        SimplexSampler::NormalizedUniform => (0..big_n).map(|_| 1.0 - rng.random::<f64>()).collect(),
        SimplexSampler::FlatDirichlet => {
            let g = Gamma::new(1.0, 1.0).expect("valid gamma parameters");
            (0..big_n).map(|_| g.sample(rng)).collect()
        }
    };
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn multinomial_once(p_vec: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut counts = vec![0; p_vec.len()];
    // fallback when rounding leaves `u` beyond the accumulated total
    let last = p_vec.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = last;
        for (i, &w) in p_vec.iter().enumerate() {
            acc += w;
            if w > 0.0 && u < acc {
                pick = i;
                break;
            }
        }
        counts[pick] += 1;
    }
    counts
}

/// A multinomial`(n; p_vec)` design with at least `p` support points.
/// Returns the design and the number of rejected draws.
pub fn multinomial_design(p_vec: &[f64], n: usize, p: usize, rng: &mut Rng) -> Result<(Design, usize)> {
    if p_vec.is_empty() || p_vec.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidInput("probability vector must be nonnegative and nonempty".into()));
    }
    let s: f64 = p_vec.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("probabilities sum to {s}, not 1")));
    }
    for redraws in 0..MAX_REDRAWS {
        let counts = multinomial_once(p_vec, n, rng);
        if counts.iter().filter(|&&c| c > 0).count() >= p {
            return Ok((Design::new(counts)?, redraws));
        }
    }
    Err(Error::Optimization(format!(
        "no design with at least {p} support points in {MAX_REDRAWS} draws"
    )))
}

/// Averages the counts with their reflection and rounds pairwise so that
/// the result is exactly symmetric with the same total.
///
/// A mirror pair with odd total contributes half an observation per side;
/// half of those pairs (outermost first) are rounded up and any leftover
/// observation goes to the center point.
pub fn symmetrize(design: &Design) -> Result<Design> {
    let c = design.counts();
    let big_n = c.len();
    let mut out = vec![0usize; big_n];
    let mut odd_pairs = Vec::new();
    for i in 0..big_n / 2 {
        let t = c[i] + c[big_n - 1 - i];
        out[i] = t / 2;
        out[big_n - 1 - i] = t / 2;
        if t % 2 == 1 {
            odd_pairs.push(i);
        }
    }
    let d = odd_pairs.len();
    for &i in odd_pairs.iter().take(d / 2) {
        out[i] += 1;
        out[big_n - 1 - i] += 1;
    }
    let leftover = d % 2;
    if big_n % 2 == 1 {
        out[big_n / 2] = c[big_n / 2] + leftover;
    } else if leftover == 1 {
        return Err(Error::InvalidInput(
            "an odd number of observations cannot be placed symmetrically on an even grid".into(),
        ));
    }
    Design::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    Multinomial,
    Symmetrized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: String,
    #[serde(rename = "N")]
    pub big_n: usize,
    /// Defaults to `5 p`.
    pub n: Option<usize>,
    pub nu: f64,
    pub runs: usize,
    pub seed: u64,
    pub design_mode: DesignMode,
    pub sampler: SimplexSampler,
    pub prec: PrecOptConfig,
}

impl SimConfig {
    pub fn new(model: &str, big_n: usize, nu: f64, design_mode: DesignMode) -> Self {
        Self {
            model: model.to_string(),
            big_n,
            n: None,
            nu,
            runs: 500,
            seed: 0,
            design_mode,
            sampler: SimplexSampler::default(),
            prec: PrecOptConfig::default(),
        }
    }

    pub fn n_for(&self, p: usize) -> usize {
        self.n.unwrap_or(5 * p)
    }
}

/// Mean and standard error `sd / sqrt(runs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn from_values(v: &[f64]) -> Self {
        let m = v.len() as f64;
        let mean = neumaier_sum(v.iter().copied()) / m;
        let var = if v.len() > 1 {
            neumaier_sum(v.iter().map(|x| (x - mean) * (x - mean))) / (m - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / m).sqrt(),
        }
    }
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub counts: Vec<usize>,
    pub inu_identity: f64,
    pub inu_p: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub is_identity: bool,
    pub uniform_support: bool,
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub runs: usize,
    pub n: usize,
    pub inu_identity: MeanSe,
    pub inu_p: MeanSe,
    pub t1: MeanSe,
    pub t2: MeanSe,
    pub t3: MeanSe,
    pub pct_identity: f64,
    /// Rejected draws per accepted design.
    pub redraw_rate: f64,
}

impl SimSummary {
    pub fn from_records(records: &[RunRecord], n: usize) -> Self {
        let col = |f: fn(&RunRecord) -> f64| MeanSe::from_values(&records.iter().map(f).collect::<Vec<_>>());
        let runs = records.len();
        Self {
            runs,
            n,
            inu_identity: col(|r| r.inu_identity),
            inu_p: col(|r| r.inu_p),
            t1: col(|r| r.t1),
            t2: col(|r| r.t2),
            t3: col(|r| r.t3),
            pct_identity: 100.0 * records.iter().filter(|r| r.is_identity).count() as f64 / runs as f64,
            redraw_rate: records.iter().map(|r| r.redraws).sum::<usize>() as f64 / runs as f64,
        }
    }
}

/// One design of a study: symmetrization can shrink the support, so the
/// whole draw is repeated until `q >= p`.
pub fn draw_design(config: &SimConfig, p: usize, rng: &mut Rng) -> Result<(Design, usize)> {
    let n = config.n_for(p);
    let mut rejected = 0;
    for _ in 0..MAX_REDRAWS {
        let pv = random_simplex(config.big_n, config.sampler, rng);
        let (d, r) = multinomial_design(&pv, n, p, rng)?;
        rejected += r;
        let d = match config.design_mode {
            DesignMode::Multinomial => d,
            DesignMode::Symmetrized => symmetrize(&d)?,
        };
        if d.support_size() >= p {
            return Ok((d, rejected));
        }
        rejected += 1;
    }
    Err(Error::Optimization(format!(
        "no admissible design in {MAX_REDRAWS} attempts"
    )))
}

pub fn run_one(config: &SimConfig, problem: &Problem, run: usize) -> Result<RunRecord> {
    let p = problem.model.p();
    // draws depend on the run index only, so studies at different nu share designs
    let mut rng = rng_for(config.seed, "simlab-design", run as u64);
    let (design, redraws) = draw_design(config, p, &mut rng)?;
    let j = indicator_from_design(&design);
    let prec = PrecOptConfig {
        seed: crate::rng::derive_seed(config.seed, "simlab-precopt", run as u64),
        ..config.prec.clone()
    };
    let r = minimize_precision(&j, &problem.basis, config.nu, &prec)?;
    let t = t_from(&r.identity_breakdown, &r.breakdown);
    Ok(RunRecord {
        counts: design.counts().to_vec(),
        inu_identity: r.identity_breakdown.inu,
        inu_p: r.breakdown.inu,
        t1: t.t1,
        t2: t.t2,
        t3: t.t3,
        is_identity: r.is_identity,
        uniform_support: design.is_uniform_on_support(),
        redraws,
    })
}

pub fn run_records(config: &SimConfig) -> Result<Vec<RunRecord>> {
    if config.runs < 2 {
        return Err(Error::InvalidInput("runs must be >= 2".into()));
    }
    crate::imspe::check_nu(config.nu)?;
    let model = ModelSpec::from_name(&config.model)?;
    let problem = Problem::equispaced(model, config.big_n)?;
    if config.design_mode == DesignMode::Symmetrized && !problem.space.is_symmetric_about_zero() {
        return Err(Error::InvalidInput("symmetrized designs need a space symmetric about 0".into()));
    }
    (0..config.runs)
        .into_par_iter()
        .map(|r| run_one(config, &problem, r).map_err(|e| Error::Optimization(format!("run {r}: {e}"))))
        .collect()
}

pub fn run_study(config: &SimConfig) -> Result<SimSummary> {
    let records = run_records(config)?;
    let p = ModelSpec::from_name(&config.model)?.p();
    Ok(SimSummary::from_records(&records, config.n_for(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn simplex_basics() {
        let mut rng = seeded(41);
        assert_eq!(random_simplex(1, SimplexSampler::NormalizedUniform, &mut rng), vec![1.0]);
        assert_eq!(random_simplex(1, SimplexSampler::FlatDirichlet, &mut rng), vec![1.0]);
        for sampler in [SimplexSampler::NormalizedUniform, SimplexSampler::FlatDirichlet] {
            let draws = 10_000;
            let mut all = vec![Vec::new(); 3];
            for _ in 0..draws {
                let v = random_simplex(3, sampler, &mut rng);
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(v.iter().all(|&w| w >= 0.0));
                for i in 0..3 {
                    all[i].push(v[i]);
                }
            }
            for col in &all {
                let ms = MeanSe::from_values(col);
                assert!((ms.mean - 1.0 / 3.0).abs() < 3.0 * ms.se, "{sampler:?} {ms:?}");
            }
        }
    }

    #[test]
    fn multinomial_moments() {
        let mut rng = seeded(42);
        let (d, _) = multinomial_design(&[1.0, 0.0, 0.0], 7, 1, &mut rng).unwrap();
        assert_eq!(d.counts(), &[7, 0, 0]);
        let pv = [0.2, 0.5, 0.3];
        let n = 10;
        let mut cols = vec![Vec::new(); 3];
        for _ in 0..10_000 {
            let (d, _) = multinomial_design(&pv, n, 1, &mut rng).unwrap();
            assert_eq!(d.n(), n);
            for (col, &c) in cols.iter_mut().zip(d.counts()) {
                col.push(c as f64);
            }
        }
        for i in 0..3 {
            let ms = MeanSe::from_values(&cols[i]);
            assert!((ms.mean - n as f64 * pv[i]).abs() < 3.0 * ms.se);
        }
        assert!(multinomial_design(&[1.0, 0.0, 0.0], 5, 2, &mut rng).is_err());
    }

    #[test]
    fn symmetrize_examples() {
        let d = Design::new(vec![2, 0, 0]).unwrap();
        assert_eq!(symmetrize(&d).unwrap().counts(), &[1, 0, 1]);
        let s = Design::new(vec![1, 3, 0, 3, 1]).unwrap();
        assert_eq!(symmetrize(&s).unwrap(), s);
        let d = Design::new(vec![1, 0, 0, 2, 0]).unwrap();
        let s = symmetrize(&d).unwrap();
        assert_eq!(s.counts(), &[0, 1, 1, 1, 0]);
        assert!(symmetrize(&Design::new(vec![1, 0, 0, 0]).unwrap()).is_err());
        assert_eq!(symmetrize(&Design::new(vec![2, 0, 0, 0]).unwrap()).unwrap().counts(), &[1, 0, 0, 1]);
    }

    proptest! {
        #[test]
        fn symmetrize_properties(counts in proptest::collection::vec(0usize..4, 1..12).prop_map(|mut c| { if c.len() % 2 == 0 { c.push(1); } c })) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let d = Design::new(counts).unwrap();
            let s = symmetrize(&d).unwrap();
            prop_assert_eq!(s.n(), d.n());
            let c = s.counts();
            for i in 0..c.len() {
                prop_assert_eq!(c[i], c[c.len() - 1 - i]);
            }
            prop_assert_eq!(symmetrize(&d.reflected()).unwrap(), s.clone());
            prop_assert_eq!(symmetrize(&s).unwrap(), s);
        }
    }

    #[test]
    fn small_study_is_deterministic() {
        let mut cfg = SimConfig::new("linear", 11, 1.0, DesignMode::Multinomial);
        cfg.runs = 6;
        cfg.seed = 3;
        cfg.prec.restarts = 2;
        let a = run_records(&cfg).unwrap();
        let b = run_records(&cfg).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!(r.t1 >= 0.0);
            if r.uniform_support {
                assert!(r.is_identity);
            }
        }
        let s = SimSummary::from_records(&a, 10);
        assert!(s.pct_identity >= 0.0 && s.pct_identity <= 100.0);
        // identical records give zero spread
        let twin = vec![a[0].clone(), a[0].clone()];
        let s = SimSummary::from_records(&twin, 10);
        assert_eq!(s.inu_identity.se, 0.0);
        cfg.runs = 1;
        assert!(run_study(&cfg).is_err());
    }
}
