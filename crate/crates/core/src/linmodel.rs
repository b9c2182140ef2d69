//! Finite design spaces, regressor maps, designs and the orthonormal-basis
//! machinery that every IMSPE formula is expressed in.
//!
//! A design on a space of `N` points is a vector of replicate counts. Its
//! indicator matrix `J` (`n x N`) stacks one unit row per observation, in
//! the order of the design-space index, so that `X = J F`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A finite, ordered set of distinct points in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpace {
    points: Vec<Vec<f64>>,
}

impl DesignSpace {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("design space has no points".into()));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Dimension(
                "all design points must share a positive dimension".into(),
            ));
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(Error::InvalidInput(format!(
                        "design points {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(Self { points })
    }

    /// `n_points` equally spaced points from `a` to `b` inclusive.
    pub fn equispaced(a: f64, b: f64, n_points: usize) -> Result<Self> {
        if n_points == 0 || !(a < b || n_points == 1) {
            return Err(Error::InvalidInput(format!(
                "need a < b and N >= 1, got a={a}, b={b}, N={n_points}"
            )));
        }
        let pts = (0..n_points)
            .map(|i| {
                if n_points == 1 {
                    vec![a]
                } else {
                    vec![a + (b - a) * i as f64 / (n_points - 1) as f64]
                }
            })
            .collect();
        Self::new(pts)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    /// True when point `i` reflects onto point `N-1-i` through the origin.
    pub fn is_symmetric_about_zero(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| {
            self.points[i]
                .iter()
                .zip(&self.points[n - 1 - i])
                .all(|(a, b)| (a + b).abs() <= 1e-12 * (1.0 + a.abs()))
        })
    }
}

/// Named regressor families.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Linear,
    Quadratic,
    Cubic,
    /// Polynomial of the given degree in the first coordinate.
    Polynomial(usize),
    Custom(String),
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelFamily::Linear => write!(f, "linear"),
            ModelFamily::Quadratic => write!(f, "quadratic"),
            ModelFamily::Cubic => write!(f, "cubic"),
            ModelFamily::Polynomial(d) => write!(f, "poly{d}"),
            ModelFamily::Custom(name) => write!(f, "{name}"),
        }
    }
}

type RegressorFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A regressor map `f: R^d -> R^p`.
#[derive(Clone)]
pub struct ModelSpec {
    family: ModelFamily,
    p: usize,
    map: Arc<RegressorFn>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("family", &self.family)
            .field("p", &self.p)
            .finish()
    }
}

impl ModelSpec {
    /// `f(x) = (1, x, ..., x^degree)'` in the first coordinate.
    pub fn polynomial(degree: usize) -> Self {
        let family = match degree {
            1 => ModelFamily::Linear,
            2 => ModelFamily::Quadratic,
            3 => ModelFamily::Cubic,
            d => ModelFamily::Polynomial(d),
        };
        Self {
            family,
            p: degree + 1,
            map: Arc::new(move |x: &[f64]| (0..=degree).map(|k| x[0].powi(k as i32)).collect()),
        }
    }

    pub fn linear() -> Self {
        Self::polynomial(1)
    }

    pub fn quadratic() -> Self {
        Self::polynomial(2)
    }

    pub fn cubic() -> Self {
        Self::polynomial(3)
    }

    pub fn custom<F>(name: impl Into<String>, p: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        if p == 0 {
            return Err(Error::InvalidInput("regressor dimension must be >= 1".into()));
        }
        Ok(Self {
            family: ModelFamily::Custom(name.into()),
            p,
            map: Arc::new(f),
        })
    }

    /// Parses `linear`, `quad`/`quadratic`, `cubic` or `polyK`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "linear" | "lin" => Ok(Self::linear()),
            "quadratic" | "quad" => Ok(Self::quadratic()),
            "cubic" => Ok(Self::cubic()),
            other => other
                .strip_prefix("poly")
                .and_then(|d| d.parse::<usize>().ok())
                .map(Self::polynomial)
                .ok_or_else(|| Error::InvalidInput(format!("unknown model family '{name}'"))),
        }
    }

    pub fn family(&self) -> &ModelFamily {
        &self.family
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.map)(x)
    }
}

/// The `N x p` matrix with rows `f'(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorMatrix(DMatrix<f64>);

impl RegressorMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    /// Wraps an explicit matrix after checking full column rank.
    pub fn from_matrix(f: DMatrix<f64>) -> Result<Self> {
        let rank = linalg::numerical_rank(&f);
        if rank < f.ncols() {
            return Err(Error::RankDeficient {
                rank,
                expected: f.ncols(),
            });
        }
        Ok(Self(f))
    }
}

pub fn build_regressor_matrix(space: &DesignSpace, model: &ModelSpec) -> Result<RegressorMatrix> {
    let (n, p) = (space.len(), model.p());
    let mut f = DMatrix::zeros(n, p);
    for (i, x) in space.points().iter().enumerate() {
        let row = model.eval(x);
        if row.len() != p {
            return Err(Error::Dimension(format!(
                "regressor map returned {} values, expected {p}",
                row.len()
            )));
        }
        for (j, v) in row.into_iter().enumerate() {
            f[(i, j)] = v;
        }
    }
    RegressorMatrix::from_matrix(f)
}

/// `F = Q R` with `(Q | Q*)` orthogonal and `R` upper triangular, `diag(R) > 0`.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    q: DMatrix<f64>,
    q_star: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl OrthoBasis {
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn q_star(&self) -> &DMatrix<f64> {
        &self.q_star
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn p(&self) -> usize {
        self.q.ncols()
    }

    pub fn big_n(&self) -> usize {
        self.q.nrows()
    }
}

/// Orthonormal basis of `col(F)` and of its orthogonal complement.
///
/// Householder QR of the `N x (p + N)` extension `[F | I_N]` yields a full
/// orthogonal factor whose first `p` columns span `col(F)`; column signs are
/// then fixed so that `R` has a positive diagonal, which reproduces the
/// Gram-Schmidt basis.
pub fn orthonormalize(f: &RegressorMatrix) -> Result<OrthoBasis> {
    let fm = f.matrix();
    let (n, p) = fm.shape();
    let rank = linalg::numerical_rank(fm);
    if rank < p || p > n {
        return Err(Error::RankDeficient { rank, expected: p });
    }
    let mut ext = DMatrix::zeros(n, p + n);
    ext.view_mut((0, 0), (n, p)).copy_from(fm);
    ext.view_mut((0, p), (n, n)).fill_with_identity();
    let qr = ext.qr();
    let mut full_q = qr.q();
    let full_r = qr.r();
    let mut r = full_r.view((0, 0), (p, p)).into_owned();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            full_q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    let scale = r.diagonal().amax();
    if r.diagonal().iter().any(|d| *d <= linalg::RANK_TOL * scale) {
        return Err(Error::RankDeficient { rank: rank.min(p - 1), expected: p });
    }
    let q = full_q.columns(0, p).into_owned();
    let q_star = full_q.columns(p, n - p).into_owned();
    Ok(OrthoBasis { q, q_star, r })
}

/// Replicate counts over the points of a design space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Design {
    counts: Vec<usize>,
}

impl Design {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.iter().sum::<usize>() == 0 {
            return Err(Error::InvalidInput("design has no observations".into()));
        }
        Ok(Self { counts })
    }

    /// `k` replicates at every listed point of an `N`-point space.
    pub fn uniform_on(big_n: usize, support: &[usize], k: usize) -> Result<Self> {
        let mut counts = vec![0; big_n];
        for &i in support {
            if i >= big_n {
                return Err(Error::InvalidInput(format!("support index {i} >= N = {big_n}")));
            }
            counts[i] = k;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn big_n(&self) -> usize {
        self.counts.len()
    }

    /// Design weights `counts / n`.
    pub fn xi(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&i| self.counts[i] > 0).collect()
    }

    pub fn support_size(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Equal replication at every support point.
    pub fn is_uniform_on_support(&self) -> bool {
        let mut positive = self.counts.iter().filter(|&&c| c > 0);
        match positive.next() {
            Some(first) => positive.all(|c| c == first),
            None => false,
        }
    }

    /// Counts reflected through the centre of the index range.
    pub fn reflected(&self) -> Design {
        Design {
            counts: self.counts.iter().rev().copied().collect(),
        }
    }

    /// Checks the design against a space/model pair: matching `N`, `q >= p`.
    pub fn check_for(&self, big_n: usize, p: usize) -> Result<()> {
        if self.counts.len() != big_n {
            return Err(Error::Dimension(format!(
                "design has {} counts, space has {big_n} points",
                self.counts.len()
            )));
        }
        let q = self.support_size();
        if q < p {
            return Err(Error::InvalidInput(format!(
                "design support size {q} is smaller than p = {p}"
            )));
        }
        Ok(())
    }
}

/// Indicator matrices of a design, observations ordered by design-space index.
#[derive(Debug, Clone)]
pub struct IndicatorStructure {
    j: DMatrix<f64>,
    d: DMatrix<f64>,
    j_plus: DMatrix<f64>,
    d_plus: DMatrix<f64>,
    support: Vec<usize>,
    obs_point: Vec<usize>,
    counts: Vec<usize>,
}

pub fn indicator_from_design(design: &Design) -> IndicatorStructure {
    let counts = design.counts().to_vec();
    let (n, big_n) = (design.n(), design.big_n());
    let support = design.support();
    let obs_point: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
        .collect();
    let mut j = DMatrix::zeros(n, big_n);
    for (row, &pt) in obs_point.iter().enumerate() {
        j[(row, pt)] = 1.0;
    }
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        big_n,
        counts.iter().map(|&c| c as f64),
    ));
    let j_plus = j.select_columns(&support);
    let d_plus = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        support.len(),
        support.iter().map(|&i| counts[i] as f64),
    ));
    IndicatorStructure {
        j,
        d,
        j_plus,
        d_plus,
        support,
        obs_point,
        counts,
    }
}

impl IndicatorStructure {
    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn j_plus(&self) -> &DMatrix<f64> {
        &self.j_plus
    }

    pub fn d_plus(&self) -> &DMatrix<f64> {
        &self.d_plus
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Design-space index of each observation (row of `J`).
    pub fn obs_point(&self) -> &[usize] {
        &self.obs_point
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n(&self) -> usize {
        self.j.nrows()
    }

    pub fn big_n(&self) -> usize {
        self.j.ncols()
    }

    pub fn q(&self) -> usize {
        self.support.len()
    }

    /// Rows of `Q` at the support points.
    pub fn q_plus(&self, basis: &OrthoBasis) -> DMatrix<f64> {
        basis.q().select_rows(&self.support)
    }

    /// `J Q`, the orthonormalized regressor row of every observation.
    pub fn jq(&self, basis: &OrthoBasis) -> DMatrix<f64> {
        basis.q().select_rows(&self.obs_point)
    }

    /// `X = J F`.
    pub fn design_matrix(&self, f: &RegressorMatrix) -> DMatrix<f64> {
        f.matrix().select_rows(&self.obs_point)
    }

    /// `xi = J' 1_n / n`.
    pub fn xi(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.j
            .row_sum()
            .iter()
            .map(|s| s / n)
            .collect()
    }
}

/// JSON description of a space/model/design triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub a: f64,
    pub b: f64,
    #[serde(rename = "N")]
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    pub space: SpaceSpec,
    pub model: String,
    pub counts: Vec<usize>,
}

/// Everything the loss formulas need for one design.
#[derive(Debug, Clone)]
pub struct Problem {
    pub space: DesignSpace,
    pub model: ModelSpec,
    pub f: RegressorMatrix,
    pub basis: OrthoBasis,
}

impl Problem {
    pub fn new(space: DesignSpace, model: ModelSpec) -> Result<Self> {
        if model.p() > space.len() {
            return Err(Error::RankDeficient {
                rank: space.len(),
                expected: model.p(),
            });
        }
        let f = build_regressor_matrix(&space, &model)?;
        let basis = orthonormalize(&f)?;
        Ok(Self {
            space,
            model,
            f,
            basis,
        })
    }

    /// The equispaced `[-1, 1]` grid with the named polynomial model.
    pub fn equispaced(model: ModelSpec, n_points: usize) -> Result<Self> {
        Self::new(DesignSpace::equispaced(-1.0, 1.0, n_points)?, model)
    }
}

impl DesignFile {
    pub fn problem(&self) -> Result<Problem> {
        Problem::new(
            DesignSpace::equispaced(self.space.a, self.space.b, self.space.n_points)?,
            ModelSpec::from_name(&self.model)?,
        )
    }

    pub fn design(&self) -> Result<Design> {
        Design::new(self.counts.clone())
    }
}
