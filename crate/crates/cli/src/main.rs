//! Command-line front end for minimax-gls.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::Value;

use minimax_gls::covclasses::{self, CovFamily, CovSource, MatrixNormKind};
use minimax_gls::designopt::{self, PSOConfig};
use minimax_gls::gls::{self, LossFunctional, PrecisionMatrix};
use minimax_gls::imspe;
use minimax_gls::output::{self, emit_table, Cell, Format, RunManifest, Table};
use minimax_gls::precopt::{self, PrecOptConfig};
use minimax_gls::ratio;
use minimax_gls::rng::rng_for;
use minimax_gls::simlab::{self, DesignMode, SimConfig, SimplexSampler};
use minimax_gls::{indicator_from_design, DesignFile, DesignSpace, Error, ModelSpec, Problem};

const THREADS_ENV: &str = "MINIMAX_GLS_THREADS";

#[derive(Parser)]
#[command(name = "minimax-gls", version, about = "Minimax robust GLS estimation and design")]
struct Cli {
    /// Worker threads (overrides MINIMAX_GLS_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the result here instead of stdout.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Matrix norms of a covariance matrix and the eta^2 bounds of the structured families.
    Norms(NormsArgs),
    /// Monte Carlo check that eta^2 I maximizes the loss over a covariance family.
    VerifyLemma1(Lemma1Args),
    /// Worst-case loss of the GLS estimate for a design and precision matrix.
    Gls(GlsArgs),
    /// Maximum IMSPE of a design and precision matrix.
    Imspe(ImspeArgs),
    /// Whether the identity precision is minimax for a design.
    CheckTheorem3(Theorem3Args),
    /// Minimax precision matrix for a fixed design.
    OptPrecision(OptPrecisionArgs),
    /// Joint minimax design and precision matrix.
    OptDesign(OptDesignArgs),
    /// Random-design simulation study.
    Simulate(SimulateArgs),
    /// Determinant efficiency ratio for equicorrelated errors.
    Ratio(RatioArgs),
    /// Minimax design table rows.
    Table3(Table3Args),
    /// Design frequencies for histogram plots.
    Fig1Data(Fig1Args),
}

#[derive(Args, Serialize)]
struct NormsArgs {
    /// JSON file with the rows of a square matrix.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    rho_max: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Serialize)]
struct Lemma1Args {
    #[arg(long)]
    family: String,
    #[arg(long)]
    rho_max: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of regressors in the random regressor matrix.
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long, default_value = "trace")]
    phi: String,
    /// Optional precision matrix (JSON rows); defaults to I_n.
    #[arg(long)]
    precision: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GlsArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    precision: Option<PathBuf>,
    #[arg(long, default_value = "trace")]
    phi: String,
    /// Weight matrix for the weighted-trace loss (JSON rows).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    eta2: f64,
}

#[derive(Args, Serialize)]
struct ImspeArgs {
    #[arg(long)]
    design: PathBuf,
    /// Overrides the model named in the design file.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    nu: f64,
    #[arg(long)]
    precision: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct Theorem3Args {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = imspe::DEFAULT_EPS)]
    eps: f64,
}

#[derive(Args, Serialize)]
struct OptPrecisionArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    nu: f64,
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize, Clone)]
struct DesignSearchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    swarm: usize,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    restarts: usize,
}

impl DesignSearchArgs {
    fn configs(&self) -> (PSOConfig, PrecOptConfig) {
        let pso = PSOConfig {
            swarm_size: self.swarm,
            iterations: self.iterations,
            seed: self.seed,
            ..PSOConfig::default()
        };
        let prec = PrecOptConfig {
            restarts: self.restarts,
            seed: self.seed,
            ..PrecOptConfig::default()
        };
        (pso, prec)
    }
}

#[derive(Args, Serialize)]
struct OptDesignArgs {
    #[arg(long)]
    model: String,
    #[arg(long = "N")]
    big_n: usize,
    /// Number of observations; defaults to 5 p.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    nu: f64,
    #[command(flatten)]
    search: DesignSearchArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SamplerArg {
    NormalizedUniform,
    FlatDirichlet,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// 1 for multinomial designs, 2 for symmetrized designs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    table: u8,
    #[arg(long, default_value = "linear")]
    model: String,
    #[arg(long = "N", default_value_t = 11)]
    big_n: usize,
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 500)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    #[arg(long, value_enum, default_value_t = SamplerArg::NormalizedUniform)]
    sampler: SamplerArg,
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args, Serialize)]
struct RatioArgs {
    #[arg(long)]
    n: usize,
    /// Either `hi:lo` (powers of ten from hi down to lo) or a comma-separated list.
    #[arg(long, default_value = "1e-1:1e-5")]
    eps_grid: String,
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args, Serialize)]
struct Table3Args {
    /// Defaults to linear, quadratic and cubic.
    #[arg(long)]
    model: Option<String>,
    /// Defaults to 11 and 51.
    #[arg(long = "N")]
    big_n: Option<usize>,
    /// Defaults to 0.5 and 1.
    #[arg(long)]
    nu: Option<f64>,
    #[command(flatten)]
    search: DesignSearchArgs,
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args, Serialize)]
struct Fig1Args {
    /// Use this design instead of searching for one.
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long, default_value = "cubic")]
    model: String,
    #[arg(long = "N", default_value_t = 51)]
    big_n: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    nu: f64,
    #[command(flatten)]
    search: DesignSearchArgs,
    #[arg(long, default_value = "csv")]
    format: String,
}

/// A failure together with its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_)
            | Error::OutOfRange { .. }
            | Error::Dimension(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => Failure::Usage(e.to_string()),
            Error::RankDeficient { .. }
            | Error::Singular(_)
            | Error::NoDegreesOfFreedom { .. }
            | Error::Optimization(_) => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let start = Instant::now();
    let result = configure_threads(cli.threads).and_then(|_| dispatch(&cli));
    eprintln!("wall time: {:.3} s", start.elapsed().as_secs_f64());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let k = match flag {
        Some(k) => Some(k),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Failure::Usage(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(k) = k {
        if k == 0 {
            return Err(Failure::Usage("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let out = cli.output.as_deref();
    match &cli.command {
        Command::Norms(a) => norms(a, out),
        Command::VerifyLemma1(a) => verify_lemma1(a, out),
        Command::Gls(a) => gls_cmd(a, out),
        Command::Imspe(a) => imspe_cmd(a, out),
        Command::CheckTheorem3(a) => theorem3(a, out),
        Command::OptPrecision(a) => opt_precision(a, out),
        Command::OptDesign(a) => opt_design(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Ratio(a) => ratio_cmd(a, out),
        Command::Table3(a) => table3(a, out),
        Command::Fig1Data(a) => fig1(a, out),
    }
}

// ---- input ----

fn read_json_file(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        Failure::Usage(format!(
            "{}: invalid JSON at line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

fn from_value<T: serde::de::DeserializeOwned>(path: &Path, v: Value) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn read_design(path: &Path, model: Option<&str>) -> CliResult<(Problem, minimax_gls::Design)> {
    let mut file: DesignFile = from_value(path, read_json_file(path)?)?;
    if let Some(m) = model {
        file.model = m.to_string();
    }
    let problem = file.problem()?;
    let design = file.design()?;
    design.check_for(problem.space.len(), problem.model.p())?;
    Ok((problem, design))
}

fn read_rows(path: &Path) -> CliResult<DMatrix<f64>> {
    let v = read_json_file(path)?;
    // bare rows, or the `P_nu` field of an earlier result
    let rows = match v {
        Value::Object(mut m) => {
            let inner = m
                .remove("P_nu")
                .or_else(|| m.remove("P"))
                .or_else(|| m.remove("result").and_then(|r| r.get("P_nu").cloned()))
                .ok_or_else(|| Failure::Usage(format!("{}: expected matrix rows", path.display())))?;
            from_value::<Vec<Vec<f64>>>(path, inner)?
        }
        other => from_value::<Vec<Vec<f64>>>(path, other)?,
    };
    Ok(gls::rows_to_matrix(&rows)?)
}

fn read_precision(path: Option<&Path>, n: usize) -> CliResult<PrecisionMatrix> {
    match path {
        None => Ok(PrecisionMatrix::identity(n)),
        Some(p) => {
            let m = read_rows(p)?;
            if m.nrows() != n {
                return Err(Failure::Usage(format!(
                    "precision matrix is {} x {} but the design has n = {n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(PrecisionMatrix::normalized(m)?)
        }
    }
}

fn parse_format(s: &str) -> CliResult<Format> {
    Ok(s.parse::<Format>()?)
}

fn parse_eps_grid(s: &str) -> CliResult<Vec<f64>> {
    let bad = || Failure::Usage(format!("cannot parse epsilon grid '{s}'"));
    let grid: Vec<f64> = if let Some((hi, lo)) = s.split_once(':') {
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        if !(hi > 0.0 && lo > 0.0 && lo <= hi) {
            return Err(bad());
        }
        let (a, b) = (hi.log10().round() as i32, lo.log10().round() as i32);
        (b..=a).rev().map(|k| 10f64.powi(k)).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<CliResult<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|e| e.is_nan() || *e <= 0.0) {
        return Err(bad());
    }
    Ok(grid)
}

// ---- output ----

fn manifest<A: Serialize>(command: &str, args: &A, seed: u64) -> RunManifest {
    RunManifest::new(command, serde_json::to_value(args).unwrap_or(Value::Null), seed)
}

fn sink(out: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn ensure_finite(values: impl IntoIterator<Item = f64>, what: &str) -> CliResult<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Failure::Numerical(format!("non-finite value in {what}")));
    }
    Ok(())
}

fn matrix_values(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    m.iter().copied()
}

fn breakdown_values(b: &imspe::LossBreakdown) -> [f64; 4] {
    [b.i0, b.i1, b.nu, b.inu]
}

fn emit_json<T: Serialize>(result: &T, m: &RunManifest, out: Option<&Path>) -> CliResult<()> {
    let doc = serde_json::json!({ "manifest": m, "result": result });
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, &doc).map_err(Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn emit(table: &Table, format: Format, m: &RunManifest, out: Option<&Path>) -> CliResult<()> {
    if let Some((r, c)) = table.first_non_finite() {
        return Err(Failure::Numerical(format!(
            "non-finite value in row {r}, column '{}'",
            table.columns[c]
        )));
    }
    let mut w = sink(out)?;
    emit_table(table, format, Some(m), &mut w)?;
    w.flush()?;
    Ok(())
}

// ---- commands ----

#[derive(Serialize)]
struct NormsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    spectral: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    one_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inf_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta2_bounds: Option<covclasses::UnionBound>,
}

fn norms(a: &NormsArgs, out: Option<&Path>) -> CliResult<()> {
    let mut report = NormsReport {
        spectral: None,
        one_norm: None,
        inf_norm: None,
        eta2_bounds: None,
    };
    if let Some(path) = &a.matrix {
        let c = read_rows(path)?;
        if !c.is_square() {
            return Err(Failure::Usage("matrix must be square".into()));
        }
        report.spectral = Some(covclasses::matrix_norm(&c, MatrixNormKind::Spectral));
        report.one_norm = Some(covclasses::matrix_norm(&c, MatrixNormKind::OneNorm));
        report.inf_norm = Some(covclasses::matrix_norm(&c, MatrixNormKind::InfNorm));
    }
    match (a.rho_max, a.n) {
        (Some(rho), Some(n)) => report.eta2_bounds = Some(covclasses::union_eta_bound(rho, a.sigma2, n)?),
        (None, None) => {}
        _ => return Err(Failure::Usage("--rho-max and --n must be given together".into())),
    }
    if a.matrix.is_none() && report.eta2_bounds.is_none() {
        return Err(Failure::Usage("give --matrix or --rho-max with --n".into()));
    }
    let mut vals: Vec<f64> = [report.spectral, report.one_norm, report.inf_norm].into_iter().flatten().collect();
    if let Some(b) = &report.eta2_bounds {
        vals.extend([b.heteroscedastic, b.equicorrelated, b.ma1, b.ar1, b.max]);
    }
    ensure_finite(vals, "norms")?;
    emit_json(&report, &manifest("norms", a, 0), out)
}

#[derive(Serialize)]
struct Lemma1Report {
    family: String,
    eta2: f64,
    phi: String,
    dominated: bool,
    report: covclasses::DominanceReport,
}

fn verify_lemma1(a: &Lemma1Args, out: Option<&Path>) -> CliResult<()> {
    let family = CovFamily::from_name(&a.family)?;
    let phi = LossFunctional::from_name(&a.phi)?;
    if a.p == 0 || a.p > a.n {
        return Err(Failure::Usage(format!("need 1 <= p <= n, got p = {}", a.p)));
    }
    let source = CovSource::Family {
        family,
        rho_max: a.rho_max,
        sigma2: a.sigma2,
        n: a.n,
    };
    let mut xrng = rng_for(a.seed, "lemma1-x", 0);
    let x = DMatrix::from_fn(a.n, a.p, |_, _| rand_normal(&mut xrng));
    let p = read_precision(a.precision.as_deref(), a.n)?;
    let mut rng = rng_for(a.seed, "lemma1-cov", 0);
    let report = covclasses::verify_dominance(
        |c| gls::gls_cov(&x, &p, c).map(|s| phi.eval(&s)).unwrap_or(f64::NAN),
        &source,
        a.trials,
        &mut rng,
    )?;
    ensure_finite([report.max_violation, report.reference_loss, report.worst_loss], "dominance report")?;
    let result = Lemma1Report {
        family: a.family.clone(),
        eta2: source.eta2()?,
        phi: a.phi.clone(),
        dominated: report.max_violation <= 1e-10 * (1.0 + report.reference_loss.abs()),
        report,
    };
    emit_json(&result, &manifest("verify-lemma1", a, a.seed), out)
}

fn rand_normal(rng: &mut minimax_gls::rng::Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

#[derive(Serialize)]
struct GlsReport {
    max_loss: f64,
    /// Covariance of the estimate at the maximizing `C = eta^2 I`.
    cov: Vec<Vec<f64>>,
}

fn gls_cmd(a: &GlsArgs, out: Option<&Path>) -> CliResult<()> {
    let (problem, design) = read_design(&a.design, None)?;
    let j = indicator_from_design(&design);
    let x = j.design_matrix(&problem.f);
    let p = read_precision(a.precision.as_deref(), design.n())?;
    let phi = match (&a.weights, a.phi.to_ascii_lowercase().as_str()) {
        (Some(w), "weighted_trace" | "weighted-trace") => LossFunctional::weighted_trace(read_rows(w)?)?,
        (None, "weighted_trace" | "weighted-trace") => {
            return Err(Failure::Usage("weighted_trace needs --weights".into()))
        }
        (_, name) => LossFunctional::from_name(name)?,
    };
    if a.eta2.is_nan() || a.eta2 <= 0.0 {
        return Err(Failure::Usage("eta2 must be positive".into()));
    }
    let n = design.n();
    let cov = gls::gls_cov(&x, &p, &(DMatrix::identity(n, n) * a.eta2))?;
    let max_loss = gls::max_loss(&x, &p, &phi, a.eta2)?;
    ensure_finite(std::iter::once(max_loss).chain(matrix_values(&cov)), "gls output")?;
    let report = GlsReport {
        max_loss,
        cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
    };
    emit_json(&report, &manifest("gls", a, 0), out)
}

fn imspe_cmd(a: &ImspeArgs, out: Option<&Path>) -> CliResult<()> {
    let (problem, design) = read_design(&a.design, a.model.as_deref())?;
    let j = indicator_from_design(&design);
    let p = read_precision(a.precision.as_deref(), design.n())?;
    let b = imspe::imspe_nu(&j, &problem.basis, &p, a.nu)?;
    ensure_finite(breakdown_values(&b), "loss breakdown")?;
    emit_json(&b, &manifest("imspe", a, 0), out)
}

fn theorem3(a: &Theorem3Args, out: Option<&Path>) -> CliResult<()> {
    let (problem, design) = read_design(&a.design, a.model.as_deref())?;
    let j = indicator_from_design(&design);
    let d = imspe::theorem3_check(&j, &problem.basis, a.eps)?;
    ensure_finite(
        [d.delta0, d.delta1, d.i0_identity, d.i1_identity, d.i0_p0, d.i1_p0],
        "diagnostics",
    )?;
    emit_json(&d, &manifest("check-theorem3", a, 0), out)
}

fn opt_precision(a: &OptPrecisionArgs, out: Option<&Path>) -> CliResult<()> {
    let (problem, design) = read_design(&a.design, a.model.as_deref())?;
    let j = indicator_from_design(&design);
    let config = PrecOptConfig {
        restarts: a.restarts,
        max_iterations: a.max_iterations,
        seed: a.seed,
        ..PrecOptConfig::default()
    };
    let r = precopt::minimize_precision(&j, &problem.basis, a.nu, &config)?;
    ensure_finite(
        breakdown_values(&r.breakdown)
            .into_iter()
            .chain(matrix_values(r.p_nu.matrix())),
        "precision result",
    )?;
    emit_json(&r, &manifest("opt-precision", a, a.seed), out)
}

fn search_design(
    model: &str,
    big_n: usize,
    n: Option<usize>,
    nu: f64,
    search: &DesignSearchArgs,
) -> CliResult<designopt::DesignOptResult> {
    let model = ModelSpec::from_name(model)?;
    let space = DesignSpace::equispaced(-1.0, 1.0, big_n)?;
    let n = n.unwrap_or(5 * model.p());
    let (pso, prec) = search.configs();
    let r = designopt::pso_minimize(&space, &model, nu, n, &pso, &prec)?;
    ensure_finite(
        breakdown_values(&r.breakdown)
            .into_iter()
            .chain([r.t.t1, r.t.t2, r.t.t3])
            .chain(matrix_values(r.p_nu.matrix())),
        "design result",
    )?;
    Ok(r)
}

fn opt_design(a: &OptDesignArgs, out: Option<&Path>) -> CliResult<()> {
    let r = search_design(&a.model, a.big_n, a.n, a.nu, &a.search)?;
    emit_json(&r, &manifest("opt-design", a, a.search.seed), out)
}

fn simulate(a: &SimulateArgs, out: Option<&Path>) -> CliResult<()> {
    let format = parse_format(&a.format)?;
    let mode = if a.table == 1 { DesignMode::Multinomial } else { DesignMode::Symmetrized };
    let mut config = SimConfig::new(&a.model, a.big_n, a.nu, mode);
    config.n = a.n;
    config.runs = a.runs;
    config.seed = a.seed;
    config.sampler = match a.sampler {
        SamplerArg::NormalizedUniform => SimplexSampler::NormalizedUniform,
        SamplerArg::FlatDirichlet => SimplexSampler::FlatDirichlet,
    };
    config.prec.restarts = a.restarts;
    let summary = simlab::run_study(&config)?;
    let table = output::sim_table(&[(a.model.as_str(), a.big_n, a.nu, &summary)])?;
    emit(&table, format, &manifest("simulate", a, a.seed), out)
}

fn ratio_cmd(a: &RatioArgs, out: Option<&Path>) -> CliResult<()> {
    let format = parse_format(&a.format)?;
    let grid = parse_eps_grid(&a.eps_grid)?;
    let mut table = Table::new(&["epsilon", "rho", "S", "r_direct", "r_closed"]);
    let limit = 1.0 / a.n as f64;
    for eps in grid {
        if eps >= limit {
            eprintln!("warning: skipping epsilon = {eps}: the witness needs epsilon < 1/n = {limit}");
            continue;
        }
        let w = ratio::unboundedness_witness(a.n, eps)?;
        table
            .push(vec![
                eps.into(),
                w.rho.into(),
                w.closed.s.into(),
                w.direct.r.into(),
                w.closed.r.into(),
            ])
            .map_err(Failure::from)?;
    }
    emit(&table, format, &manifest("ratio", a, 0), out)
}

fn table3(a: &Table3Args, out: Option<&Path>) -> CliResult<()> {
    let format = parse_format(&a.format)?;
    let models: Vec<String> = match &a.model {
        Some(m) => vec![m.clone()],
        None => vec!["linear".into(), "quadratic".into(), "cubic".into()],
    };
    let sizes = a.big_n.map_or(vec![11, 51], |n| vec![n]);
    let nus = a.nu.map_or(vec![0.5, 1.0], |v| vec![v]);
    let mut results = Vec::new();
    for m in &models {
        for &big_n in &sizes {
            for &nu in &nus {
                results.push((m.as_str(), big_n, nu, search_design(m, big_n, None, nu, &a.search)?));
            }
        }
    }
    let rows: Vec<_> = results.iter().map(|(m, n, nu, r)| (*m, *n, *nu, r)).collect();
    let table = output::table3_table(&rows)?;
    emit(&table, format, &manifest("table3", a, a.search.seed), out)
}

fn fig1(a: &Fig1Args, out: Option<&Path>) -> CliResult<()> {
    let format = parse_format(&a.format)?;
    let (space, design) = match &a.design {
        Some(path) => {
            let (problem, design) = read_design(path, None)?;
            (problem.space, design)
        }
        None => {
            let r = search_design(&a.model, a.big_n, a.n, a.nu, &a.search)?;
            (DesignSpace::equispaced(-1.0, 1.0, a.big_n)?, r.design)
        }
    };
    let mut table = Table::new(&["x", "frequency"]);
    for (i, xi) in design.xi().into_iter().enumerate() {
        table
            .push(vec![Cell::Float(space.point(i)[0]), xi.into()])
            .map_err(Failure::from)?;
    }
    emit(&table, format, &manifest("fig1-data", a, a.search.seed), out)
}
