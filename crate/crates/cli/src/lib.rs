//! Command-line harness: gradient estimates, fidelity against a sampling
//! baseline, gradient descent, hyperparameter sweeps and timing.
//!
//! Every command writes one CSV table (to `--out` or stdout) and a short
//! human-readable summary to stderr. Numbers use Rust's shortest
//! round-trip formatting, so equal runs give equal bytes.

use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoothgrad_core::baseline::{crisp_run, pgo_with_se};
use smoothgrad_core::dgo::Assignment;
use smoothgrad_core::estimator::derive_seed;
use smoothgrad_core::optimize::{descend, starting_point, sweep, DescentConfig, OptimizeError, SweepGrid};
use smoothgrad_core::si::{Strategy, VarianceMode, DEFAULT_WEIGHT_THRESHOLD};
use smoothgrad_core::{Estimator, Program, ProgramError};
use smoothgrad_problems::epidemics::{read_reference, EpidemicsConfig, ReferenceError};
use smoothgrad_problems::hotel::{load_products, RatesError};
use smoothgrad_problems::traffic::TrafficConfig;
use smoothgrad_problems::{Epidemics, Hotel, Problem, Traffic, UnknownProblem};

pub const DESCENT_HEADER: [&str; 4] = ["step", "wall_ms", "expectation", "crisp_objective"];
pub const FIDELITY_HEADER: [&str; 3] = ["dim", "mae", "baseline_se"];
pub const BENCH_HEADER: [&str; 4] = ["estimator", "samples_or_paths", "mean_ms", "slowdown_per_unit"];
pub const ESTIMATE_HEADER: [&str; 4] = ["estimator", "expectation", "dim", "gradient"];
pub const SWEEP_HEADER: [&str; 7] = ["estimator", "sigma", "lr", "macroreps", "mean_final", "best_final", "best_cell"];

/// Most dimensions a fidelity report covers.
pub const MAX_FIDELITY_DIMS: usize = 25;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Problem(UnknownProblem),
    Program(ProgramError),
    Optimize(OptimizeError),
    Rates(RatesError),
    Reference(ReferenceError),
    Io(io::Error),
    Csv(csv::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Problem(e) => write!(f, "{e}"),
            CliError::Program(e) => write!(f, "{e}"),
            CliError::Optimize(e) => write!(f, "{e}"),
            CliError::Rates(e) => write!(f, "{e}"),
            CliError::Reference(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o: {e}"),
            CliError::Csv(e) => write!(f, "csv: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! from_error {
    ($($t:ty => $v:ident),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::$v(e)
            }
        })*
    };
}

from_error!(
    UnknownProblem => Problem,
    ProgramError => Program,
    OptimizeError => Optimize,
    RatesError => Rates,
    ReferenceError => Reference,
    io::Error => Io,
    csv::Error => Csv,
);

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

#[derive(Debug, Parser)]
#[command(name = "smoothgrad", version, about = "Gradient estimation for programs with discontinuous control flow")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "SMOOTHGRAD_JOBS", default_value_t = 0, global = true)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Smoothed objective and gradient at one point.
    Estimate(EstimateArgs),
    /// Adam descent; one CSV row per gradient estimate.
    Optimize(OptimizeArgs),
    /// Mean absolute gradient error against a PGO baseline.
    Fidelity(FidelityArgs),
    /// Descents over a σ × learning-rate × estimator-size grid.
    Sweep(SweepArgs),
    /// Wall time per estimate, relative to one crisp run.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Crisp,
    Ipa,
    Dgsi,
    Dgo,
    Pgo,
    Rf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AssignmentArg {
    Balanced,
    AllBranches,
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// heaviside, synthetic<depth>, traffic<size>, ac, hotel or epidemics.
    #[arg(long)]
    pub problem: String,
    /// Hotel rates table (CSV).
    #[arg(long)]
    pub rates: Option<PathBuf>,
    /// Epidemics reference trajectory (CSV).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Traffic time steps; defaults to the grid size.
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimatorArgs {
    #[arg(long, value_enum, default_value_t = Kind::Dgo)]
    pub estimator: Kind,
    /// Samples for ipa, dgo, pgo and rf [default: 100].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Tracked paths for dgsi [default: 4].
    #[arg(long)]
    pub paths: Option<usize>,
    /// Restrict strategy for dgsi: ch, iw, wo or di [default: di].
    #[arg(long)]
    pub restrict: Option<Strategy>,
    /// Path weight threshold for dgsi.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Neighbourhood half-width for dgo [default: inf].
    #[arg(long)]
    pub delta: Option<f64>,
    /// Weight-derivative assignment for dgo.
    #[arg(long, value_enum)]
    pub assignment: Option<AssignmentArg>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// Comma-separated point; a single value is used in every dimension.
    /// Defaults to the problem's seeded starting point.
    #[arg(long, allow_hyphen_values = true)]
    pub at: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BudgetArgs {
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Step budget.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Wall-clock budget in seconds, checked between steps.
    #[arg(long)]
    pub time_budget: Option<f64>,
    /// Gradient estimates averaged per step [default: 1, 4 for stochastic problems].
    #[arg(long)]
    pub microreps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Starting point; defaults to the problem's seeded starting point.
    #[arg(long, allow_hyphen_values = true)]
    pub start: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write 0 in the wall_ms column so output depends only on the seed.
    #[arg(long)]
    pub no_clock: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FidelityArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// PGO baseline samples.
    #[arg(long, default_value_t = 100_000)]
    pub baseline_samples: usize,
    /// Leading dimensions to report [default: min(dim, 25)].
    #[arg(long)]
    pub dims: Option<usize>,
    /// Grid points.
    #[arg(long, default_value_t = 10)]
    pub grid: usize,
    /// Grid points are drawn uniformly within ±range of the centre.
    #[arg(long, default_value_t = 1.0)]
    pub range: f64,
    /// Grid centre; defaults to the problem's seeded starting point.
    #[arg(long, allow_hyphen_values = true)]
    pub at: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Estimator sizes (samples or paths); defaults to the single size given.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub macroreps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub est: EstimatorArgs,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// Estimator sizes (samples or paths); defaults to the single size given.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    /// Timed estimates per size.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub at: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ProblemArgs {
    pub fn build(&self) -> Result<Problem, CliError> {
        let mut p = Problem::by_name(&self.problem)?;
        match &mut p {
            Problem::Hotel(h) => {
                if let Some(path) = &self.rates {
                    *h = Hotel::new(load_products(path)?);
                }
            }
            Problem::Epidemics(e) => {
                if let Some(path) = &self.reference {
                    let cfg = EpidemicsConfig::default();
                    let counts = read_reference(File::open(path)?, &cfg)?;
                    **e = Epidemics::new(cfg, counts)?;
                }
            }
            Problem::Traffic(t) => {
                if let Some(steps) = self.horizon {
                    *t = Traffic::new(TrafficConfig { steps, ..t.config().clone() });
                }
            }
            _ => {}
        }
        let misplaced = [
            ("--rates", self.rates.is_some(), matches!(p, Problem::Hotel(_))),
            ("--reference", self.reference.is_some(), matches!(p, Problem::Epidemics(_))),
            ("--horizon", self.horizon.is_some(), matches!(p, Problem::Traffic(_))),
        ];
        for (flag, given, fits) in misplaced {
            if given && !fits {
                return Err(usage(format!("{flag} does not apply to problem {}", self.problem)));
            }
        }
        Ok(p)
    }
}

impl EstimatorArgs {
    /// The configured estimator with its size replaced by `size` if given.
    pub fn build_sized(&self, size: Option<usize>) -> Result<Estimator, CliError> {
        let only = |flag: &str, given: bool, kinds: &[Kind]| {
            if given && !kinds.contains(&self.estimator) {
                Err(usage(format!("{flag} does not apply to estimator {:?}", self.estimator).to_lowercase()))
            } else {
                Ok(())
            }
        };
        only("--samples", self.samples.is_some(), &[Kind::Ipa, Kind::Dgo, Kind::Pgo, Kind::Rf])?;
        only("--paths", self.paths.is_some(), &[Kind::Dgsi])?;
        only("--restrict", self.restrict.is_some(), &[Kind::Dgsi])?;
        only("--threshold", self.threshold.is_some(), &[Kind::Dgsi])?;
        only("--delta", self.delta.is_some(), &[Kind::Dgo])?;
        only("--assignment", self.assignment.is_some(), &[Kind::Dgo])?;
        let samples = size.or(self.samples).unwrap_or(100);
        if samples == 0 {
            return Err(usage("estimator size must be positive"));
        }
        Ok(match self.estimator {
            Kind::Crisp => Estimator::Crisp,
            Kind::Ipa => Estimator::Ipa { samples },
            Kind::Pgo => Estimator::Pgo { samples },
            Kind::Rf => Estimator::Rf { samples },
            Kind::Dgo => {
                let delta = self.delta.unwrap_or(f64::INFINITY);
                if !(delta > 0.0) {
                    return Err(usage("--delta must be positive"));
                }
                let assignment = match self.assignment {
                    Some(AssignmentArg::AllBranches) => Assignment::AllBranches,
                    _ => Assignment::Balanced,
                };
                Estimator::Dgo { samples, delta, assignment }
            }
            Kind::Dgsi => {
                let threshold = self.threshold.unwrap_or(DEFAULT_WEIGHT_THRESHOLD);
                if !(threshold >= 0.0) {
                    return Err(usage("--threshold must be >= 0"));
                }
                Estimator::Dgsi {
                    paths: size.or(self.paths).unwrap_or(4),
                    strategy: self.restrict.unwrap_or(Strategy::Di),
                    threshold,
                    variance: VarianceMode::Independent,
                }
            }
        })
    }

    pub fn build(&self) -> Result<Estimator, CliError> {
        self.build_sized(None)
    }

    fn default_size(&self) -> usize {
        match self.estimator {
            Kind::Dgsi => self.paths.unwrap_or(4),
            Kind::Crisp => 1,
            _ => self.samples.unwrap_or(100),
        }
    }
}

/// Parses `a,b,c`; a single value is broadcast to `dim` entries.
pub fn parse_point(s: &str, dim: usize) -> Result<Vec<f64>, CliError> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("bad number {t:?} in point"))))
        .collect::<Result<_, _>>()?;
    match vals.len() {
        1 => Ok(vec![vals[0]; dim]),
        n if n == dim => Ok(vals),
        n => Err(usage(format!("point has {n} values, problem has {dim} dimensions"))),
    }
}

fn point_or_start(p: &Problem, s: Option<&str>, seed: u64) -> Result<Vec<f64>, CliError> {
    match s {
        Some(s) => parse_point(s, p.dim()),
        None => Ok(starting_point(p, seed, 0)),
    }
}

/// Reporting sign: maximized objectives are negated internally.
fn report_sign(p: &Problem) -> f64 {
    if p.maximizes() {
        -1.0
    } else {
        1.0
    }
}

fn check_sigma(sigma: f64) -> Result<(), CliError> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(usage(format!("--sigma must be finite and >= 0, got {sigma}")))
    }
}

/// Writes a header and rows; the header is written even without rows.
pub fn write_csv<W: Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r)?;
    }
    wr.flush()?;
    Ok(())
}

fn emit(out: &Option<PathBuf>, stdout: &mut dyn Write, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    match out {
        Some(path) => write_csv(File::create(path)?, header, rows),
        None => write_csv(stdout, header, rows),
    }
}

/// Fidelity grid: `count` points uniform within `±range` of a centre,
/// clamped to the problem's bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityGrid {
    pub count: usize,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    /// Mean over the grid of `|estimate − baseline|`, per leading dimension.
    pub mae: Vec<f64>,
    /// Mean over the grid of the baseline's standard error, per dimension.
    pub baseline_se: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl FidelityReport {
    pub fn mean_mae(&self) -> f64 {
        self.mae.iter().sum::<f64>() / self.mae.len().max(1) as f64
    }
}

pub fn fidelity_points(p: &impl Program, centre: &[f64], grid: FidelityGrid, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xf1de));
    (0..grid.count)
        .map(|_| {
            centre
                .iter()
                .map(|c| {
                    let v = if grid.range > 0.0 { c + rng.random_range(-grid.range..grid.range) } else { *c };
                    p.bounds().map_or(v, |(lo, hi)| v.clamp(lo, hi))
                })
                .collect()
        })
        .collect()
}

/// Per-dimension mean absolute error of `est` against PGO with
/// `baseline_samples` samples over a seeded grid. Grid point `i` uses the
/// same seed for the estimator and the baseline.
#[allow(clippy::too_many_arguments)]
pub fn fidelity_mae(
    p: &impl Program,
    est: &Estimator,
    baseline_samples: usize,
    sigma: f64,
    dims: usize,
    grid: FidelityGrid,
    centre: &[f64],
    seed: u64,
) -> Result<FidelityReport, CliError> {
    if dims == 0 || dims > p.dim().min(MAX_FIDELITY_DIMS) {
        return Err(usage(format!(
            "dims must be in 1..={} for {}, got {dims}",
            p.dim().min(MAX_FIDELITY_DIMS),
            p.name()
        )));
    }
    if centre.len() != p.dim() {
        return Err(ProgramError::Dimension { expected: p.dim(), got: centre.len() }.into());
    }
    if baseline_samples < est.size() {
        return Err(usage(format!("baseline needs at least {} samples, got {baseline_samples}", est.size())));
    }
    if grid.count == 0 || !(grid.range >= 0.0) {
        return Err(usage("fidelity grid needs at least one point and range >= 0"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(usage("the PGO baseline needs a positive finite sigma"));
    }
    let points = fidelity_points(p, centre, grid, seed);
    let mut mae = vec![0.0; dims];
    let mut se = vec![0.0; dims];
    let sig = vec![sigma; p.dim()];
    for (i, x) in points.iter().enumerate() {
        let s = derive_seed(seed, i as u64);
        let g = est.estimate(p, x, sigma, s)?.gradient;
        // same seed derivation as `Estimator::estimate`
        let (b, bse) = pgo_with_se(p, x, &sig, baseline_samples, derive_seed(s, 1), derive_seed(s, 2))?;
        for k in 0..dims {
            mae[k] += (g[k] - b.gradient[k]).abs();
            se[k] += bse[k];
        }
    }
    let n = points.len() as f64;
    mae.iter_mut().chain(se.iter_mut()).for_each(|v| *v /= n);
    Ok(FidelityReport { mae, baseline_se: se, points })
}

fn descent_config(p: &Problem, b: &BudgetArgs, seed: u64) -> Result<DescentConfig, CliError> {
    check_sigma(b.sigma)?;
    if !(b.lr > 0.0) || !b.lr.is_finite() {
        return Err(usage("--lr must be positive"));
    }
    if b.steps.is_none() && b.time_budget.is_none() {
        return Err(usage("give --steps, --time-budget or both"));
    }
    if b.time_budget.is_some_and(|t| !(t > 0.0)) {
        return Err(usage("--time-budget must be positive"));
    }
    let microreps = b.microreps.unwrap_or(if p.stochastic() { 4 } else { 1 });
    if microreps == 0 {
        return Err(usage("--microreps must be positive"));
    }
    Ok(DescentConfig {
        sigma: b.sigma,
        lr: b.lr,
        steps: b.steps,
        wall_seconds: b.time_budget,
        microreps,
        eval_seed: derive_seed(seed, 0xe7a1),
    })
}

fn estimate(a: &EstimateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let p = a.problem.build()?;
    let est = a.est.build()?;
    check_sigma(a.sigma)?;
    let x = point_or_start(&p, a.at.as_deref(), a.seed)?;
    let r = est.estimate(&p, &x, a.sigma, a.seed)?;
    let sign = report_sign(&p);
    let e = sign * r.expectation;
    let rows: Vec<Vec<String>> = r
        .gradient
        .iter()
        .enumerate()
        .map(|(k, g)| vec![est.to_string(), e.to_string(), k.to_string(), (sign * g).to_string()])
        .collect();
    eprintln!("{est} on {}: expectation {e}", p.name());
    emit(&a.out, stdout, &ESTIMATE_HEADER, &rows)
}

fn optimize(a: &OptimizeArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let p = a.problem.build()?;
    let est = a.est.build()?;
    let cfg = descent_config(&p, &a.budget, a.seed)?;
    let x0 = match &a.start {
        Some(s) => parse_point(s, p.dim())?,
        None => starting_point(&p, a.seed, 0),
    };
    let d = descend(&p, &est, &cfg, &x0, a.seed)?;
    let sign = report_sign(&p);
    let rows: Vec<Vec<String>> = d
        .records
        .iter()
        .map(|r| {
            let wall = if a.no_clock { 0.0 } else { r.wall_ms };
            vec![
                r.step.to_string(),
                wall.to_string(),
                (sign * r.expectation).to_string(),
                (sign * r.crisp_objective).to_string(),
            ]
        })
        .collect();
    emit(&a.out, stdout, &DESCENT_HEADER, &rows)?;
    let first = d.records.first().map_or(f64::NAN, |r| sign * r.crisp_objective);
    eprintln!("{est} on {}: crisp objective {first} -> {}", p.name(), sign * d.final_objective);
    match d.error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn fidelity(a: &FidelityArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let p = a.problem.build()?;
    let est = a.est.build()?;
    let x = point_or_start(&p, a.at.as_deref(), a.seed)?;
    let dims = a.dims.unwrap_or(p.dim().min(MAX_FIDELITY_DIMS));
    let grid = FidelityGrid { count: a.grid, range: a.range };
    let r = fidelity_mae(&p, &est, a.baseline_samples, a.sigma, dims, grid, &x, a.seed)?;
    let rows: Vec<Vec<String>> =
        (0..dims).map(|k| vec![k.to_string(), r.mae[k].to_string(), r.baseline_se[k].to_string()]).collect();
    eprintln!("{est} vs PGO/{} on {}: mean MAE {}", a.baseline_samples, p.name(), r.mean_mae());
    emit(&a.out, stdout, &FIDELITY_HEADER, &rows)
}

fn sizes_or_default(sizes: &[usize], est: &EstimatorArgs) -> Vec<usize> {
    if sizes.is_empty() {
        vec![est.default_size()]
    } else {
        sizes.to_vec()
    }
}

fn sweep_cmd(a: &SweepArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let p = a.problem.build()?;
    let cfg = descent_config(&p, &a.budget, a.seed)?;
    let ests = sizes_or_default(&a.sizes, &a.est)
        .into_iter()
        .map(|s| a.est.build_sized(Some(s)))
        .collect::<Result<Vec<_>, _>>()?;
    let grid = SweepGrid::around(a.budget.sigma, a.budget.lr, ests);
    let r = sweep(&p, &grid, a.macroreps, &cfg, a.seed)?;
    let sign = report_sign(&p);
    let rows: Vec<Vec<String>> = r
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let best = c.finals.iter().copied().fold(f64::INFINITY, f64::min);
            vec![
                c.estimator.to_string(),
                c.sigma.to_string(),
                c.lr.to_string(),
                c.finals.len().to_string(),
                (sign * c.mean_final).to_string(),
                (sign * best).to_string(),
                (i == r.best).to_string(),
            ]
        })
        .collect();
    let b = &r.cells[r.best];
    eprintln!("best on {}: {} sigma {} lr {} mean final {}", p.name(), b.estimator, b.sigma, b.lr, sign * b.mean_final);
    emit(&a.out, stdout, &SWEEP_HEADER, &rows)
}

/// Mean wall time of `f` over `reps` calls, in milliseconds.
pub fn mean_ms<T>(reps: usize, mut f: impl FnMut() -> Result<T, ProgramError>) -> Result<f64, ProgramError> {
    let reps = reps.max(1);
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f()?);
    }
    Ok(t.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

fn bench(a: &BenchArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let p = a.problem.build()?;
    check_sigma(a.sigma)?;
    let x = point_or_start(&p, a.at.as_deref(), a.seed)?;
    // crisp runs are short; time enough of them to swamp timer resolution
    let crisp_ms = mean_ms(a.reps.max(1) * 50, || crisp_run(&p, &x, a.seed))?;
    let mut rows = Vec::new();
    for size in sizes_or_default(&a.sizes, &a.est) {
        let est = a.est.build_sized(Some(size))?;
        let ms = mean_ms(a.reps, || est.estimate(&p, &x, a.sigma, a.seed))?;
        let per_unit = ms / crisp_ms / est.size() as f64;
        eprintln!("{est} on {}: {ms} ms per estimate, {per_unit} crisp runs per unit", p.name());
        rows.push(vec![est.to_string(), est.size().to_string(), ms.to_string(), per_unit.to_string()]);
    }
    emit(&a.out, stdout, &BENCH_HEADER, &rows)
}

/// Runs one parsed command, writing CSV to `stdout` unless `--out` is set.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    if cli.jobs > 0 {
        // fails only if a pool already exists, which then stays in use
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    match &cli.command {
        Command::Estimate(a) => estimate(a, stdout),
        Command::Optimize(a) => optimize(a, stdout),
        Command::Fidelity(a) => fidelity(a, stdout),
        Command::Sweep(a) => sweep_cmd(a, stdout),
        Command::Bench(a) => bench(a, stdout),
    }
}

/// Parses `argv` (including the program name) and runs it.
pub fn run_command<I, T>(argv: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| usage(e.to_string()))?;
    run(&cli, stdout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_of(args: &[&str]) -> String {
        let mut buf = Vec::new();
        run_command(std::iter::once("smoothgrad").chain(args.iter().copied()), &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn points_parse_and_broadcast() {
        assert_eq!(parse_point("0.5", 3).unwrap(), vec![0.5; 3]);
        assert_eq!(parse_point("1,-2", 2).unwrap(), vec![1.0, -2.0]);
        assert!(parse_point("1,2", 3).is_err());
        assert!(parse_point("x", 1).is_err());
    }

    #[test]
    fn estimator_flags_are_checked() {
        let bad = [
            vec!["estimate", "--problem", "heaviside", "--estimator", "pgo", "--paths", "4"],
            vec!["estimate", "--problem", "heaviside", "--estimator", "dgo", "--restrict", "ch"],
            vec!["estimate", "--problem", "heaviside", "--estimator", "dgsi", "--delta", "1"],
            vec!["estimate", "--problem", "heaviside", "--horizon", "3"],
            vec!["estimate", "--problem", "heaviside", "--sigma", "-1"],
        ];
        for args in bad {
            let r = run_command(std::iter::once("smoothgrad").chain(args.clone()), &mut Vec::new());
            assert!(matches!(r, Err(CliError::Usage(_))), "{args:?}");
        }
    }

    #[test]
    fn heaviside_dgsi_estimate() {
        let out = csv_of(&[
            "estimate",
            "--problem",
            "heaviside",
            "--estimator",
            "dgsi",
            "--paths",
            "2",
            "--sigma",
            "0.25",
            "--at",
            "0",
        ]);
        let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "DGSI/Di/2");
        assert_eq!(row[1], "0.5");
        assert!((row[3].parse::<f64>().unwrap() - 1.595_769_121_605_730_7).abs() < 1e-12);
    }

    #[test]
    fn empty_table_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &DESCENT_HEADER, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,wall_ms,expectation,crisp_objective\n");
    }

    #[test]
    fn fidelity_of_baseline_against_itself_is_zero() {
        let p = Problem::by_name("heaviside").unwrap();
        let grid = FidelityGrid { count: 3, range: 1.0 };
        let r = fidelity_mae(&p, &Estimator::Pgo { samples: 500 }, 500, 0.25, 1, grid, &[0.0], 9).unwrap();
        assert_eq!(r.mae, vec![0.0]);
        assert!(r.baseline_se[0] > 0.0);
        assert!(fidelity_mae(&p, &Estimator::Pgo { samples: 500 }, 100, 0.25, 1, grid, &[0.0], 9).is_err());
        assert!(fidelity_mae(&p, &Estimator::Pgo { samples: 5 }, 100, 0.25, 2, grid, &[0.0], 9).is_err());
    }
}
