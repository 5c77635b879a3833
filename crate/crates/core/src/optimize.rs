//! Adam descent driven by any [`Estimator`], and a grid sweep over
//! smoothing factor, learning rate and estimator.
//!
//! Objectives are minimized. Every record carries the crisp objective at the
//! current parameters, evaluated with a fixed seed so that records are
//! comparable across estimators.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::estimator::{derive_seed, Estimator};
use crate::program::{crisp_run, Program, ProgramError};

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizeError {
    Dimension { expected: usize, got: usize },
    NonFinite { index: usize, value: f64 },
    NoBudget,
    EmptyGrid,
    Program(ProgramError),
}

impl fmt::Display for OptimizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizeError::Dimension { expected, got } => {
                write!(f, "gradient has {got} entries, parameters have {expected}")
            }
            OptimizeError::NonFinite { index, value } => {
                write!(f, "gradient entry {index} is {value}; step rejected")
            }
            OptimizeError::NoBudget => write!(f, "descent needs a step or wall-clock budget"),
            OptimizeError::EmptyGrid => write!(f, "sweep grid is empty"),
            OptimizeError::Program(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for OptimizeError {}

impl From<ProgramError> for OptimizeError {
    fn from(e: ProgramError) -> Self {
        OptimizeError::Program(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected update. A rejected step leaves all state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), OptimizeError> {
        if grad.len() != self.m.len() || params.len() != self.m.len() {
            let got = if grad.len() != self.m.len() { grad.len() } else { params.len() };
            return Err(OptimizeError::Dimension { expected: self.m.len(), got });
        }
        if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(OptimizeError::NonFinite { index, value });
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig {
    pub sigma: f64,
    pub lr: f64,
    pub steps: Option<usize>,
    pub wall_seconds: Option<f64>,
    /// Gradient estimates averaged per step.
    pub microreps: usize,
    /// Seed of the crisp objective evaluation.
    pub eval_seed: u64,
}

impl DescentConfig {
    pub fn new(sigma: f64, lr: f64, steps: usize) -> Self {
        Self { sigma, lr, steps: Some(steps), wall_seconds: None, microreps: 1, eval_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentRecord {
    pub step: usize,
    pub wall_ms: f64,
    pub expectation: f64,
    pub crisp_objective: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    /// One record per gradient estimate, taken before its update.
    pub records: Vec<DescentRecord>,
    pub final_params: Vec<f64>,
    /// Crisp objective after the last update.
    pub final_objective: f64,
    /// Set when an estimate or step failed; records stay valid up to it.
    pub error: Option<OptimizeError>,
}

fn clamp(p: &impl Program, x: &mut [f64]) {
    if let Some((lo, hi)) = p.bounds() {
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

fn averaged(
    p: &impl Program,
    est: &Estimator,
    x: &[f64],
    cfg: &DescentConfig,
    seed: u64,
    step: usize,
) -> Result<(f64, Vec<f64>), ProgramError> {
    let reps = cfg.microreps.max(1);
    let mut e = 0.0;
    let mut g = vec![0.0; x.len()];
    for r in 0..reps {
        let res = est.estimate(p, x, cfg.sigma, derive_seed(seed, (step * reps + r) as u64))?;
        e += res.expectation;
        for (a, b) in g.iter_mut().zip(&res.gradient) {
            *a += b;
        }
    }
    let n = reps as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok((e / n, g))
}

/// Runs Adam from `x0` until the step or wall-clock budget is spent. The
/// clock is only checked between steps. With `steps = 0` the initial point
/// is recorded and left unchanged.
pub fn descend(
    p: &impl Program,
    est: &Estimator,
    cfg: &DescentConfig,
    x0: &[f64],
    seed: u64,
) -> Result<Descent, OptimizeError> {
    if cfg.steps.is_none() && cfg.wall_seconds.is_none() {
        return Err(OptimizeError::NoBudget);
    }
    let mut x = x0.to_vec();
    clamp(p, &mut x);
    let mut adam = Adam::new(x.len(), cfg.lr);
    let budget = cfg.wall_seconds.map(Duration::from_secs_f64);
    let start = Instant::now();
    let mut records = Vec::new();
    let mut error = None;
    let mut step = 0;
    loop {
        let crisp = crisp_run(p, &x, cfg.eval_seed)?;
        let est_result = averaged(p, est, &x, cfg, seed, step);
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let (expectation, grad) = match est_result {
            Ok(v) => v,
            Err(e) => {
                error = Some(e.into());
                break;
            }
        };
        records.push(DescentRecord { step, wall_ms, expectation, crisp_objective: crisp, params: x.clone() });
        if cfg.steps == Some(0) {
            break;
        }
        if let Err(e) = adam.step(&mut x, &grad) {
            error = Some(e);
            break;
        }
        clamp(p, &mut x);
        step += 1;
        if cfg.steps.is_some_and(|s| step >= s) || budget.is_some_and(|b| start.elapsed() >= b) {
            break;
        }
    }
    let final_objective = crisp_run(p, &x, cfg.eval_seed)?;
    Ok(Descent { records, final_params: x, final_objective, error })
}

/// Cross product of `σ0·{½,1,2}`, `η0·{½,1,2}` and the given estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub sigmas: Vec<f64>,
    pub lrs: Vec<f64>,
    pub estimators: Vec<Estimator>,
}

impl SweepGrid {
    pub fn around(sigma0: f64, lr0: f64, estimators: Vec<Estimator>) -> Self {
        let f = [0.5, 1.0, 2.0];
        Self { sigmas: f.iter().map(|m| m * sigma0).collect(), lrs: f.iter().map(|m| m * lr0).collect(), estimators }
    }

    /// Cells in estimator-major, then σ, then η order.
    pub fn cells(&self) -> Vec<(Estimator, f64, f64)> {
        let mut out = Vec::new();
        for e in &self.estimators {
            for &s in &self.sigmas {
                for &l in &self.lrs {
                    out.push((*e, s, l));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub estimator: Estimator,
    pub sigma: f64,
    pub lr: f64,
    /// Final crisp objective per macroreplication.
    pub finals: Vec<f64>,
    pub mean_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best: usize,
}

/// Starting point of macroreplication `rep`, shared by every cell.
pub fn starting_point(p: &impl Program, seed: u64, rep: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rep as u64));
    let mut x = p.initial_point(&mut rng);
    clamp(p, &mut x);
    x
}

/// Runs `macroreps` descents per grid cell concurrently and reports the
/// cell with the lowest mean final crisp objective.
pub fn sweep(
    p: &impl Program,
    grid: &SweepGrid,
    macroreps: usize,
    budget: &DescentConfig,
    seed: u64,
) -> Result<SweepResult, OptimizeError> {
    let cells = grid.cells();
    if cells.is_empty() || macroreps == 0 {
        return Err(OptimizeError::EmptyGrid);
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..macroreps).map(move |r| (c, r))).collect();
    let finals: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let (est, sigma, lr) = cells[c];
            let cfg = DescentConfig { sigma, lr, ..budget.clone() };
            let x0 = starting_point(p, seed, r);
            descend(p, &est, &cfg, &x0, derive_seed(seed, 1_000_000 + r as u64)).map(|d| d.final_objective)
        })
        .collect::<Result<_, _>>()?;
    let out: Vec<SweepCell> = cells
        .iter()
        .enumerate()
        .map(|(c, &(estimator, sigma, lr))| {
            let f = finals[c * macroreps..(c + 1) * macroreps].to_vec();
            let mean_final = f.iter().sum::<f64>() / f.len() as f64;
            SweepCell { estimator, sigma, lr, finals: f, mean_final }
        })
        .collect();
    let best = (0..out.len())
        .min_by(|&a, &b| out[a].mean_final.total_cmp(&out[b].mean_final).then(a.cmp(&b)))
        .expect("non-empty grid");
    Ok(SweepResult { cells: out, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{Exec, SmoothReal};

    struct Bowl;

    impl Program for Bowl {
        fn name(&self) -> String {
            "bowl".into()
        }
        fn dim(&self) -> usize {
            1
        }
        fn run<E: Exec>(&self, _: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
            Ok((x[0].clone() - 3.0).square())
        }
        fn bounds(&self) -> Option<(f64, f64)> {
            Some((-10.0, 10.0))
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let mut a = Adam::new(2, 0.1);
        let mut x = [1.0, 2.0];
        a.step(&mut x, &[0.0, 0.0]).unwrap();
        assert_eq!(x, [1.0, 2.0]);
        assert_eq!(a.t, 1);
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut a = Adam::new(3, 0.1);
        let mut x = [0.0; 3];
        a.step(&mut x, &[5.0, -0.001, 100.0]).unwrap();
        for (xi, s) in x.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((xi - 0.1 * s).abs() < 1e-6, "{x:?}");
        }
        let before = x;
        a.step(&mut x, &[5.0, -0.001, 100.0]).unwrap();
        assert!(x[0] < before[0] && x[1] > before[1]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut a = Adam::new(2, 0.1);
        let mut x = [0.0; 2];
        let r = a.step(&mut x, &[1.0, f64::NAN]);
        assert!(matches!(r, Err(OptimizeError::NonFinite { index: 1, .. })));
        assert_eq!((a.t, x), (0, [0.0; 2]));
    }

    #[test]
    fn descend_converges_on_bowl() {
        let d = descend(&Bowl, &Estimator::dgo(100), &DescentConfig::new(0.1, 0.1, 200), &[0.0], 1).unwrap();
        assert_eq!(d.records.len(), 200);
        assert!((d.final_params[0] - 3.0).abs() < 0.1, "{:?}", d.final_params);
        assert!(d.error.is_none());
    }

    #[test]
    fn zero_steps_records_start() {
        let d = descend(&Bowl, &Estimator::Crisp, &DescentConfig::new(0.1, 0.1, 0), &[1.0], 1).unwrap();
        assert_eq!(d.records.len(), 1);
        assert_eq!(d.records[0].crisp_objective, 4.0);
        assert_eq!(d.final_params, vec![1.0]);
    }

    #[test]
    fn clamped_to_bounds() {
        let d = descend(&Bowl, &Estimator::Crisp, &DescentConfig::new(0.0, 5.0, 20), &[50.0], 1).unwrap();
        assert!(d.records.iter().all(|r| r.params[0] >= -10.0 && r.params[0] <= 10.0));
    }

    #[test]
    fn sweep_counts_and_determinism() {
        let grid = SweepGrid::around(0.1, 0.1, vec![Estimator::Crisp, Estimator::Crisp]);
        assert_eq!(grid.cells().len(), 18);
        let r = sweep(&Bowl, &grid, 2, &DescentConfig::new(0.1, 0.1, 10), 4).unwrap();
        assert_eq!(r.cells.len(), 18);
        for i in 0..9 {
            assert_eq!(r.cells[i].finals, r.cells[i + 9].finals);
        }
        assert!(r.cells[r.best].mean_final <= r.cells.iter().map(|c| c.mean_final).fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn budget_required() {
        let cfg = DescentConfig { steps: None, ..DescentConfig::new(0.1, 0.1, 1) };
        assert_eq!(descend(&Bowl, &Estimator::Crisp, &cfg, &[0.0], 0), Err(OptimizeError::NoBudget));
    }
}
