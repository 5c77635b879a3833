//! Monte Carlo gradient oracle (DGO).
//!
//! Each sample runs the program pathwise under forward-mode AD at a perturbed
//! input and logs every branch encounter. The gradient is the mean pathwise
//! gradient plus a path-weight term: per branch, the density of the condition
//! at zero (a Gaussian KDE) times the mean condition sensitivity gives the
//! derivative of the probability of each side, which is credited to the
//! samples on that side in proportion to their outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

#[cfg(doc)]
use crate::gauss::{kde_at, silverman_bandwidth};
use crate::gauss::{normal_pdf, silverman_rule, GaussError};
use crate::program::{check_dim, dual_run_into, BranchLog, GradResult, Program, ProgramError, SiteKey};

/// `u_s ~ N(0, I_n)` for sample `s`, shared by every sampling estimator.
pub fn perturbation(seed: u64, s: usize, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `x + σ ∘ u_s`.
pub fn perturbed_point(x: &[f64], sigma: &[f64], seed: u64, s: usize) -> Vec<f64> {
    let u = perturbation(seed, s, x.len());
    x.iter().zip(sigma).zip(u).map(|((x, s), u)| x + s * u).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

/// How a sample's path-weight derivative is chosen when it met several
/// branches sensitive to the same input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Assignment {
    /// Per dimension, only the most balanced branch the sample met.
    #[default]
    Balanced,
    /// Every branch the sample met, each normalized by the samples on its
    /// side: `Σ_B ∂w_B·(ȳ_{B,then} − ȳ_{B,else})`.
    AllBranches,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgoConfig {
    pub samples: usize,
    pub sigma: Vec<f64>,
    /// Half-width of the neighbourhood of zero whose condition sensitivities
    /// are averaged.
    pub delta: f64,
    pub bandwidth: Bandwidth,
    pub assignment: Assignment,
    /// Seed of the input perturbations.
    pub seed: u64,
    /// Seed of the program's own random stream, shared by all samples.
    pub program_seed: u64,
}

impl DgoConfig {
    pub fn new(samples: usize, sigma: Vec<f64>, seed: u64) -> Self {
        Self {
            samples,
            sigma,
            delta: f64::INFINITY,
            bandwidth: Bandwidth::Silverman,
            assignment: Assignment::Balanced,
            seed,
            program_seed: seed,
        }
    }
}

/// One perturbed pathwise run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub sample: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub pathwise_grad: Vec<f64>,
    pub records: BranchLog,
}

pub fn dgo_sample(program: &impl Program, x: &[f64], cfg: &DgoConfig, s: usize) -> Result<SampleRun, ProgramError> {
    dgo_sample_into(program, x, cfg, s, BranchLog::default())
}

/// [`dgo_sample`] logging into the recycled buffers of `log`.
pub fn dgo_sample_into(
    program: &impl Program,
    x: &[f64],
    cfg: &DgoConfig,
    s: usize,
    log: BranchLog,
) -> Result<SampleRun, ProgramError> {
    let xs = perturbed_point(x, &cfg.sigma, cfg.seed, s);
    let (y, pathwise_grad, records) = dual_run_into(program, &xs, cfg.program_seed, log)
        .map_err(|e| ProgramError::Sample { sample: s, source: Box::new(e) })?;
    Ok(SampleRun { sample: s, x: xs, y, pathwise_grad, records })
}

/// Aggregate view of one dynamic branch across all samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSummary {
    pub site: SiteKey,
    pub encounter: u32,
    pub records: usize,
    pub taken: usize,
    /// KDE of the condition at zero.
    pub density: f64,
    /// `∂w/∂x_k` of the `then` side, non-zero entries sorted by `k`.
    pub true_side: Vec<(u32, f64)>,
    /// `|c_neg − c_pos| / (c_neg + c_pos)` over `[−δ,0]` and `(0,δ]`.
    pub imbalance: f64,
    pub starved: bool,
}

/// One branch encounter of a sample: branch index and side, packed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step(u32);

impl Step {
    fn new(branch: u32, taken: bool) -> Self {
        Step(branch << 1 | u32::from(taken))
    }

    pub fn branch(self) -> usize {
        (self.0 >> 1) as usize
    }

    pub fn taken(self) -> bool {
        self.0 & 1 == 1
    }
}

/// Each sample's step sequence, stored flat, with the condition value of
/// every step alongside.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    steps: Vec<Step>,
    g: Vec<f64>,
    starts: Vec<usize>,
}

impl Paths {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn get(&self, i: usize) -> &[Step] {
        let end = self.starts.get(i + 1).copied().unwrap_or(self.steps.len());
        &self.steps[self.starts[i]..end]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Step]> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Running totals of one branch. Tangent sums are keyed by dimension and
/// accumulated in sample order, so the result does not depend on chunking.
#[derive(Debug, Clone)]
struct BranchAcc {
    site: SiteKey,
    encounter: u32,
    records: usize,
    taken: usize,
    near: usize,
    neg: usize,
    pos: usize,
    /// Sorted by dimension.
    tangent: Vec<(u32, f64)>,
}

/// Folds sample runs one at a time; only the compact paths and their
/// condition values are kept, never the per-record tangents.
#[derive(Debug, Clone)]
pub struct RunAccumulator {
    n: usize,
    delta: f64,
    ids: FxHashMap<(SiteKey, u32), u32>,
    branches: Vec<BranchAcc>,
    paths: Paths,
    ys: Vec<f64>,
    pathwise: Vec<f64>,
    /// Sample count the path buffer is sized for.
    expected: usize,
}

impl RunAccumulator {
    pub fn new(n: usize, cfg: &DgoConfig) -> Self {
        Self {
            n,
            delta: cfg.delta,
            ids: FxHashMap::default(),
            branches: Vec::new(),
            paths: Paths::default(),
            ys: Vec::new(),
            pathwise: vec![0.0; n],
            expected: cfg.samples,
        }
    }

    pub fn push(&mut self, run: &SampleRun) {
        self.ys.push(run.y);
        for (p, g) in self.pathwise.iter_mut().zip(&run.pathwise_grad) {
            *p += g;
        }
        if self.paths.starts.len() == 1 {
            // later samples take paths of similar length
            let more = self.paths.steps.len() * self.expected.saturating_sub(1);
            self.paths.steps.reserve(more);
            self.paths.g.reserve(more);
        }
        self.paths.starts.push(self.paths.steps.len());
        for r in run.records.records() {
            let branches = &mut self.branches;
            let id = *self.ids.entry((r.site, r.encounter)).or_insert_with(|| {
                branches.push(BranchAcc {
                    site: r.site,
                    encounter: r.encounter,
                    records: 0,
                    taken: 0,
                    near: 0,
                    neg: 0,
                    pos: 0,
                    tangent: Vec::new(),
                });
                (branches.len() - 1) as u32
            });
            let b = &mut self.branches[id as usize];
            b.records += 1;
            b.taken += usize::from(r.taken);
            if r.g.abs() < self.delta {
                b.near += 1;
                for &(k, d) in run.records.tangent(r) {
                    match b.tangent.binary_search_by_key(&k, |e| e.0) {
                        Ok(i) => b.tangent[i].1 += d,
                        Err(i) => b.tangent.insert(i, (k, d)),
                    }
                }
            }
            if r.g <= 0.0 && r.g >= -self.delta {
                b.neg += 1;
            } else if r.g > 0.0 && r.g <= self.delta {
                b.pos += 1;
            }
            self.paths.steps.push(Step::new(id, r.taken));
            self.paths.g.push(r.g);
        }
    }

    pub fn samples(&self) -> usize {
        self.ys.len()
    }

    /// Per-branch summaries in first-encounter order, plus the paths.
    pub fn summarize(&self, bandwidth: Bandwidth) -> Result<(Vec<BranchSummary>, &Paths), ProgramError> {
        let s = self.samples();
        let density = self.densities(bandwidth)?;
        let mut out = Vec::with_capacity(self.branches.len());
        for (b, &density) in self.branches.iter().zip(&density) {
            let true_side = weight_derivative(density, b.records, &b.tangent, b.near, s);
            let imbalance =
                if b.neg + b.pos == 0 { 1.0 } else { (b.neg as f64 - b.pos as f64).abs() / (b.neg + b.pos) as f64 };
            out.push(BranchSummary {
                site: b.site,
                encounter: b.encounter,
                records: b.records,
                taken: b.taken,
                density,
                true_side,
                imbalance,
                starved: b.near < 2,
            });
        }
        Ok((out, &self.paths))
    }

    /// Gaussian KDE at zero of each branch's condition values; zero for
    /// starved branches. Streams the flat value buffer once per moment
    /// instead of keeping a vector per branch, and adds in sample order, so
    /// it equals [`silverman_bandwidth`] and [`kde_at`] applied per branch.
    fn densities(&self, bandwidth: Bandwidth) -> Result<Vec<f64>, ProgramError> {
        let nb = self.branches.len();
        let steps = || self.paths.steps.iter().map(|s| s.branch()).zip(&self.paths.g);
        let h: Vec<f64> = match bandwidth {
            Bandwidth::Fixed(h) => vec![h; nb],
            Bandwidth::Silverman => {
                let mut sum = vec![0.0; nb];
                for (b, g) in steps() {
                    sum[b] += g;
                }
                let mean: Vec<f64> = sum.iter().zip(&self.branches).map(|(s, b)| s / b.records as f64).collect();
                let mut ss = vec![0.0; nb];
                for (b, g) in steps() {
                    ss[b] += (g - mean[b]) * (g - mean[b]);
                }
                ss.iter()
                    .zip(&self.branches)
                    .map(|(ss, b)| silverman_rule(b.records, (ss / (b.records as f64 - 1.0)).sqrt()))
                    .collect()
            }
        };
        let live: Vec<bool> = self.branches.iter().map(|b| b.near >= 2).collect();
        if let Some(&bad) = h.iter().zip(&live).find(|(h, l)| **l && !(**h > 0.0)).map(|(h, _)| h) {
            return Err(GaussError::Bandwidth(bad).into());
        }
        let inv_h: Vec<f64> = h.iter().map(|h| 1.0 / h).collect();
        let mut sum = vec![0.0; nb];
        for (b, g) in steps() {
            if live[b] {
                sum[b] += normal_pdf((0.0 - g) * inv_h[b]);
            }
        }
        Ok(sum
            .iter()
            .zip(&inv_h)
            .zip(&self.branches)
            .map(|((s, ih), b)| if b.near >= 2 { s * ih / b.records as f64 } else { 0.0 })
            .collect())
    }

    pub fn finish(&self, cfg: &DgoConfig) -> Result<(GradResult, DgoStats), ProgramError> {
        let n = self.n;
        let s = self.samples() as f64;
        let (branches, paths) = self.summarize(cfg.bandwidth)?;
        let assigned = match cfg.assignment {
            Assignment::Balanced => assign_weight_derivs(&branches, paths, n),
            Assignment::AllBranches => assign_all_branches(&branches, paths, n),
        };
        let mut expectation = 0.0;
        let mut weight_term = vec![0.0; n];
        for (y, a) in self.ys.iter().zip(assigned.chunks(n.max(1))) {
            expectation += y;
            for k in 0..n {
                weight_term[k] += y * a[k];
            }
        }
        let gradient = self.pathwise.iter().zip(&weight_term).map(|(p, w)| p / s + w).collect();
        let stats = DgoStats {
            branches: branches.len(),
            starved: branches.iter().filter(|b| b.starved).count(),
            records: paths.steps.len(),
        };
        Ok((GradResult { expectation: expectation / s, gradient }, stats))
    }
}

/// Path-weight derivative of the `then` side of one branch:
/// `−f̃_B(0) · (n_B/S) · mean ġ` over the `n_δ` records with `|g| < δ`, where
/// `f̃_B(0)` is `density`, `n_B` is `records` and `tangent_sum` is the sum of
/// the window's `ġ`, sorted by dimension.
///
/// Fewer than two records within `δ` gives an all-zero derivative.
pub fn weight_derivative(
    density: f64,
    records: usize,
    tangent_sum: &[(u32, f64)],
    near: usize,
    samples: usize,
) -> Vec<(u32, f64)> {
    if near < 2 {
        return Vec::new();
    }
    // Mean sensitivity over the window times the share of samples reaching
    // the branch; equals dividing the window sum by S when δ = ∞.
    let scale = -density / samples as f64 * records as f64 / near as f64;
    tangent_sum.iter().map(|&(k, d)| (k, d * scale)).filter(|e| e.1 != 0.0).collect()
}

/// Summaries and paths of a batch of runs, see [`RunAccumulator::summarize`].
pub fn summarize_branches(runs: &[SampleRun], cfg: &DgoConfig) -> Result<(Vec<BranchSummary>, Paths), ProgramError> {
    let mut acc = RunAccumulator::new(0, cfg);
    for r in runs {
        acc.push(r);
    }
    let (b, p) = acc.summarize(cfg.bandwidth)?;
    Ok((b, p.clone()))
}

/// For every sample, the path-weight derivative credited to it per input
/// dimension, dense and flattened (`n` entries per sample).
///
/// Per dimension the sample picks the most balanced branch it encountered
/// that has a non-zero entry for that dimension (first encountered wins
/// ties). It receives that branch's derivative for its side divided by the
/// number of samples that made the same choice, so each selected branch side
/// contributes its derivative times the mean output of its samples.
pub fn assign_weight_derivs(branches: &[BranchSummary], paths: &Paths, n: usize) -> Vec<f64> {
    let mut best: Vec<Option<(f64, u32, bool)>> = vec![None; n];
    let choices: Vec<Vec<(u32, u32, bool)>> = paths
        .iter()
        .map(|path| {
            best.iter_mut().for_each(|b| *b = None);
            for step in path {
                let (b, taken) = (step.branch() as u32, step.taken());
                let br = &branches[b as usize];
                for &(k, _) in &br.true_side {
                    let slot = &mut best[k as usize];
                    if slot.is_none_or(|(imb, _, _)| br.imbalance < imb) {
                        *slot = Some((br.imbalance, b, taken));
                    }
                }
            }
            best.iter().enumerate().filter_map(|(k, c)| c.map(|(_, b, t)| (k as u32, b, t))).collect()
        })
        .collect();
    let mut counts: FxHashMap<(u32, u32, bool), usize> = FxHashMap::default();
    for c in choices.iter().flatten() {
        *counts.entry(*c).or_insert(0) += 1;
    }
    let mut out = vec![0.0; n * paths.len()];
    for (row, cs) in out.chunks_mut(n.max(1)).zip(&choices) {
        for &(k, b, taken) in cs {
            let ts = &branches[b as usize].true_side;
            let d = ts.binary_search_by_key(&k, |e| e.0).map_or(0.0, |i| ts[i].1);
            let side = if taken { d } else { -d };
            row[k as usize] = side / counts[&(k, b, taken)] as f64;
        }
    }
    out
}

/// [`Assignment::AllBranches`]: every encountered branch credits its side's
/// derivative divided by the number of samples on that side. Flattened like
/// [`assign_weight_derivs`].
pub fn assign_all_branches(branches: &[BranchSummary], paths: &Paths, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * paths.len()];
    for (row, path) in out.chunks_mut(n.max(1)).zip(paths.iter()) {
        for step in path {
            let br = &branches[step.branch()];
            let (sign, count) = if step.taken() { (1.0, br.taken) } else { (-1.0, br.records - br.taken) };
            for &(k, d) in &br.true_side {
                row[k as usize] += sign * d / count as f64;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DgoStats {
    pub branches: usize,
    pub starved: usize,
    pub records: usize,
}

/// Combines sampled runs into the DGO estimate.
pub fn combine_runs(runs: &[SampleRun], n: usize, cfg: &DgoConfig) -> Result<(GradResult, DgoStats), ProgramError> {
    let mut acc = RunAccumulator::new(n, cfg);
    for r in runs {
        acc.push(r);
    }
    acc.finish(cfg)
}

/// Samples run in parallel within a chunk and are folded in sample order,
/// which bounds live branch logs to one chunk. Results do not depend on the
/// chunk size.
fn chunk_size() -> usize {
    (4 * rayon::current_num_threads()).max(16)
}

pub fn dgo_estimate(
    program: &impl Program,
    x: &[f64],
    cfg: &DgoConfig,
) -> Result<(GradResult, DgoStats), ProgramError> {
    check_dim(program, x)?;
    if cfg.samples < 2 {
        return Err(ProgramError::Config("DGO needs at least 2 samples".into()));
    }
    if cfg.sigma.len() != x.len() {
        return Err(ProgramError::Dimension { expected: x.len(), got: cfg.sigma.len() });
    }
    let mut acc = RunAccumulator::new(x.len(), cfg);
    let chunk = chunk_size();
    // logs of the previous chunk, cleared and refilled by the next one
    let mut spare: Vec<BranchLog> = Vec::new();
    for lo in (0..cfg.samples).step_by(chunk) {
        let hi = (lo + chunk).min(cfg.samples);
        let logs: Vec<BranchLog> = (lo..hi).map(|_| spare.pop().unwrap_or_default()).collect();
        let runs: Vec<SampleRun> = (lo..hi)
            .into_par_iter()
            .zip(logs)
            .map(|(s, log)| dgo_sample_into(program, x, cfg, s, log))
            .collect::<Result<_, _>>()?;
        for r in &runs {
            acc.push(r);
        }
        spare.extend(runs.into_iter().map(|r| r.records));
    }
    acc.finish(cfg)
}
