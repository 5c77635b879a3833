//! Agent-based SIR model on a random geometric graph, calibrated against a
//! reference trajectory of per-location state counts.
//!
//! Parameters: recovery rate, initial infection probability, then one
//! infection probability per location. All randomness (homes, moves,
//! uniforms, recovery delays) is drawn up front from the run's rng; the
//! parameters only enter through branch conditions of the form
//! `u < probability`, so discrete outcomes depend on them through control
//! flow.

use std::fmt;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use smoothgrad_core::program::{CrispExec, SmoothReal};
use smoothgrad_core::{Cond, Exec, Program, ProgramError};

#[derive(Debug, Clone, PartialEq)]
pub struct EpidemicsConfig {
    pub agents: usize,
    pub steps: usize,
    pub nodes: usize,
    /// Connection radius in the unit square.
    pub radius: f64,
    pub graph_seed: u64,
    /// Probability that an agent moves to a random neighbouring location.
    pub move_prob: f64,
    /// Seed of homes, moves, uniforms and delays. When unset they come from
    /// the run's rng and the model is stochastic.
    pub world_seed: Option<u64>,
}

impl Default for EpidemicsConfig {
    fn default() -> Self {
        Self {
            agents: 200,
            steps: 25,
            nodes: 100,
            // (nodes − 1)·π·r² = 7 expected neighbours, ignoring the border
            radius: (7.0 / (99.0 * std::f64::consts::PI)).sqrt(),
            graph_seed: 0x5eed,
            move_prob: 0.5,
            world_seed: Some(REFERENCE_SEED),
        }
    }
}

impl EpidemicsConfig {
    pub fn dim(&self) -> usize {
        self.nodes + 2
    }
}

/// Undirected random geometric graph as adjacency lists.
pub fn random_geometric_graph(nodes: usize, radius: f64, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<(f64, f64)> = (0..nodes).map(|_| (rng.random(), rng.random())).collect();
    let mut adj = vec![Vec::new(); nodes];
    for i in 0..nodes {
        for j in i + 1..nodes {
            let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
            if dx * dx + dy * dy < radius * radius {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

/// Parameters used to generate the default reference trajectory.
pub fn ground_truth(cfg: &EpidemicsConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.graph_seed ^ 0x9e37_79b9);
    let mut x = vec![0.12, 0.1];
    x.extend((0..cfg.nodes).map(|_| rng.random_range(0.1..0.4)));
    x
}

pub const REFERENCE_SEED: u64 = 2024;

/// `[s, i, r]` count per step and location, indexed `step·nodes + location`.
pub type Counts = Vec<[f64; 3]>;

#[derive(Debug)]
pub enum ReferenceError {
    Io(io::Error),
    Csv(csv::Error),
    Parse { line: u64 },
    Shape { expected: usize, got: usize },
}

impl fmt::Display for ReferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferenceError::Io(e) => write!(f, "reference file: {e}"),
            ReferenceError::Csv(e) => write!(f, "reference file: {e}"),
            ReferenceError::Parse { line } => write!(f, "reference file line {line}: malformed row"),
            ReferenceError::Shape { expected, got } => {
                write!(f, "reference has {got} step/location cells, model needs {expected}")
            }
        }
    }
}

impl std::error::Error for ReferenceError {}

impl From<csv::Error> for ReferenceError {
    fn from(e: csv::Error) -> Self {
        ReferenceError::Csv(e)
    }
}

impl From<io::Error> for ReferenceError {
    fn from(e: io::Error) -> Self {
        ReferenceError::Io(e)
    }
}

impl From<ReferenceError> for ProgramError {
    fn from(e: ReferenceError) -> Self {
        ProgramError::Config(e.to_string())
    }
}

pub fn write_reference<W: io::Write>(counts: &Counts, nodes: usize, w: W) -> Result<(), ReferenceError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "location", "s", "i", "r"])?;
    for (k, c) in counts.iter().enumerate() {
        wr.write_record([
            (k / nodes).to_string(),
            (k % nodes).to_string(),
            c[0].to_string(),
            c[1].to_string(),
            c[2].to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads `step,location,s,i,r` rows in any order into a dense table.
pub fn read_reference<R: io::Read>(r: R, cfg: &EpidemicsConfig) -> Result<Counts, ReferenceError> {
    let expected = cfg.steps * cfg.nodes;
    let mut out = vec![[f64::NAN; 3]; expected];
    let mut rd = csv::Reader::from_reader(r);
    let mut seen = 0;
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| rec.get(i).and_then(|s| s.trim().parse::<f64>().ok()).ok_or(ReferenceError::Parse { line });
        let (step, loc) = (f(0)?, f(1)?);
        if step < 0.0 || loc < 0.0 || step as usize >= cfg.steps || loc as usize >= cfg.nodes {
            return Err(ReferenceError::Shape { expected, got: expected + 1 });
        }
        out[step as usize * cfg.nodes + loc as usize] = [f(2)?, f(3)?, f(4)?];
        seen += 1;
    }
    if seen != expected || out.iter().any(|c| c[0].is_nan()) {
        return Err(ReferenceError::Shape { expected, got: seen });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epidemics {
    cfg: EpidemicsConfig,
    graph: Vec<Vec<usize>>,
    reference: Counts,
}

/// Per-run draws shared by every back-end.
struct World {
    /// `loc[t·agents + a]`.
    loc: Vec<usize>,
    init_u: Vec<f64>,
    /// `u[t·agents + a]`.
    u: Vec<f64>,
    delay: Vec<f64>,
}

impl Epidemics {
    /// # Errors
    /// If the reference does not have one row per step and location.
    pub fn new(cfg: EpidemicsConfig, reference: Counts) -> Result<Self, ReferenceError> {
        if reference.len() != cfg.steps * cfg.nodes {
            return Err(ReferenceError::Shape { expected: cfg.steps * cfg.nodes, got: reference.len() });
        }
        let graph = random_geometric_graph(cfg.nodes, cfg.radius, cfg.graph_seed);
        Ok(Self { cfg, graph, reference })
    }

    /// Model fitted to a trajectory generated from [`ground_truth`] in the
    /// world of [`REFERENCE_SEED`].
    pub fn with_default_reference(cfg: EpidemicsConfig) -> Self {
        let reference =
            make_reference(&cfg, &ground_truth(&cfg), REFERENCE_SEED).expect("ground truth has the model's dimension");
        Self::new(cfg, reference).expect("generated reference has the model's shape")
    }

    pub fn config(&self) -> &EpidemicsConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &[Vec<usize>] {
        &self.graph
    }

    pub fn reference(&self) -> &Counts {
        &self.reference
    }

    fn world(&self, rng: &mut ChaCha8Rng) -> World {
        let (n, steps) = (self.cfg.agents, self.cfg.steps);
        let mut loc = Vec::with_capacity(n * steps);
        loc.extend((0..n).map(|_| rng.random_range(0..self.cfg.nodes)));
        for t in 1..steps {
            for a in 0..n {
                let here = loc[(t - 1) * n + a];
                let nb = &self.graph[here];
                let next = if !nb.is_empty() && rng.random::<f64>() < self.cfg.move_prob {
                    nb[rng.random_range(0..nb.len())]
                } else {
                    here
                };
                loc.push(next);
            }
        }
        let init_u = (0..n).map(|_| rng.random()).collect();
        let u = (0..n * steps).map(|_| rng.random()).collect();
        let delay = (0..n).map(|_| Exp1.sample(rng)).collect();
        World { loc, init_u, u, delay }
    }

    /// Per-step, per-location `[s, i, r]` counts.
    pub fn simulate<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<Vec<[E::Real; 3]>, ProgramError> {
        let c = &self.cfg;
        let (n, nodes) = (c.agents, c.nodes);
        let w = match c.world_seed {
            Some(seed) => self.world(&mut ChaCha8Rng::seed_from_u64(seed)),
            None => self.world(ex.rng()),
        };
        let zero = || E::Real::from(0.0);
        let one = || E::Real::from(1.0);
        let recovery = &x[0];
        // per agent: (susceptible, infected, recovered, infection time)
        let mut agents: Vec<(E::Real, E::Real, E::Real, E::Real)> = Vec::with_capacity(n);
        for a in 0..n {
            let mut st = (one(), zero(), zero(), zero());
            ex.when(Cond::lt(w.init_u[a], x[1].clone()), &mut st, |_, st| {
                st.0 = zero();
                st.1 = one();
                Ok(())
            })?;
            agents.push(st);
        }
        let mut out: Vec<[E::Real; 3]> = Vec::with_capacity(c.steps * nodes);
        for t in 0..c.steps {
            let loc = &w.loc[t * n..(t + 1) * n];
            if t > 0 {
                let now = t as f64;
                for (a, st) in agents.iter_mut().enumerate() {
                    let delay = w.delay[a];
                    ex.when(Cond::ge(st.1.clone(), 0.5), st, |ex, st| {
                        let elapsed = (E::Real::from(now) - &st.3) * recovery;
                        ex.when(Cond::ge(elapsed, delay), st, |_, st| {
                            st.1 = zero();
                            st.2 = one();
                            Ok(())
                        })
                    })?;
                }
                let mut infected: Vec<E::Real> = (0..nodes).map(|_| zero()).collect();
                let mut present = vec![0usize; nodes];
                for (a, st) in agents.iter().enumerate() {
                    infected[loc[a]] += st.1.clone();
                    present[loc[a]] += 1;
                }
                // P(at least one of k contacts transmits) = 1 − (1 − p)^k
                let floor = E::Real::from(1e-12);
                let prob: Vec<Option<E::Real>> = (0..nodes)
                    .map(|l| {
                        (present[l] > 1).then(|| {
                            let keep = (one() - &x[2 + l]).max(&floor);
                            one() - (keep.ln() * &infected[l]).exp()
                        })
                    })
                    .collect();
                for (a, st) in agents.iter_mut().enumerate() {
                    let Some(p) = &prob[loc[a]] else { continue };
                    let u = w.u[t * n + a];
                    ex.when(Cond::ge(st.0.clone(), 0.5), st, |ex, st| {
                        ex.when(Cond::lt(u, p.clone()), st, |_, st| {
                            st.0 = zero();
                            st.1 = one();
                            st.3 = now.into();
                            Ok(())
                        })
                    })?;
                }
            }
            let mut counts: Vec<[E::Real; 3]> = (0..nodes).map(|_| [zero(), zero(), zero()]).collect();
            for (a, st) in agents.iter().enumerate() {
                let cell = &mut counts[loc[a]];
                cell[0] += st.0.clone();
                cell[1] += st.1.clone();
                cell[2] += st.2.clone();
            }
            out.extend(counts);
        }
        Ok(out)
    }
}

/// Crisp trajectory at `params` in the world drawn from `seed`.
pub fn make_reference(cfg: &EpidemicsConfig, params: &[f64], seed: u64) -> Result<Counts, ProgramError> {
    let model = Epidemics {
        cfg: EpidemicsConfig { world_seed: Some(seed), ..cfg.clone() },
        graph: random_geometric_graph(cfg.nodes, cfg.radius, cfg.graph_seed),
        reference: Vec::new(),
    };
    if params.len() != cfg.dim() {
        return Err(ProgramError::Dimension { expected: cfg.dim(), got: params.len() });
    }
    model.simulate(&mut CrispExec::new(seed), params)
}

impl Program for Epidemics {
    fn name(&self) -> String {
        "epidemics".into()
    }

    fn dim(&self) -> usize {
        self.cfg.dim()
    }

    /// Mean squared error of the state counts over steps, locations and
    /// states.
    fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
        let counts = self.simulate(ex, x)?;
        let mut se = E::Real::from(0.0);
        for (cell, r) in counts.iter().zip(&self.reference) {
            for k in 0..3 {
                se += (cell[k].clone() - r[k]).square();
            }
        }
        Ok(se / (3 * self.reference.len()) as f64)
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }

    fn stochastic(&self) -> bool {
        self.cfg.world_seed.is_none()
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(0.0..0.5)).collect()
    }
}
