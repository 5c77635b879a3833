//! Grid of signalised intersections; the parameters are the signal offsets.
//!
//! Vehicles enter at the north and west borders and leave at the south and
//! east borders. Each intersection holds one queue per approach and releases
//! at most one vehicle per step from the approach that currently has green.
//! Signals alternate two steps of horizontal green with two steps of
//! vertical green; the phase is `sin(π/2·(t + o + ½)) ≥ 0`, so offsets that
//! differ by a multiple of 4 are equivalent. A passing vehicle turns with a
//! small probability given by a fixed, pregenerated schedule.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoothgrad_core::program::{CrispExec, SmoothReal};
use smoothgrad_core::{Cond, Exec, Program, ProgramError};

pub const PERIOD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficConfig {
    pub size: usize,
    pub steps: usize,
    pub turn_prob: f64,
    pub schedule_seed: u64,
}

impl TrafficConfig {
    /// `size × size` grid simulated for `size` steps.
    pub fn new(size: usize) -> Self {
        Self { size, steps: size, turn_prob: 0.05, schedule_seed: 0x7aff1c }
    }
}

/// Simulation state after the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState<R> {
    /// Horizontal (eastbound) queue per intersection, row-major.
    pub east: Vec<R>,
    /// Vertical (southbound) queue per intersection, row-major.
    pub south: Vec<R>,
    pub passed: R,
    pub exited: R,
    pub spawned: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Traffic {
    cfg: TrafficConfig,
    /// `turns[(t·n + k)·2 + dir]`: dir 0 eastbound, 1 southbound.
    turns: Vec<bool>,
}

impl Traffic {
    /// # Panics
    /// If the grid is empty.
    pub fn new(cfg: TrafficConfig) -> Self {
        assert!(cfg.size >= 1, "traffic grid needs at least one intersection");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule_seed);
        let n = cfg.size * cfg.size;
        let turns = (0..cfg.steps * n * 2).map(|_| rng.random::<f64>() < cfg.turn_prob).collect();
        Self { cfg, turns }
    }

    pub fn config(&self) -> &TrafficConfig {
        &self.cfg
    }

    /// Upper bound on the number of intersection passes.
    pub fn max_passes(&self) -> f64 {
        (self.cfg.size * self.cfg.steps * (2 * self.cfg.size - 1)) as f64
    }

    pub fn simulate<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<TrafficState<E::Real>, ProgramError> {
        let d = self.cfg.size;
        let n = d * d;
        let zero = || E::Real::from(0.0);
        let mut east: Vec<E::Real> = (0..n).map(|_| zero()).collect();
        let mut south: Vec<E::Real> = (0..n).map(|_| zero()).collect();
        let mut passed = zero();
        let mut exited = zero();
        let mut spawned = 0;
        for t in 0..self.cfg.steps {
            for j in 0..d {
                if (j + t) % 2 == 0 {
                    south[j] += 1.0;
                } else {
                    east[j * d] += 1.0;
                }
                spawned += 1;
            }
            let mut moves: Vec<(E::Real, E::Real)> = Vec::with_capacity(n);
            for k in 0..n {
                let phase = ((x[k].clone() + (t as f64 + 0.5)) * FRAC_PI_2).sin();
                let mut m = (zero(), zero());
                let (qe, qs) = (&east[k], &south[k]);
                ex.branch(
                    Cond::ge(phase, 0.0),
                    &mut m,
                    |ex, m| {
                        ex.when(Cond::ge(qe.clone(), 0.5), &mut m.0, |_, me| {
                            *me = 1.0.into();
                            Ok(())
                        })
                    },
                    |ex, m| {
                        ex.when(Cond::ge(qs.clone(), 0.5), &mut m.1, |_, ms| {
                            *ms = 1.0.into();
                            Ok(())
                        })
                    },
                )?;
                moves.push(m);
            }
            for (k, (me, ms)) in moves.into_iter().enumerate() {
                let (r, c) = (k / d, k % d);
                east[k] -= me.clone();
                south[k] -= ms.clone();
                passed += me.clone();
                passed += ms.clone();
                let base = (t * n + k) * 2;
                // eastbound continues east unless it turns south
                let dest_e =
                    if self.turns[base] { (r + 1 < d).then(|| (k + d, 1)) } else { (c + 1 < d).then(|| (k + 1, 0)) };
                let dest_s = if self.turns[base + 1] {
                    (c + 1 < d).then(|| (k + 1, 0))
                } else {
                    (r + 1 < d).then(|| (k + d, 1))
                };
                for (m, dest) in [(me, dest_e), (ms, dest_s)] {
                    match dest {
                        Some((j, 0)) => east[j] += m,
                        Some((j, _)) => south[j] += m,
                        None => exited += m,
                    }
                }
            }
        }
        Ok(TrafficState { east, south, passed, exited, spawned })
    }

    /// Crisp run exposing the final state.
    pub fn trace(&self, x: &[f64]) -> Result<TrafficState<f64>, ProgramError> {
        self.simulate(&mut CrispExec::new(0), x)
    }
}

impl Program for Traffic {
    fn name(&self) -> String {
        format!("traffic{}", self.cfg.size)
    }

    fn dim(&self) -> usize {
        self.cfg.size * self.cfg.size
    }

    /// Negated number of intersection passes.
    fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
        Ok(-self.simulate(ex, x)?.passed)
    }

    fn maximizes(&self) -> bool {
        true
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(0.0..PERIOD)).collect()
    }
}
