//! Neural on/off controller for a room air conditioner.
//!
//! A 5→10→2 tanh network reads the target, previous and current temperature
//! and the last two actions. The AC runs when the first output is positive,
//! at a power level given by the sigmoid of the second. Each episode draws
//! its temperatures, insulation and window openings from the run's rng.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use smoothgrad_core::program::SmoothReal;
use smoothgrad_core::{Cond, Exec, Program, ProgramError};

pub const INPUTS: usize = 5;
pub const HIDDEN: usize = 10;
pub const OUTPUTS: usize = 2;
/// `(5+1)·10 + (10+1)·2`.
pub const WEIGHTS: usize = (INPUTS + 1) * HIDDEN + (HIDDEN + 1) * OUTPUTS;

#[derive(Debug, Clone, PartialEq)]
pub struct AcConfig {
    pub steps: usize,
    pub window_prob: f64,
    /// Heat exchange rate while a window is open.
    pub window_kappa: f64,
    pub kappa: (f64, f64),
    pub start: (f64, f64),
    pub target: (f64, f64),
    pub outside: (f64, f64),
    /// When set, the episode starts at its target temperature.
    pub start_at_target: bool,
    /// Cooling per step at full power, in degrees.
    pub cool_max: f64,
    /// Loss per unit of power used per step.
    pub energy_penalty: f64,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            window_prob: 0.05,
            window_kappa: 0.5,
            kappa: (0.05, 0.2),
            start: (25.0, 35.0),
            target: (20.0, 24.0),
            outside: (28.0, 38.0),
            start_at_target: false,
            cool_max: 3.0,
            energy_penalty: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ac {
    pub cfg: AcConfig,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn scaled(t: f64) -> f64 {
    (t - 25.0) / 10.0
}

impl Ac {
    pub fn new(cfg: AcConfig) -> Self {
        Self { cfg }
    }
}

impl Program for Ac {
    fn name(&self) -> String {
        "ac".into()
    }

    fn dim(&self) -> usize {
        WEIGHTS
    }

    /// Mean squared tracking error plus the energy penalty.
    fn run<E: Exec>(&self, ex: &mut E, w: &[E::Real]) -> Result<E::Real, ProgramError> {
        let c = &self.cfg;
        let rng = ex.rng();
        let target = draw(rng, c.target);
        let start = if c.start_at_target { target } else { draw(rng, c.start) };
        let outside = draw(rng, c.outside);
        let kappa = draw(rng, c.kappa);
        let windows: Vec<bool> = (0..c.steps).map(|_| rng.random::<f64>() < c.window_prob).collect();

        let w1 = &w[..INPUTS * HIDDEN];
        let b1 = &w[INPUTS * HIDDEN..(INPUTS + 1) * HIDDEN];
        let w2 = &w[(INPUTS + 1) * HIDDEN..(INPUTS + 1) * HIDDEN + OUTPUTS * HIDDEN];
        let b2 = &w[(INPUTS + 1) * HIDDEN + OUTPUTS * HIDDEN..];

        let mut temp = E::Real::from(start);
        let mut prev = E::Real::from(start);
        let mut acts = [E::Real::from(0.0), E::Real::from(0.0)];
        let mut sq_err = E::Real::from(0.0);
        let mut energy = E::Real::from(0.0);
        for &window in &windows {
            let inputs = [
                E::Real::from(scaled(target)),
                (prev.clone() - 25.0) / 10.0,
                (temp.clone() - 25.0) / 10.0,
                acts[0].clone(),
                acts[1].clone(),
            ];
            let hidden: Vec<E::Real> = (0..HIDDEN)
                .map(|j| {
                    let mut s = b1[j].clone();
                    for (k, v) in inputs.iter().enumerate() {
                        s += w1[j * INPUTS + k].clone() * v;
                    }
                    s.tanh()
                })
                .collect();
            let out: Vec<E::Real> = (0..OUTPUTS)
                .map(|m| {
                    let mut s = b2[m].clone();
                    for (j, h) in hidden.iter().enumerate() {
                        s += w2[m * HIDDEN + j].clone() * h;
                    }
                    s
                })
                .collect();
            let mut on = (E::Real::from(0.0), E::Real::from(0.0));
            let level = &out[1];
            ex.when(Cond::gt(out[0].clone(), 0.0), &mut on, |_, (power, act)| {
                *power = level.sigmoid();
                *act = 1.0.into();
                Ok(())
            })?;
            let k = if window { c.window_kappa } else { kappa };
            let next = temp.clone() + (E::Real::from(outside) - &temp) * k - on.0.clone() * c.cool_max;
            sq_err += (next.clone() - target).square();
            energy += on.0;
            prev = std::mem::replace(&mut temp, next);
            acts = [on.1, acts[0].clone()];
        }
        Ok(sq_err / c.steps.max(1) as f64 + energy * c.energy_penalty)
    }

    fn stochastic(&self) -> bool {
        true
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = Normal::new(0.0, 0.3).expect("valid normal");
        (0..WEIGHTS).map(|_| n.sample(rng)).collect()
    }
}
