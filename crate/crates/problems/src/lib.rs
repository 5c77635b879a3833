//! Benchmark programs: a step function, a nested-branch micro-program with an
//! exact oracle, traffic signal timing, an AC controller, hotel booking
//! limits and SIR model calibration.

pub mod ac;
pub mod epidemics;
pub mod heaviside;
pub mod hotel;
pub mod synthetic;
pub mod traffic;

use std::fmt;

use rand_chacha::ChaCha8Rng;
use smoothgrad_core::{Exec, Program, ProgramError};

pub use ac::Ac;
pub use epidemics::Epidemics;
pub use heaviside::Heaviside;
pub use hotel::Hotel;
pub use synthetic::Synthetic;
pub use traffic::Traffic;

/// Any benchmark, selected by name.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Heaviside(Heaviside),
    Synthetic(Synthetic),
    Traffic(Traffic),
    Ac(Ac),
    Hotel(Hotel),
    Epidemics(Box<Epidemics>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownProblem(pub String);

impl fmt::Display for UnknownProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown problem {:?}; expected heaviside, synthetic<depth>, traffic<size>, ac, hotel or epidemics",
            self.0
        )
    }
}

impl std::error::Error for UnknownProblem {}

fn sized(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok().filter(|&n| n >= 1)
}

impl Problem {
    /// Default instance for `name`: `heaviside`, `synthetic<depth>`,
    /// `traffic<size>`, `ac`, `hotel`, `epidemics`.
    pub fn by_name(name: &str) -> Result<Self, UnknownProblem> {
        let lower = name.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "heaviside" => Problem::Heaviside(Heaviside),
            "ac" => Problem::Ac(Ac::default()),
            "hotel" => Problem::Hotel(Hotel::default()),
            "epidemics" => Problem::Epidemics(Box::new(Epidemics::with_default_reference(Default::default()))),
            _ => {
                if let Some(d) = sized(&lower, "synthetic") {
                    Problem::Synthetic(Synthetic::new(d))
                } else if let Some(d) = sized(&lower, "traffic") {
                    Problem::Traffic(Traffic::new(traffic::TrafficConfig::new(d)))
                } else {
                    return Err(UnknownProblem(name.to_string()));
                }
            }
        })
    }
}

macro_rules! dispatch {
    ($self:ident, $p:ident => $e:expr) => {
        match $self {
            Problem::Heaviside($p) => $e,
            Problem::Synthetic($p) => $e,
            Problem::Traffic($p) => $e,
            Problem::Ac($p) => $e,
            Problem::Hotel($p) => $e,
            Problem::Epidemics($p) => $e,
        }
    };
}

impl Program for Problem {
    fn name(&self) -> String {
        dispatch!(self, p => p.name())
    }

    fn dim(&self) -> usize {
        dispatch!(self, p => p.dim())
    }

    fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
        dispatch!(self, p => p.run(ex, x))
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        dispatch!(self, p => p.bounds())
    }

    fn stochastic(&self) -> bool {
        dispatch!(self, p => p.stochastic())
    }

    fn maximizes(&self) -> bool {
        dispatch!(self, p => p.maximizes())
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        dispatch!(self, p => p.initial_point(rng))
    }
}
