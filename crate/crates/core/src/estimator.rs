//! One entry point over every gradient estimator.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baseline;
use crate::dgo::{dgo_estimate, Assignment, DgoConfig};
use crate::program::{check_dim, dual_run, GradResult, Program, ProgramError};
use crate::si::{si_execute, RestrictConfig, SiConfig, Strategy, VarianceMode};

/// Derives an independent seed for a named purpose from a base seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(tag);
    rng.next_u64()
}

const PERTURBATION_STREAM: u64 = 1;
const PROGRAM_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Pathwise gradient of one unperturbed run.
    Crisp,
    Ipa {
        samples: usize,
    },
    Dgsi {
        paths: usize,
        strategy: Strategy,
        threshold: f64,
        variance: VarianceMode,
    },
    Dgo {
        samples: usize,
        delta: f64,
        assignment: Assignment,
    },
    Pgo {
        samples: usize,
    },
    Rf {
        samples: usize,
    },
}

impl Estimator {
    pub fn dgsi(paths: usize, strategy: Strategy) -> Self {
        Estimator::Dgsi {
            paths,
            strategy,
            threshold: crate::si::DEFAULT_WEIGHT_THRESHOLD,
            variance: VarianceMode::Independent,
        }
    }

    pub fn dgo(samples: usize) -> Self {
        Estimator::Dgo { samples, delta: f64::INFINITY, assignment: Assignment::Balanced }
    }

    /// Samples or tracked paths; 1 for the crisp estimator.
    pub fn size(&self) -> usize {
        match *self {
            Estimator::Crisp => 1,
            Estimator::Dgsi { paths, .. } => paths,
            Estimator::Ipa { samples }
            | Estimator::Dgo { samples, .. }
            | Estimator::Pgo { samples }
            | Estimator::Rf { samples } => samples,
        }
    }

    /// Estimates the smoothed objective and its gradient at `x` with kernel
    /// width `sigma` in every dimension.
    ///
    /// Equal seeds give every sampling estimator the same perturbations and
    /// the program the same random stream.
    pub fn estimate(&self, p: &impl Program, x: &[f64], sigma: f64, seed: u64) -> Result<GradResult, ProgramError> {
        check_dim(p, x)?;
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(ProgramError::Config(format!("smoothing factor must be finite and >= 0, got {sigma}")));
        }
        let ps = derive_seed(seed, PERTURBATION_STREAM);
        let prog = derive_seed(seed, PROGRAM_STREAM);
        let sig = vec![sigma; x.len()];
        match *self {
            Estimator::Crisp => {
                let (y, gradient, _) = dual_run(p, x, prog, false)?;
                Ok(GradResult { expectation: y, gradient })
            }
            Estimator::Ipa { samples } => baseline::ipa(p, x, &sig, samples, ps, prog),
            Estimator::Pgo { samples } => {
                require_positive(sigma, "PGO")?;
                baseline::pgo(p, x, &sig, samples, ps, prog)
            }
            Estimator::Rf { samples } => {
                require_positive(sigma, "RF")?;
                baseline::rf(p, x, &sig, samples, ps, prog)
            }
            Estimator::Dgo { samples, delta, assignment } => {
                let cfg = DgoConfig { delta, assignment, program_seed: prog, ..DgoConfig::new(samples, sig, ps) };
                dgo_estimate(p, x, &cfg).map(|(r, _)| r)
            }
            Estimator::Dgsi { paths, strategy, threshold, variance } => {
                let mut cfg = SiConfig::new(RestrictConfig::new(paths, strategy).with_threshold(threshold));
                cfg.variance = variance;
                si_execute(p, x, &sig, cfg, prog).map(|(r, _)| r)
            }
        }
    }
}

fn require_positive(sigma: f64, name: &str) -> Result<(), ProgramError> {
    if sigma > 0.0 {
        Ok(())
    } else {
        Err(ProgramError::Config(format!("{name} needs a positive smoothing factor")))
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Crisp => write!(f, "Crisp"),
            Estimator::Ipa { samples } => write!(f, "IPA/{samples}"),
            Estimator::Dgsi { paths, strategy, .. } => write!(f, "DGSI/{strategy}/{paths}"),
            Estimator::Dgo { samples, assignment: Assignment::Balanced, .. } => write!(f, "DGO/{samples}"),
            Estimator::Dgo { samples, assignment: Assignment::AllBranches, .. } => write!(f, "DGO-AB/{samples}"),
            Estimator::Pgo { samples } => write!(f, "PGO/{samples}"),
            Estimator::Rf { samples } => write!(f, "RF/{samples}"),
        }
    }
}
