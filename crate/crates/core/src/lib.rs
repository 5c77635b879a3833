//! Smoothed gradient estimation for imperative programs whose control flow
//! depends on their inputs.
//!
//! Programs are written once against [`program::Exec`] and can then be run
//! crisply, with pathwise forward-mode AD, under smooth interpretation with
//! differentiable path weights ([`si`]), or sampled by the Monte Carlo oracle
//! in [`dgo`]. [`baseline`] holds the sampling baselines and [`optimize`]
//! drives Adam over any of them.

pub mod ad;
pub mod baseline;
pub mod dgo;
pub mod estimator;
pub mod gauss;
pub mod optimize;
pub mod program;
pub mod si;

pub use ad::{AdContext, AdError, DualReal};
pub use estimator::Estimator;
pub use program::{Cond, Exec, GradResult, Program, ProgramError, Rel, SmoothReal};
