//! Sampling baselines that need no smoothing of control flow.
//!
//! All estimators draw the same perturbations as [`crate::dgo`] for equal
//! seeds, so their errors are directly comparable sample for sample.

use rayon::prelude::*;

use crate::dgo::{perturbation, perturbed_point};
use crate::program::{check_dim, dual_run, GradResult, Program, ProgramError};

pub use crate::program::crisp_run;

fn validate(p: &impl Program, x: &[f64], sigma: &[f64], samples: usize) -> Result<(), ProgramError> {
    check_dim(p, x)?;
    if sigma.len() != x.len() {
        return Err(ProgramError::Dimension { expected: x.len(), got: sigma.len() });
    }
    if samples == 0 {
        return Err(ProgramError::Config("at least one sample is required".into()));
    }
    Ok(())
}

fn wrap(s: usize) -> impl Fn(ProgramError) -> ProgramError {
    move |e| ProgramError::Sample { sample: s, source: Box::new(e) }
}

/// Mean pathwise AD gradient over perturbed inputs. Blind to the effect of
/// inputs on which branch is taken.
pub fn ipa(
    p: &impl Program,
    x: &[f64],
    sigma: &[f64],
    samples: usize,
    seed: u64,
    program_seed: u64,
) -> Result<GradResult, ProgramError> {
    validate(p, x, sigma, samples)?;
    let runs: Vec<(f64, Vec<f64>)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let xs = perturbed_point(x, sigma, seed, s);
            dual_run(p, &xs, program_seed, false).map(|(y, g, _)| (y, g)).map_err(wrap(s))
        })
        .collect::<Result<_, _>>()?;
    let n = samples as f64;
    let mut gradient = vec![0.0; x.len()];
    let mut expectation = 0.0;
    for (y, g) in &runs {
        expectation += y;
        for (acc, gk) in gradient.iter_mut().zip(g) {
            *acc += gk;
        }
    }
    gradient.iter_mut().for_each(|g| *g /= n);
    Ok(GradResult { expectation: expectation / n, gradient })
}

/// `(1/S) Σ (P(x + σ∘u_s) − c) / σ_k · u_{s,k}` and the standard error of
/// each component; dimensions with `σ_k = 0` get zero.
fn score_function(
    p: &impl Program,
    x: &[f64],
    sigma: &[f64],
    samples: usize,
    seed: u64,
    program_seed: u64,
    centre: Option<f64>,
) -> Result<(GradResult, Vec<f64>), ProgramError> {
    validate(p, x, sigma, samples)?;
    let runs: Vec<(f64, Vec<f64>)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let u = perturbation(seed, s, x.len());
            let xs: Vec<f64> = x.iter().zip(sigma).zip(&u).map(|((x, s), u)| x + s * u).collect();
            crisp_run(p, &xs, program_seed).map(|y| (y, u)).map_err(wrap(s))
        })
        .collect::<Result<_, _>>()?;
    let c = centre.unwrap_or(0.0);
    let n = samples as f64;
    let mut gradient = vec![0.0; x.len()];
    let mut sq = vec![0.0; x.len()];
    let mut expectation = 0.0;
    for (y, u) in &runs {
        expectation += y;
        for (k, (uk, sk)) in u.iter().zip(sigma).enumerate() {
            if *sk > 0.0 {
                let t = (y - c) / sk * uk;
                gradient[k] += t;
                sq[k] += t * t;
            }
        }
    }
    gradient.iter_mut().for_each(|g| *g /= n);
    let se = if samples < 2 {
        vec![f64::NAN; x.len()]
    } else {
        sq.iter().zip(&gradient).map(|(q, m)| ((q / n - m * m).max(0.0) / (n - 1.0)).sqrt()).collect()
    };
    Ok((GradResult { expectation: expectation / n, gradient }, se))
}

/// Gaussian-perturbation finite differences centred on `P(x)`.
pub fn pgo(
    p: &impl Program,
    x: &[f64],
    sigma: &[f64],
    samples: usize,
    seed: u64,
    program_seed: u64,
) -> Result<GradResult, ProgramError> {
    pgo_with_se(p, x, sigma, samples, seed, program_seed).map(|r| r.0)
}

/// [`pgo`] plus the per-dimension standard error of the gradient (NaN for
/// a single sample).
pub fn pgo_with_se(
    p: &impl Program,
    x: &[f64],
    sigma: &[f64],
    samples: usize,
    seed: u64,
    program_seed: u64,
) -> Result<(GradResult, Vec<f64>), ProgramError> {
    validate(p, x, sigma, samples)?;
    let c = crisp_run(p, x, program_seed)?;
    score_function(p, x, sigma, samples, seed, program_seed, Some(c))
}

/// Score-function (REINFORCE) estimator with no baseline.
pub fn rf(
    p: &impl Program,
    x: &[f64],
    sigma: &[f64],
    samples: usize,
    seed: u64,
    program_seed: u64,
) -> Result<GradResult, ProgramError> {
    score_function(p, x, sigma, samples, seed, program_seed, None).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{Cond, Exec};

    struct Heaviside;

    impl Program for Heaviside {
        fn name(&self) -> String {
            "heaviside".into()
        }
        fn dim(&self) -> usize {
            1
        }
        fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
            let mut y = E::Real::from(0.0);
            ex.when(Cond::ge(x[0].clone(), 0.0), &mut y, |_, y| {
                *y = 1.0.into();
                Ok(())
            })?;
            Ok(y)
        }
    }

    struct Quadratic;

    impl Program for Quadratic {
        fn name(&self) -> String {
            "quadratic".into()
        }
        fn dim(&self) -> usize {
            2
        }
        fn run<E: Exec>(&self, _: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
            Ok(x[0].clone() * x[0].clone() + x[1].clone() * 3.0)
        }
    }

    #[test]
    fn ipa_misses_the_step() {
        let r = ipa(&Heaviside, &[0.0], &[0.25], 200, 1, 1).unwrap();
        assert_eq!(r.gradient, vec![0.0]);
        assert!((r.expectation - 0.5).abs() < 0.1);
    }

    #[test]
    fn ipa_smooth_program() {
        let r = ipa(&Quadratic, &[1.0, 0.0], &[0.0, 0.0], 3, 1, 1).unwrap();
        assert_eq!(r.gradient, vec![2.0, 3.0]);
    }

    #[test]
    fn rf_minus_pgo_is_centre_term() {
        let x = [0.1];
        let s = [0.25];
        let a = rf(&Heaviside, &x, &s, 1000, 3, 3).unwrap();
        let b = pgo(&Heaviside, &x, &s, 1000, 3, 3).unwrap();
        let ubar: f64 = (0..1000).map(|i| perturbation(3, i, 1)[0]).sum::<f64>() / 1000.0;
        let c = crisp_run(&Heaviside, &x, 3).unwrap();
        assert!((a.gradient[0] - b.gradient[0] - c / 0.25 * ubar).abs() < 1e-12);
    }

    #[test]
    fn pgo_heaviside_is_close() {
        let r = pgo(&Heaviside, &[0.0], &[0.25], 100_000, 11, 0).unwrap();
        assert!((r.gradient[0] - 1.595_769_121_605_730_7).abs() < 0.05, "{:?}", r.gradient);
    }

    #[test]
    fn standard_error_covers_affine_slope() {
        let (r, se) = pgo_with_se(&Quadratic, &[1.0, 0.0], &[0.2, 0.2], 10_000, 4, 4).unwrap();
        assert!(se.iter().all(|v| *v > 0.0 && *v < 0.1), "{se:?}");
        assert!((r.gradient[1] - 3.0).abs() < 3.0 * se[1]);
        let (_, se1) = pgo_with_se(&Quadratic, &[1.0, 0.0], &[0.2, 0.2], 1, 4, 4).unwrap();
        assert!(se1[0].is_nan());
    }

    #[test]
    fn zero_sigma_dimension_is_zero() {
        let r = pgo(&Quadratic, &[1.0, 0.0], &[0.1, 0.0], 100, 1, 1).unwrap();
        assert_eq!(r.gradient[1], 0.0);
    }

    #[test]
    fn validation() {
        assert!(matches!(rf(&Heaviside, &[0.0], &[0.1], 0, 0, 0), Err(ProgramError::Config(_))));
        assert!(matches!(pgo(&Heaviside, &[0.0, 1.0], &[0.1, 0.1], 5, 0, 0), Err(ProgramError::Dimension { .. })));
    }
}
