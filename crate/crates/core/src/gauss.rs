//! Gaussian primitives: standard normal pdf/cdf, branch probabilities,
//! moment-matched merging and Gaussian kernel density estimates.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;

use crate::ad::DualReal;

/// `1/√(2π)`.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Smallest bandwidth the Silverman rule will return.
pub const MIN_BANDWIDTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum GaussError {
    EmptySample,
    Bandwidth(f64),
    DegenerateMerge,
}

impl fmt::Display for GaussError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GaussError::EmptySample => f.write_str("kernel density estimate over an empty sample"),
            GaussError::Bandwidth(h) => write!(f, "bandwidth must be positive, got {h}"),
            GaussError::DegenerateMerge => f.write_str("merging components with zero total weight"),
        }
    }
}

impl std::error::Error for GaussError {}

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// `Φ(z)` with the tangent of `z` pushed through `φ(z)`.
pub fn normal_cdf_dual(z: &DualReal) -> DualReal {
    let v = z.value();
    z.chain(normal_cdf(v), normal_pdf(v))
}

/// A scalar Gaussian; `stddev == 0` is a point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1D {
    pub mean: f64,
    pub stddev: f64,
}

impl Gaussian1D {
    pub fn new(mean: f64, stddev: f64) -> Self {
        debug_assert!(stddev >= 0.0);
        Self { mean, stddev }
    }

    pub fn point(mean: f64) -> Self {
        Self { mean, stddev: 0.0 }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if self.stddev == 0.0 {
            return if x >= self.mean { 1.0 } else { 0.0 };
        }
        normal_cdf((x - self.mean) / self.stddev)
    }
}

/// `P(B ≤ 0)` for `B ~ N(mean, stddev²)`, differentiable in both moments.
///
/// A point mass yields a crisp 0 or 1, and 0.5 exactly at `mean == 0`.
pub fn prob_cond_true(mean: &DualReal, stddev: &DualReal) -> DualReal {
    let s = stddev.value();
    if s <= 0.0 {
        let m = mean.value();
        let p = if m < 0.0 {
            1.0
        } else if m > 0.0 {
            0.0
        } else {
            0.5
        };
        return DualReal::constant(p);
    }
    let z = -(mean / stddev);
    normal_cdf_dual(&z)
}

/// A weighted mixture element with differentiable moments.
#[derive(Debug, Clone)]
pub struct WeightedComponent {
    pub weight: DualReal,
    pub mean: DualReal,
    pub var: DualReal,
}

impl WeightedComponent {
    pub fn new(weight: f64, g: Gaussian1D) -> Self {
        Self { weight: weight.into(), mean: g.mean.into(), var: (g.stddev * g.stddev).into() }
    }

    pub fn stddev(&self) -> f64 {
        self.var.value().sqrt()
    }
}

/// Merged weight, mean and variance of two weighted moment pairs.
///
/// Uses `var = (w_a v_a + w_b v_b)/w + w_a w_b (μ_a − μ_b)²/w²`, which equals
/// raw second-moment matching and is non-negative by construction.
pub fn merge_parts(
    wa: &DualReal,
    ma: &DualReal,
    va: &DualReal,
    wb: &DualReal,
    mb: &DualReal,
    vb: &DualReal,
) -> Result<(DualReal, DualReal, DualReal), GaussError> {
    let w = wa + wb;
    if !(w.value() > 0.0) {
        return Err(GaussError::DegenerateMerge);
    }
    let mean = (&(wa * ma) + &(wb * mb)) / &w;
    let dm = ma - mb;
    let spread = &(wa * wb) * &(&dm * &dm);
    let var = (&(wa * va) + &(wb * vb)) / &w + spread / &(&w * &w);
    Ok((w, mean, var))
}

pub fn merge_moments(a: &WeightedComponent, b: &WeightedComponent) -> Result<WeightedComponent, GaussError> {
    let (weight, mean, var) = merge_parts(&a.weight, &a.mean, &a.var, &b.weight, &b.mean, &b.var)?;
    Ok(WeightedComponent { weight, mean, var })
}

/// `(1/(S h)) Σ φ((x0 − x_s)/h)`.
pub fn kde_at(points: &[f64], x0: f64, bandwidth: f64) -> Result<f64, GaussError> {
    if points.is_empty() {
        return Err(GaussError::EmptySample);
    }
    if !(bandwidth > 0.0) {
        return Err(GaussError::Bandwidth(bandwidth));
    }
    let inv_h = 1.0 / bandwidth;
    let sum: f64 = points.iter().map(|&x| normal_pdf((x0 - x) * inv_h)).sum();
    Ok(sum * inv_h / points.len() as f64)
}

/// Silverman's rule `1.06 σ̂ S^(-1/5)`, floored at [`MIN_BANDWIDTH`].
pub fn silverman_bandwidth(points: &[f64]) -> f64 {
    let n = points.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = points.iter().sum::<f64>() / n as f64;
    let ss: f64 = points.iter().map(|&x| (x - mean) * (x - mean)).sum();
    silverman_rule(n, (ss / (n - 1) as f64).sqrt())
}

/// [`silverman_bandwidth`] from the sample size and standard deviation.
pub fn silverman_rule(n: usize, sd: f64) -> f64 {
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    (1.06 * sd * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::AdContext;

    // mpmath, 30 digits
    const PHI_1: f64 = 0.841_344_746_068_542_9;
    const PHI_NEG_2_3: f64 = 0.010_724_110_021_675_8;

    #[test]
    fn cdf_pdf_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_pdf(0.0) - 0.398_942_280_401_432_7).abs() < 1e-16);
        assert!((normal_cdf(1.0) - PHI_1).abs() < 1e-15);
        assert!((normal_cdf(-2.3) - PHI_NEG_2_3).abs() < 1e-16);
        assert!((normal_cdf(-2.3) - (1.0 - normal_cdf(2.3))).abs() < 1e-15);
    }

    #[test]
    fn prob_cond_true_examples() {
        let one = DualReal::constant(1.0);
        assert_eq!(prob_cond_true(&0.0.into(), &one).value(), 0.5);
        assert!((prob_cond_true(&(-1.0).into(), &one).value() - PHI_1).abs() < 1e-15);
        assert_eq!(prob_cond_true(&(-2.0).into(), &0.0.into()).value(), 1.0);
        assert_eq!(prob_cond_true(&2.0.into(), &0.0.into()).value(), 0.0);
        assert_eq!(prob_cond_true(&0.0.into(), &0.0.into()).value(), 0.5);
    }

    #[test]
    fn prob_cond_true_tangent() {
        let ctx = AdContext::new(1);
        let mu = ctx.input(0, 0.3).unwrap();
        let q = prob_cond_true(&mu, &DualReal::constant(0.5));
        let want = -normal_pdf(-0.6) / 0.5;
        assert!((ctx.gradient(&q)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn merge_examples() {
        let a = WeightedComponent::new(0.5, Gaussian1D::point(0.0));
        let b = WeightedComponent::new(0.5, Gaussian1D::point(1.0));
        let m = merge_moments(&a, &b).unwrap();
        assert_eq!(m.weight.value(), 1.0);
        assert_eq!(m.mean.value(), 0.5);
        assert_eq!(m.stddev(), 0.5);

        let a = WeightedComponent::new(0.25, Gaussian1D::new(2.0, 1.0));
        let b = WeightedComponent::new(0.75, Gaussian1D::new(2.0, 1.0));
        let m = merge_moments(&a, &b).unwrap();
        assert_eq!((m.weight.value(), m.mean.value(), m.stddev()), (1.0, 2.0, 1.0));

        let a = WeightedComponent::new(1.0, Gaussian1D::new(3.0, 2.0));
        let b = WeightedComponent::new(0.0, Gaussian1D::new(-7.0, 9.0));
        let m = merge_moments(&a, &b).unwrap();
        assert_eq!((m.weight.value(), m.mean.value(), m.stddev()), (1.0, 3.0, 2.0));

        let z = WeightedComponent::new(0.0, Gaussian1D::point(0.0));
        assert_eq!(merge_moments(&z, &z).unwrap_err(), GaussError::DegenerateMerge);
    }

    #[test]
    fn kde_examples() {
        assert!((kde_at(&[0.0], 0.0, 1.0).unwrap() - INV_SQRT_2PI).abs() < 1e-16);
        let (a, h) = (0.7, 0.4);
        let want = normal_pdf(a / h) / h;
        assert!((kde_at(&[-a, a], 0.0, h).unwrap() - want).abs() < 1e-15);
        assert!((kde_at(&[0.0; 4], 0.0, 2.0).unwrap() - INV_SQRT_2PI / 2.0).abs() < 1e-16);
        assert_eq!(kde_at(&[], 0.0, 1.0).unwrap_err(), GaussError::EmptySample);
        assert_eq!(kde_at(&[1.0], 0.0, 0.0).unwrap_err(), GaussError::Bandwidth(0.0));
    }

    #[test]
    fn silverman_floor() {
        assert_eq!(silverman_bandwidth(&[1.0]), MIN_BANDWIDTH);
        assert_eq!(silverman_bandwidth(&[2.0, 2.0, 2.0]), MIN_BANDWIDTH);
        let h = silverman_bandwidth(&[-1.0, 1.0]);
        assert!((h - 1.06 * 2f64.sqrt() * 2f64.powf(-0.2)).abs() < 1e-15);
    }
}
