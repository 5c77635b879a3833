//! Smooth interpretation with differentiable path weights (DGSI).
//!
//! Every program variable is a Gaussian mixture: one [`GaussianVal`] per
//! control-flow path. A branch splits each active path in two, weighting the
//! halves by the probability of the condition; the number of tracked paths is
//! bounded by merging or discarding paths ([`restrict`]). Means and weights are
//! [`DualReal`]s, so the expectation `Σ_p w_p μ_p` carries its gradient.

mod exec;
mod restrict;
mod state;

pub use exec::{si_execute, SiExec};
pub use restrict::{merge_paths, restrict};
pub use state::SiScalar;

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::ad::{BinaryOp, DualReal, UnaryOp};
use crate::program::DEFAULT_LOOP_CAP;

/// Weight below which freshly split paths are discarded.
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Pairwise merge minimizing weight-scaled moment distance.
    Ch,
    /// Pairwise merge minimizing moment distance alone.
    Iw,
    /// Merge the two lowest-weight paths.
    Wo,
    /// Discard the lowest-weight paths.
    Di,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Ch, Strategy::Iw, Strategy::Wo, Strategy::Di];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Ch => "Ch",
            Strategy::Iw => "IW",
            Strategy::Wo => "WO",
            Strategy::Di => "Di",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ch" => Ok(Strategy::Ch),
            "iw" => Ok(Strategy::Iw),
            "wo" => Ok(Strategy::Wo),
            "di" => Ok(Strategy::Di),
            _ => Err(format!("unknown restrict strategy '{s}' (expected ch, iw, wo or di)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictConfig {
    pub max_paths: usize,
    pub strategy: Strategy,
    pub weight_threshold: f64,
}

impl RestrictConfig {
    pub fn new(max_paths: usize, strategy: Strategy) -> Self {
        Self { max_paths, strategy, weight_threshold: DEFAULT_WEIGHT_THRESHOLD }
    }

    pub fn with_threshold(mut self, t: f64) -> Self {
        self.weight_threshold = t;
        self
    }

    /// Paths kept before a split, so that the split yields at most
    /// `max(max_paths, 2)`.
    pub fn pre_split_target(&self) -> usize {
        (self.max_paths / 2).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// First-order propagation assuming independent operands.
    Independent,
    /// `σ² = Σ_i (∂μ/∂μ_{X_i})² σ²_{X_i}` from the mean's input tangent.
    InputCorrelated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiConfig {
    pub restrict: RestrictConfig,
    pub variance: VarianceMode,
    /// Carry tangents on variances too (independent mode only).
    pub differentiable_variance: bool,
    pub loop_cap: usize,
}

impl SiConfig {
    pub fn new(restrict: RestrictConfig) -> Self {
        Self {
            restrict,
            variance: VarianceMode::Independent,
            differentiable_variance: false,
            loop_cap: DEFAULT_LOOP_CAP,
        }
    }
}

/// One mixture element of one variable.
#[derive(Debug, Clone)]
pub struct GaussianVal {
    pub mean: DualReal,
    pub var: DualReal,
}

impl GaussianVal {
    pub fn point(v: f64) -> Self {
        Self { mean: v.into(), var: 0.0.into() }
    }

    pub fn stddev(&self) -> f64 {
        self.var.value().max(0.0).sqrt()
    }

    fn is_point(&self) -> bool {
        self.var.value() == 0.0 && self.var.is_constant()
    }
}

/// One control-flow path: its weight and its value for every live slot.
///
/// Values are shared between paths until overwritten, so splitting a path
/// copies pointers only.
#[derive(Debug, Clone)]
pub struct Path {
    pub weight: DualReal,
    pub vals: Vec<Option<Rc<GaussianVal>>>,
}

impl Path {
    pub fn get(&self, slot: usize) -> Option<&GaussianVal> {
        self.vals.get(slot).and_then(Option::as_deref)
    }

    pub fn get_shared(&self, slot: usize) -> Option<&Rc<GaussianVal>> {
        self.vals.get(slot).and_then(Option::as_ref)
    }

    pub fn set(&mut self, slot: usize, v: GaussianVal) {
        self.set_shared(slot, Rc::new(v));
    }

    pub fn set_shared(&mut self, slot: usize, v: Rc<GaussianVal>) {
        if self.vals.len() <= slot {
            self.vals.resize(slot + 1, None);
        }
        self.vals[slot] = Some(v);
    }
}

/// Bookkeeping collected over one SI execution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiStats {
    /// `Σ_p w_p` at program exit.
    pub final_weight: f64,
    /// Total weight discarded by the threshold.
    pub dropped_mass: f64,
    pub max_active: usize,
    pub final_paths: usize,
    pub branches: usize,
    /// Sum over branches of the number of paths split there.
    pub paths_at_branches: usize,
    pub merges: usize,
    pub discards: usize,
    pub min_weight: f64,
}

/// Variance propagation settings used by [`si_binary`] and [`si_unary`].
#[derive(Debug, Clone, Copy)]
pub struct VarianceRule<'a> {
    pub mode: VarianceMode,
    pub differentiable: bool,
    /// `σ²_{X_i}` of the program inputs.
    pub input_var: &'a [f64],
}

impl VarianceRule<'_> {
    fn finish(&self, mean: &DualReal, var: impl FnOnce() -> DualReal) -> DualReal {
        match self.mode {
            VarianceMode::InputCorrelated => DualReal::constant(mean.weighted_tangent_sq(self.input_var)),
            VarianceMode::Independent if self.differentiable => var(),
            VarianceMode::Independent => var().detach(),
        }
    }

    fn operand(&self, m: &DualReal) -> DualReal {
        if self.differentiable {
            m.clone()
        } else {
            m.detach()
        }
    }
}

fn binary_partials(op: BinaryOp, a: &DualReal, b: &DualReal) -> (DualReal, DualReal) {
    let one = || DualReal::constant(1.0);
    let zero = || DualReal::constant(0.0);
    match op {
        BinaryOp::Add => (one(), one()),
        BinaryOp::Sub => (one(), DualReal::constant(-1.0)),
        BinaryOp::Mul => (b.clone(), a.clone()),
        BinaryOp::Div => {
            let inv = &one() / b;
            let db = -(&(a * &inv) * &inv);
            (inv, db)
        }
        BinaryOp::Min => {
            if a.value() <= b.value() {
                (one(), zero())
            } else {
                (zero(), one())
            }
        }
        BinaryOp::Max => {
            if a.value() >= b.value() {
                (one(), zero())
            } else {
                (zero(), one())
            }
        }
        BinaryOp::Pow => {
            let da = if b.value() == 0.0 { zero() } else { b * &a.apply_binary(BinaryOp::Pow, &(b.clone() - 1.0)) };
            let db =
                if a.value() <= 0.0 { zero() } else { &a.apply_binary(BinaryOp::Pow, b) * &a.apply_unary(UnaryOp::Ln) };
            (da, db)
        }
    }
}

fn unary_partial(op: UnaryOp, a: &DualReal) -> DualReal {
    match op {
        UnaryOp::Neg => DualReal::constant(-1.0),
        UnaryOp::Exp => a.apply_unary(UnaryOp::Exp),
        UnaryOp::Ln => DualReal::constant(1.0) / a,
        UnaryOp::Sqrt => DualReal::constant(0.5) / &a.apply_unary(UnaryOp::Sqrt),
        UnaryOp::Sin => a.apply_unary(UnaryOp::Cos),
        UnaryOp::Cos => -a.apply_unary(UnaryOp::Sin),
        UnaryOp::Tanh => {
            let t = a.apply_unary(UnaryOp::Tanh);
            DualReal::constant(1.0) - &(&t * &t)
        }
        UnaryOp::Abs => DualReal::constant(f64::NAN),
    }
}

/// Mean and propagated variance of `op(a, b)`.
pub fn si_binary(op: BinaryOp, a: &GaussianVal, b: &GaussianVal, rule: &VarianceRule) -> GaussianVal {
    let mean = a.mean.apply_binary(op, &b.mean);
    let var = rule.finish(&mean, || {
        if a.is_point() && b.is_point() {
            return DualReal::constant(0.0);
        }
        let (da, db) = binary_partials(op, &rule.operand(&a.mean), &rule.operand(&b.mean));
        let mut v = DualReal::constant(0.0);
        if !a.is_point() {
            v = v + &(&(&da * &da) * &a.var);
        }
        if !b.is_point() {
            v = v + &(&(&db * &db) * &b.var);
        }
        v
    });
    GaussianVal { mean, var }
}

/// Mean and propagated variance of `op(a)`.
pub fn si_unary(op: UnaryOp, a: &GaussianVal, rule: &VarianceRule) -> GaussianVal {
    let mean = a.mean.apply_unary(op);
    let var = rule.finish(&mean, || {
        if a.is_point() {
            return DualReal::constant(0.0);
        }
        let d = unary_partial(op, &rule.operand(&a.mean));
        &(&d * &d) * &a.var
    });
    GaussianVal { mean, var }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::AdContext;

    fn g(m: f64, v: f64) -> GaussianVal {
        GaussianVal { mean: m.into(), var: v.into() }
    }

    const INDEP: VarianceRule<'static> =
        VarianceRule { mode: VarianceMode::Independent, differentiable: false, input_var: &[] };

    #[test]
    fn independent_sum() {
        let c = si_binary(BinaryOp::Add, &g(1.0, 1.0), &g(2.0, 4.0), &INDEP);
        assert_eq!((c.mean.value(), c.var.value()), (3.0, 5.0));
    }

    #[test]
    fn affine_scaling() {
        let c = si_binary(BinaryOp::Mul, &g(1.5, 2.0), &GaussianVal::point(-3.0), &INDEP);
        assert_eq!((c.mean.value(), c.var.value()), (-4.5, 18.0));
    }

    #[test]
    fn correlated_self_sum() {
        let ctx = AdContext::new(1);
        let x = GaussianVal { mean: ctx.input(0, 0.0).unwrap(), var: 1.0.into() };
        let rule = VarianceRule { mode: VarianceMode::InputCorrelated, differentiable: false, input_var: &[1.0] };
        let c = si_binary(BinaryOp::Add, &x, &x, &rule);
        assert_eq!(c.var.value(), 4.0);
        let c = si_binary(BinaryOp::Add, &x, &x, &INDEP);
        assert_eq!(c.var.value(), 2.0);
    }

    #[test]
    fn differentiable_variance_tracks_means() {
        let ctx = AdContext::new(2);
        let a = GaussianVal { mean: ctx.input(0, 2.0).unwrap(), var: 1.0.into() };
        let b = GaussianVal { mean: ctx.input(1, 3.0).unwrap(), var: 0.5.into() };
        let rule = VarianceRule { differentiable: true, ..INDEP };
        let c = si_binary(BinaryOp::Mul, &a, &b, &rule);
        // σ² = μ_b² σ_a² + μ_a² σ_b²
        assert_eq!(c.var.value(), 9.0 + 4.0 * 0.5);
        assert_eq!(ctx.gradient(&c.var), vec![2.0 * 2.0 * 0.5, 2.0 * 3.0 * 1.0]);
        let c = si_binary(BinaryOp::Mul, &a, &b, &INDEP);
        assert!(c.var.is_constant());
    }

    #[test]
    fn unary_propagation() {
        let c = si_unary(UnaryOp::Exp, &g(0.0, 0.25), &INDEP);
        assert_eq!((c.mean.value(), c.var.value()), (1.0, 0.25));
        let c = si_unary(UnaryOp::Sqrt, &g(4.0, 1.0), &INDEP);
        assert_eq!((c.mean.value(), c.var.value()), (2.0, 1.0 / 16.0));
        let c = si_unary(UnaryOp::Neg, &g(4.0, 1.0), &INDEP);
        assert_eq!((c.mean.value(), c.var.value()), (-4.0, 1.0));
    }

    #[test]
    fn strategy_parsing() {
        for s in Strategy::ALL {
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        assert!("xx".parse::<Strategy>().is_err());
    }
}
