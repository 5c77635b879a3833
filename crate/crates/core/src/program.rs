//! The embedded program interface.
//!
//! A [`Program`] is written once against [`Exec`]. Arithmetic goes through the
//! back-end's [`SmoothReal`] type; every input-dependent decision goes through
//! [`Exec::branch`] or [`Exec::while_loop`]. Variables that a branch body may
//! reassign are handed to the combinator as a [`Carry`] so that back-ends
//! executing both arms can reconcile them afterwards.
//!
//! Randomness must be drawn from [`Exec::rng`] outside of branch bodies, so
//! that every back-end sees the same stream for a given seed.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Range, Sub, SubAssign};
use std::panic::Location;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use crate::ad::{AdContext, AdError, BinaryOp, DualReal, UnaryOp};
use crate::gauss::GaussError;

/// Default iteration cap for [`Exec::while_loop`].
pub const DEFAULT_LOOP_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum ProgramError {
    Ad(AdError),
    Gauss(GaussError),
    RunawayLoop {
        cap: usize,
        site: &'static Location<'static>,
    },
    /// Every path state was dropped by the weight threshold.
    EmptyState {
        site: &'static Location<'static>,
    },
    /// A smooth value was read on a path where it is not defined.
    Undefined,
    Dimension {
        expected: usize,
        got: usize,
    },
    Config(String),
    Sample {
        sample: usize,
        source: Box<ProgramError>,
    },
}

impl fmt::Display for ProgramError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProgramError::Ad(e) => write!(f, "{e}"),
            ProgramError::Gauss(e) => write!(f, "{e}"),
            ProgramError::RunawayLoop { cap, site } => {
                write!(f, "loop at {site} exceeded {cap} iterations")
            }
            ProgramError::EmptyState { site } => {
                write!(f, "all path states dropped at {site}; lower the weight threshold")
            }
            ProgramError::Undefined => f.write_str("smooth value used outside the paths that define it"),
            ProgramError::Dimension { expected, got } => {
                write!(f, "expected {expected} inputs, got {got}")
            }
            ProgramError::Config(msg) => f.write_str(msg),
            ProgramError::Sample { sample, source } => write!(f, "sample {sample}: {source}"),
        }
    }
}

impl std::error::Error for ProgramError {}

impl From<AdError> for ProgramError {
    fn from(e: AdError) -> Self {
        ProgramError::Ad(e)
    }
}

impl From<GaussError> for ProgramError {
    fn from(e: GaussError) -> Self {
        ProgramError::Gauss(e)
    }
}

/// Smoothed expectation and its gradient wrt. the input means.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub expectation: f64,
    pub gradient: Vec<f64>,
}

/// Arithmetic shared by every back-end's scalar type.
pub trait SmoothReal:
    Clone
    + fmt::Debug
    + From<f64>
    + Carry<Self>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + for<'a> Add<&'a Self, Output = Self>
    + for<'a> Sub<&'a Self, Output = Self>
    + for<'a> Mul<&'a Self, Output = Self>
    + for<'a> Div<&'a Self, Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + AddAssign<f64>
    + SubAssign<f64>
    + MulAssign<f64>
{
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tanh(&self) -> Self;
    fn powf(&self, e: f64) -> Self;
    fn pow(&self, e: &Self) -> Self;
    fn min(&self, o: &Self) -> Self;
    fn max(&self, o: &Self) -> Self;

    fn sigmoid(&self) -> Self {
        // 1/(1+e^-x) written as (1 + tanh(x/2))/2 to stay finite
        ((self.clone() * 0.5).tanh() + 1.0) * 0.5
    }

    fn square(&self) -> Self {
        self.clone() * self
    }
}

impl SmoothReal for f64 {
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn powf(&self, e: f64) -> Self {
        f64::powf(*self, e)
    }
    fn pow(&self, e: &Self) -> Self {
        f64::powf(*self, *e)
    }
    fn min(&self, o: &Self) -> Self {
        if *self <= *o {
            *self
        } else {
            *o
        }
    }
    fn max(&self, o: &Self) -> Self {
        if *self >= *o {
            *self
        } else {
            *o
        }
    }
}

impl SmoothReal for DualReal {
    fn exp(&self) -> Self {
        self.apply_unary(UnaryOp::Exp)
    }
    fn ln(&self) -> Self {
        self.apply_unary(UnaryOp::Ln)
    }
    fn sqrt(&self) -> Self {
        self.apply_unary(UnaryOp::Sqrt)
    }
    fn sin(&self) -> Self {
        self.apply_unary(UnaryOp::Sin)
    }
    fn cos(&self) -> Self {
        self.apply_unary(UnaryOp::Cos)
    }
    fn tanh(&self) -> Self {
        self.apply_unary(UnaryOp::Tanh)
    }
    fn powf(&self, e: f64) -> Self {
        self.apply_binary(BinaryOp::Pow, &DualReal::constant(e))
    }
    fn pow(&self, e: &Self) -> Self {
        self.apply_binary(BinaryOp::Pow, e)
    }
    fn min(&self, o: &Self) -> Self {
        self.apply_binary(BinaryOp::Min, o)
    }
    fn max(&self, o: &Self) -> Self {
        self.apply_binary(BinaryOp::Max, o)
    }
}

/// Program variables a branch or loop body may reassign.
pub trait Carry<R> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut R));
}

impl Carry<f64> for f64 {
    fn visit(&mut self, f: &mut dyn FnMut(&mut f64)) {
        f(self)
    }
}

impl Carry<DualReal> for DualReal {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DualReal)) {
        f(self)
    }
}

impl<R> Carry<R> for () {
    fn visit(&mut self, _: &mut dyn FnMut(&mut R)) {}
}

impl<R, T: Carry<R> + ?Sized> Carry<R> for &mut T {
    fn visit(&mut self, f: &mut dyn FnMut(&mut R)) {
        (**self).visit(f)
    }
}

impl<R, T: Carry<R>> Carry<R> for Vec<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut R)) {
        for t in self.iter_mut() {
            t.visit(f);
        }
    }
}

impl<R, T: Carry<R>> Carry<R> for [T] {
    fn visit(&mut self, f: &mut dyn FnMut(&mut R)) {
        for t in self.iter_mut() {
            t.visit(f);
        }
    }
}

impl<R, T: Carry<R>, const N: usize> Carry<R> for [T; N] {
    fn visit(&mut self, f: &mut dyn FnMut(&mut R)) {
        for t in self.iter_mut() {
            t.visit(f);
        }
    }
}

macro_rules! carry_tuple {
    ($($t:ident $i:tt),+) => {
        impl<R, $($t: Carry<R>),+> Carry<R> for ($($t,)+) {
            fn visit(&mut self, f: &mut dyn FnMut(&mut R)) {
                $(self.$i.visit(f);)+
            }
        }
    };
}

carry_tuple!(A 0);
carry_tuple!(A 0, B 1);
carry_tuple!(A 0, B 1, C 2);
carry_tuple!(A 0, B 1, C 2, D 3);
carry_tuple!(A 0, B 1, C 2, D 3, E 4);
carry_tuple!(A 0, B 1, C 2, D 3, E 4, F 5);

/// Collects clones of every carried value in visiting order.
pub fn carried_values<R: Clone, V: Carry<R> + ?Sized>(vars: &mut V) -> Vec<R> {
    let mut out = Vec::new();
    vars.visit(&mut |r: &mut R| out.push(r.clone()));
    out
}

/// Overwrites every carried value, in visiting order, from `values`.
pub fn restore_values<R: Clone, V: Carry<R> + ?Sized>(vars: &mut V, values: &[R]) {
    let mut i = 0;
    vars.visit(&mut |r: &mut R| {
        *r = values[i].clone();
        i += 1;
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rel {
    Le,
    Lt,
    Ge,
    Gt,
}

impl Rel {
    pub fn is_strict(self) -> bool {
        matches!(self, Rel::Lt | Rel::Gt)
    }

    /// Whether `g` (see [`Cond::into_g`]) selects the `then` arm.
    pub fn holds(self, g: f64) -> bool {
        if self.is_strict() {
            g < 0.0
        } else {
            g <= 0.0
        }
    }
}

/// A relational condition `lhs rel rhs`.
#[derive(Debug, Clone)]
pub struct Cond<R> {
    pub lhs: R,
    pub rel: Rel,
    pub rhs: R,
}

impl<R: SmoothReal> Cond<R> {
    pub fn new(lhs: impl Into<R>, rel: Rel, rhs: impl Into<R>) -> Self {
        Self { lhs: lhs.into(), rel, rhs: rhs.into() }
    }

    pub fn le(lhs: impl Into<R>, rhs: impl Into<R>) -> Self {
        Self::new(lhs, Rel::Le, rhs)
    }

    pub fn lt(lhs: impl Into<R>, rhs: impl Into<R>) -> Self {
        Self::new(lhs, Rel::Lt, rhs)
    }

    pub fn ge(lhs: impl Into<R>, rhs: impl Into<R>) -> Self {
        Self::new(lhs, Rel::Ge, rhs)
    }

    pub fn gt(lhs: impl Into<R>, rhs: impl Into<R>) -> Self {
        Self::new(lhs, Rel::Gt, rhs)
    }

    /// The branch condition `g`, oriented so that the `then` arm is taken
    /// iff `g ≤ 0` (or `g < 0` for strict relations).
    pub fn into_g(self) -> (R, Rel) {
        match self.rel {
            Rel::Le | Rel::Lt => (self.lhs - self.rhs, self.rel),
            Rel::Ge | Rel::Gt => (self.rhs - self.lhs, self.rel),
        }
    }
}

pub type BodyResult = Result<(), ProgramError>;

/// A back-end executing one program run.
pub trait Exec: Sized {
    type Real: SmoothReal;

    /// The per-execution random stream.
    fn rng(&mut self) -> &mut ChaCha8Rng;

    #[track_caller]
    fn branch<V, T, F>(&mut self, cond: Cond<Self::Real>, vars: &mut V, then_body: T, else_body: F) -> BodyResult
    where
        V: Carry<Self::Real> + ?Sized,
        T: FnOnce(&mut Self, &mut V) -> BodyResult,
        F: FnOnce(&mut Self, &mut V) -> BodyResult;

    #[track_caller]
    fn while_loop<V, C, B>(&mut self, vars: &mut V, cond: C, body: B) -> BodyResult
    where
        V: Carry<Self::Real> + ?Sized,
        C: FnMut(&mut Self, &V) -> Cond<Self::Real>,
        B: FnMut(&mut Self, &mut V) -> BodyResult;

    /// `if cond { then_body }` with no else arm.
    #[track_caller]
    fn when<V, T>(&mut self, cond: Cond<Self::Real>, vars: &mut V, then_body: T) -> BodyResult
    where
        V: Carry<Self::Real> + ?Sized,
        T: FnOnce(&mut Self, &mut V) -> BodyResult,
    {
        self.branch(cond, vars, then_body, |_, _| Ok(()))
    }
}

/// A program `ℝⁿ → ℝ` with input-dependent control flow.
pub trait Program: Sync {
    fn name(&self) -> String;

    fn dim(&self) -> usize;

    fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError>;

    /// Box constraints applied to every coordinate.
    fn bounds(&self) -> Option<(f64, f64)> {
        None
    }

    /// Whether the output depends on the rng stream.
    fn stochastic(&self) -> bool {
        false
    }

    /// Whether the natural objective is the negated program output.
    fn maximizes(&self) -> bool {
        false
    }

    fn initial_point(&self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

pub(crate) fn check_dim(p: &impl Program, x: &[f64]) -> Result<(), ProgramError> {
    if x.len() != p.dim() {
        return Err(ProgramError::Dimension { expected: p.dim(), got: x.len() });
    }
    Ok(())
}

/// Plain execution on `f64`.
pub struct CrispExec {
    rng: ChaCha8Rng,
    loop_cap: usize,
}

impl CrispExec {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), loop_cap: DEFAULT_LOOP_CAP }
    }

    pub fn with_loop_cap(mut self, cap: usize) -> Self {
        self.loop_cap = cap;
        self
    }
}

impl Exec for CrispExec {
    type Real = f64;

    fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn branch<V, T, F>(&mut self, cond: Cond<f64>, vars: &mut V, then_body: T, else_body: F) -> BodyResult
    where
        V: Carry<f64> + ?Sized,
        T: FnOnce(&mut Self, &mut V) -> BodyResult,
        F: FnOnce(&mut Self, &mut V) -> BodyResult,
    {
        let (g, rel) = cond.into_g();
        if rel.holds(g) {
            then_body(self, vars)
        } else {
            else_body(self, vars)
        }
    }

    #[track_caller]
    fn while_loop<V, C, B>(&mut self, vars: &mut V, mut cond: C, mut body: B) -> BodyResult
    where
        V: Carry<f64> + ?Sized,
        C: FnMut(&mut Self, &V) -> Cond<f64>,
        B: FnMut(&mut Self, &mut V) -> BodyResult,
    {
        let site = Location::caller();
        let mut n = 0;
        loop {
            let (g, rel) = cond(self, vars).into_g();
            if !rel.holds(g) {
                return Ok(());
            }
            if n == self.loop_cap {
                return Err(ProgramError::RunawayLoop { cap: self.loop_cap, site });
            }
            body(self, vars)?;
            n += 1;
        }
    }
}

/// Runs `p` crisply at `x`.
pub fn crisp_run(p: &impl Program, x: &[f64], seed: u64) -> Result<f64, ProgramError> {
    check_dim(p, x)?;
    p.run(&mut CrispExec::new(seed), x)
}

/// Identifies a static branch site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SiteKey {
    pub file: &'static str,
    pub line: u32,
    pub column: u32,
}

/// Hashes the position only; keys from different files that share a
/// position are told apart by `Eq`.
impl Hash for SiteKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64((self.line as u64) << 32 | self.column as u64);
    }
}

impl From<&'static Location<'static>> for SiteKey {
    fn from(l: &'static Location<'static>) -> Self {
        SiteKey { file: l.file(), line: l.line(), column: l.column() }
    }
}

/// One dynamic branch encounter under the sampling back-end.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRecord {
    pub site: SiteKey,
    /// How many times this site was reached earlier in the same run.
    pub encounter: u32,
    pub g: f64,
    pub taken: bool,
    /// Slice of [`BranchLog`]'s tangent buffer holding `∂g/∂x`.
    tangent: Range<u32>,
}

/// Branch encounters of one run in execution order. The non-zero entries of
/// every `∂g/∂x` share one buffer, so logging allocates per run, not per
/// encounter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BranchLog {
    records: Vec<BranchRecord>,
    tangents: Vec<(u32, f64)>,
    /// Encounters so far per site.
    seen: FxHashMap<SiteKey, u32>,
}

impl BranchLog {
    pub fn records(&self) -> &[BranchRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BranchRecord> {
        self.records.iter()
    }

    /// Non-zero entries of `∂g/∂x` for `r`, in increasing index order.
    pub fn tangent(&self, r: &BranchRecord) -> &[(u32, f64)] {
        &self.tangents[r.tangent.start as usize..r.tangent.end as usize]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Empties the log but keeps its buffers for the next run.
    pub fn clear(&mut self) {
        self.records.clear();
        self.tangents.clear();
        self.seen.clear();
    }

    fn push(&mut self, site: SiteKey, g: &DualReal, taken: bool) {
        let n = self.seen.entry(site).or_insert(0);
        let encounter = *n;
        *n += 1;
        let start = self.tangents.len() as u32;
        g.for_each_nonzero(|i, d| self.tangents.push((i as u32, d)));
        let tangent = start..self.tangents.len() as u32;
        self.records.push(BranchRecord { site, encounter, g: g.value(), taken, tangent });
    }
}

impl std::ops::Index<usize> for BranchLog {
    type Output = BranchRecord;

    fn index(&self, i: usize) -> &BranchRecord {
        &self.records[i]
    }
}

/// Pathwise forward-mode AD execution; optionally logs branch encounters.
pub struct DualExec {
    ctx: Rc<AdContext>,
    rng: ChaCha8Rng,
    loop_cap: usize,
    log: Option<BranchLog>,
}

impl DualExec {
    pub fn new(ctx: Rc<AdContext>, seed: u64) -> Self {
        Self { ctx, rng: ChaCha8Rng::seed_from_u64(seed), loop_cap: DEFAULT_LOOP_CAP, log: None }
    }

    pub fn recording(mut self) -> Self {
        self.log = Some(BranchLog::default());
        self
    }

    /// Like [`DualExec::recording`], reusing the buffers of `log`.
    pub fn recording_into(mut self, mut log: BranchLog) -> Self {
        log.clear();
        self.log = Some(log);
        self
    }

    pub fn with_loop_cap(mut self, cap: usize) -> Self {
        self.loop_cap = cap;
        self
    }

    pub fn context(&self) -> &Rc<AdContext> {
        &self.ctx
    }

    pub fn inputs(&self, x: &[f64]) -> Result<Vec<DualReal>, ProgramError> {
        Ok(x.iter().enumerate().map(|(i, &v)| self.ctx.input(i, v)).collect::<Result<_, _>>()?)
    }

    pub fn take_records(&mut self) -> BranchLog {
        self.log.take().unwrap_or_default()
    }

    fn decide(&mut self, cond: Cond<DualReal>, site: &'static Location<'static>) -> bool {
        let (g, rel) = cond.into_g();
        let taken = rel.holds(g.value());
        if let Some(log) = &mut self.log {
            log.push(SiteKey::from(site), &g, taken);
        }
        taken
    }
}

impl Exec for DualExec {
    type Real = DualReal;

    fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    #[track_caller]
    fn branch<V, T, F>(&mut self, cond: Cond<DualReal>, vars: &mut V, then_body: T, else_body: F) -> BodyResult
    where
        V: Carry<DualReal> + ?Sized,
        T: FnOnce(&mut Self, &mut V) -> BodyResult,
        F: FnOnce(&mut Self, &mut V) -> BodyResult,
    {
        if self.decide(cond, Location::caller()) {
            then_body(self, vars)
        } else {
            else_body(self, vars)
        }
    }

    #[track_caller]
    fn while_loop<V, C, B>(&mut self, vars: &mut V, mut cond: C, mut body: B) -> BodyResult
    where
        V: Carry<DualReal> + ?Sized,
        C: FnMut(&mut Self, &V) -> Cond<DualReal>,
        B: FnMut(&mut Self, &mut V) -> BodyResult,
    {
        let site = Location::caller();
        let mut n = 0;
        loop {
            let c = cond(self, vars);
            if !self.decide(c, site) {
                return Ok(());
            }
            if n == self.loop_cap {
                return Err(ProgramError::RunawayLoop { cap: self.loop_cap, site });
            }
            body(self, vars)?;
            n += 1;
        }
    }
}

/// One pathwise AD run at `x`: output value, gradient and branch log.
pub fn dual_run(
    p: &impl Program,
    x: &[f64],
    seed: u64,
    record: bool,
) -> Result<(f64, Vec<f64>, BranchLog), ProgramError> {
    check_dim(p, x)?;
    let ctx = AdContext::new(x.len());
    let mut ex = DualExec::new(Rc::clone(&ctx), seed);
    if record {
        ex = ex.recording();
    }
    let inputs = ex.inputs(x)?;
    let y = p.run(&mut ex, &inputs)?;
    Ok((y.value(), ctx.gradient(&y), ex.take_records()))
}

/// [`dual_run`] with recording into the recycled buffers of `log`.
pub fn dual_run_into(
    p: &impl Program,
    x: &[f64],
    seed: u64,
    log: BranchLog,
) -> Result<(f64, Vec<f64>, BranchLog), ProgramError> {
    check_dim(p, x)?;
    let ctx = AdContext::new(x.len());
    let mut ex = DualExec::new(Rc::clone(&ctx), seed).recording_into(log);
    let inputs = ex.inputs(x)?;
    let y = p.run(&mut ex, &inputs)?;
    Ok((y.value(), ctx.gradient(&y), ex.take_records()))
}

#[cfg(test)]
mod tests {
    use super::*;

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

    struct Countdown;

    impl Program for Countdown {
        fn name(&self) -> String {
            "countdown".into()
        }
        fn dim(&self) -> usize {
            1
        }
        fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
            let mut v = (x[0].clone(), E::Real::from(0.0));
            ex.while_loop(
                &mut v,
                |_, v| Cond::gt(v.0.clone(), 0.0),
                |_, v| {
                    v.0 -= 1.0;
                    v.1 += 1.0;
                    Ok(())
                },
            )?;
            Ok(v.1)
        }
    }

    struct Affine;

    impl Program for Affine {
        fn name(&self) -> String {
            "affine".into()
        }
        fn dim(&self) -> usize {
            1
        }
        fn run<E: Exec>(&self, _: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
            Ok(x[0].clone() * 3.0)
        }
    }

    #[test]
    fn crisp_branch_and_loop() {
        assert_eq!(crisp_run(&Heaviside, &[1.0], 0).unwrap(), 1.0);
        assert_eq!(crisp_run(&Heaviside, &[-1.0], 0).unwrap(), 0.0);
        assert_eq!(crisp_run(&Heaviside, &[0.0], 0).unwrap(), 1.0);
        assert_eq!(crisp_run(&Countdown, &[3.0], 0).unwrap(), 3.0);
        assert_eq!(crisp_run(&Countdown, &[-2.0], 0).unwrap(), 0.0);
        assert_eq!(crisp_run(&Affine, &[2.0], 0).unwrap(), 6.0);
    }

    #[test]
    fn runaway_loop_is_reported() {
        let mut ex = CrispExec::new(0).with_loop_cap(10);
        let err = Countdown.run(&mut ex, &[1e9]).unwrap_err();
        assert!(matches!(err, ProgramError::RunawayLoop { cap: 10, .. }));
    }

    #[test]
    fn dual_records_branches() {
        struct Le;
        impl Program for Le {
            fn name(&self) -> String {
                "le".into()
            }
            fn dim(&self) -> usize {
                1
            }
            fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
                let mut y = E::Real::from(0.0);
                ex.branch(
                    Cond::le(x[0].clone(), 0.0),
                    &mut y,
                    |_, y| {
                        *y = 1.0.into();
                        Ok(())
                    },
                    |_, y| {
                        *y = 2.0.into();
                        Ok(())
                    },
                )?;
                Ok(y)
            }
        }
        let (y, g, rec) = dual_run(&Le, &[0.2], 0, true).unwrap();
        assert_eq!((y, g), (2.0, vec![0.0]));
        assert_eq!(rec.len(), 1);
        assert_eq!(rec[0].g, 0.2);
        assert_eq!(rec.tangent(&rec[0]), [(0, 1.0)]);
        assert!(!rec[0].taken);

        let (y, g, rec) = dual_run(&Heaviside, &[0.3], 0, true).unwrap();
        assert_eq!((y, g), (1.0, vec![0.0]));
        assert_eq!(rec[0].g, -0.3);
        assert_eq!(rec.tangent(&rec[0]), [(0, -1.0)]);
        assert!(rec[0].taken);
    }

    #[test]
    fn loop_encounters_are_numbered() {
        let (y, _, rec) = dual_run(&Countdown, &[2.5], 0, true).unwrap();
        assert_eq!(y, 3.0);
        let enc: Vec<_> = rec.iter().map(|r| (r.encounter, r.taken)).collect();
        assert_eq!(enc, vec![(0, true), (1, true), (2, true), (3, false)]);
        assert!(rec.iter().all(|r| r.site == rec[0].site));
    }

    #[test]
    fn ipa_of_affine() {
        let (y, g, rec) = dual_run(&Affine, &[2.0], 0, true).unwrap();
        assert_eq!((y, g), (6.0, vec![3.0]));
        assert!(rec.is_empty());
    }

    #[test]
    fn dimension_mismatch() {
        assert_eq!(crisp_run(&Affine, &[1.0, 2.0], 0).unwrap_err(), ProgramError::Dimension { expected: 1, got: 2 });
    }
}
