use std::borrow::Cow;
use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::rc::Rc;

use super::{si_binary, si_unary, GaussianVal, Path, SiConfig, SiStats, VarianceRule};
use crate::ad::{AdContext, BinaryOp, DualReal, UnaryOp};
use crate::program::{Carry, ProgramError, SmoothReal};

/// Mutable SI state shared by an execution and all its value handles.
pub(crate) struct SiState {
    pub ctx: Rc<AdContext>,
    pub cfg: SiConfig,
    pub input_var: Vec<f64>,
    /// Paths of the innermost scope; the only ones operations write to.
    pub active: Vec<Path>,
    live: Vec<bool>,
    free: Vec<usize>,
    pub error: Option<ProgramError>,
    pub stats: SiStats,
    pub depth: usize,
}

impl SiState {
    pub fn alloc(&mut self) -> usize {
        match self.free.pop() {
            Some(id) => {
                self.live[id] = true;
                id
            }
            None => {
                self.live.push(true);
                self.live.len() - 1
            }
        }
    }

    fn release(&mut self, id: usize) {
        self.live[id] = false;
        self.free.push(id);
        for p in &mut self.active {
            if let Some(v) = p.vals.get_mut(id) {
                *v = None;
            }
        }
    }

    pub fn live_slots(&self) -> Vec<usize> {
        self.live.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect()
    }

    pub fn fail(&mut self, e: ProgramError) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    pub fn note_active(&mut self, n: usize) {
        self.stats.max_active = self.stats.max_active.max(n);
    }
}

pub(crate) struct SiShared {
    state: RefCell<SiState>,
    /// Slots released while the state was borrowed.
    pending: RefCell<Vec<usize>>,
}

impl SiShared {
    pub fn new(ctx: Rc<AdContext>, cfg: SiConfig, input_var: Vec<f64>) -> Rc<Self> {
        let state = SiState {
            ctx,
            cfg,
            input_var,
            active: vec![Path { weight: DualReal::constant(1.0), vals: Vec::new() }],
            live: Vec::new(),
            free: Vec::new(),
            error: None,
            stats: SiStats { min_weight: 1.0, ..SiStats::default() },
            depth: 0,
        };
        Rc::new(Self { state: RefCell::new(state), pending: RefCell::new(Vec::new()) })
    }

    /// Runs `f` on the state after applying deferred slot releases.
    pub fn with<T>(&self, f: impl FnOnce(&mut SiState) -> T) -> T {
        let mut st = self.state.borrow_mut();
        let pending = std::mem::take(&mut *self.pending.borrow_mut());
        for id in pending {
            st.release(id);
        }
        f(&mut st)
    }

    /// Wraps a freshly allocated slot id.
    pub fn handle(self: &Rc<Self>, id: usize) -> SiScalar {
        SiScalar::Slot(Rc::new(SlotHandle { id, shared: Rc::clone(self) }))
    }
}

pub struct SlotHandle {
    id: usize,
    shared: Rc<SiShared>,
}

impl Drop for SlotHandle {
    fn drop(&mut self) {
        match self.shared.state.try_borrow_mut() {
            Ok(mut st) => st.release(self.id),
            Err(_) => self.shared.pending.borrow_mut().push(self.id),
        }
    }
}

/// A smooth value under SI: a crisp constant, or a slot holding one Gaussian
/// per path.
#[derive(Clone)]
pub enum SiScalar {
    Const(f64),
    Slot(Rc<SlotHandle>),
}

impl fmt::Debug for SiScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiScalar::Const(c) => write!(f, "Const({c})"),
            SiScalar::Slot(h) => write!(f, "Slot({})", h.id),
        }
    }
}

impl From<f64> for SiScalar {
    fn from(c: f64) -> Self {
        SiScalar::Const(c)
    }
}

impl SiScalar {
    pub(crate) fn shared(&self) -> Option<&Rc<SiShared>> {
        match self {
            SiScalar::Const(_) => None,
            SiScalar::Slot(h) => Some(&h.shared),
        }
    }

    /// Whether two handles denote the same value on every path.
    pub(crate) fn same(&self, o: &SiScalar) -> bool {
        match (self, o) {
            (SiScalar::Const(a), SiScalar::Const(b)) => a.to_bits() == b.to_bits(),
            (SiScalar::Slot(a), SiScalar::Slot(b)) => a.id == b.id,
            _ => false,
        }
    }

    /// This value on path `p`; `None` if undefined there.
    pub(crate) fn on<'a>(&self, p: &'a Path) -> Option<Cow<'a, GaussianVal>> {
        match self {
            SiScalar::Const(c) => Some(Cow::Owned(GaussianVal::point(*c))),
            SiScalar::Slot(h) => p.get(h.id).map(Cow::Borrowed),
        }
    }

    pub(crate) fn slot_id(&self) -> Option<usize> {
        match self {
            SiScalar::Const(_) => None,
            SiScalar::Slot(h) => Some(h.id),
        }
    }

    /// The crisp value if this is a constant.
    pub fn as_const(&self) -> Option<f64> {
        match self {
            SiScalar::Const(c) => Some(*c),
            SiScalar::Slot(_) => None,
        }
    }
}

fn shared_of<'a>(a: &'a SiScalar, b: &'a SiScalar) -> &'a Rc<SiShared> {
    a.shared().or_else(|| b.shared()).expect("at least one operand is a slot")
}

fn read<'a>(st_err: &mut Option<ProgramError>, v: &SiScalar, p: &'a Path) -> Cow<'a, GaussianVal> {
    v.on(p).unwrap_or_else(|| {
        if st_err.is_none() {
            *st_err = Some(ProgramError::Undefined);
        }
        Cow::Owned(GaussianVal::point(f64::NAN))
    })
}

fn binop(a: &SiScalar, op: BinaryOp, b: &SiScalar) -> SiScalar {
    if let (SiScalar::Const(x), SiScalar::Const(y)) = (a, b) {
        return SiScalar::Const(DualReal::binary_parts(op, *x, *y, true).0);
    }
    let shared = shared_of(a, b);
    if let (Some(sa), Some(sb)) = (a.shared(), b.shared()) {
        if !Rc::ptr_eq(sa, sb) {
            shared.with(|st| st.fail(ProgramError::Undefined));
            return SiScalar::Const(f64::NAN);
        }
    }
    let id = shared.with(|st| {
        let id = st.alloc();
        let SiState { active, cfg, input_var, error, .. } = st;
        let rule = VarianceRule { mode: cfg.variance, differentiable: cfg.differentiable_variance, input_var };
        for p in active.iter_mut() {
            let r = {
                let va = read(error, a, p);
                let vb = read(error, b, p);
                si_binary(op, &va, &vb, &rule)
            };
            p.set(id, r);
        }
        id
    });
    shared.handle(id)
}

fn unop(a: &SiScalar, op: UnaryOp) -> SiScalar {
    let shared = match a {
        SiScalar::Const(x) => return SiScalar::Const(DualReal::unary_parts(op, *x).map_or(f64::NAN, |(v, _)| v)),
        SiScalar::Slot(h) => &h.shared,
    };
    let id = shared.with(|st| {
        let id = st.alloc();
        let SiState { active, cfg, input_var, error, .. } = st;
        let rule = VarianceRule { mode: cfg.variance, differentiable: cfg.differentiable_variance, input_var };
        for p in active.iter_mut() {
            let r = si_unary(op, &read(error, a, p), &rule);
            p.set(id, r);
        }
        id
    });
    shared.handle(id)
}

macro_rules! si_ops {
    ($tr:ident, $m:ident, $atr:ident, $am:ident, $op:expr) => {
        impl $tr<SiScalar> for SiScalar {
            type Output = SiScalar;
            fn $m(self, rhs: SiScalar) -> SiScalar {
                binop(&self, $op, &rhs)
            }
        }
        impl<'a> $tr<&'a SiScalar> for SiScalar {
            type Output = SiScalar;
            fn $m(self, rhs: &'a SiScalar) -> SiScalar {
                binop(&self, $op, rhs)
            }
        }
        impl<'a> $tr<&'a SiScalar> for &'a SiScalar {
            type Output = SiScalar;
            fn $m(self, rhs: &'a SiScalar) -> SiScalar {
                binop(self, $op, rhs)
            }
        }
        impl $tr<f64> for SiScalar {
            type Output = SiScalar;
            fn $m(self, rhs: f64) -> SiScalar {
                binop(&self, $op, &SiScalar::Const(rhs))
            }
        }
        impl $atr<SiScalar> for SiScalar {
            fn $am(&mut self, rhs: SiScalar) {
                *self = binop(self, $op, &rhs);
            }
        }
        impl $atr<f64> for SiScalar {
            fn $am(&mut self, rhs: f64) {
                *self = binop(self, $op, &SiScalar::Const(rhs));
            }
        }
    };
}

si_ops!(Add, add, AddAssign, add_assign, BinaryOp::Add);
si_ops!(Sub, sub, SubAssign, sub_assign, BinaryOp::Sub);
si_ops!(Mul, mul, MulAssign, mul_assign, BinaryOp::Mul);

impl Div<SiScalar> for SiScalar {
    type Output = SiScalar;
    fn div(self, rhs: SiScalar) -> SiScalar {
        binop(&self, BinaryOp::Div, &rhs)
    }
}

impl<'a> Div<&'a SiScalar> for SiScalar {
    type Output = SiScalar;
    fn div(self, rhs: &'a SiScalar) -> SiScalar {
        binop(&self, BinaryOp::Div, rhs)
    }
}

impl Div<f64> for SiScalar {
    type Output = SiScalar;
    fn div(self, rhs: f64) -> SiScalar {
        binop(&self, BinaryOp::Div, &SiScalar::Const(rhs))
    }
}

impl Neg for SiScalar {
    type Output = SiScalar;
    fn neg(self) -> SiScalar {
        unop(&self, UnaryOp::Neg)
    }
}

impl Carry<SiScalar> for SiScalar {
    fn visit(&mut self, f: &mut dyn FnMut(&mut SiScalar)) {
        f(self)
    }
}

impl SmoothReal for SiScalar {
    fn exp(&self) -> Self {
        unop(self, UnaryOp::Exp)
    }
    fn ln(&self) -> Self {
        unop(self, UnaryOp::Ln)
    }
    fn sqrt(&self) -> Self {
        unop(self, UnaryOp::Sqrt)
    }
    fn sin(&self) -> Self {
        unop(self, UnaryOp::Sin)
    }
    fn cos(&self) -> Self {
        unop(self, UnaryOp::Cos)
    }
    fn tanh(&self) -> Self {
        unop(self, UnaryOp::Tanh)
    }
    fn powf(&self, e: f64) -> Self {
        binop(self, BinaryOp::Pow, &SiScalar::Const(e))
    }
    fn pow(&self, e: &Self) -> Self {
        binop(self, BinaryOp::Pow, e)
    }
    fn min(&self, o: &Self) -> Self {
        binop(self, BinaryOp::Min, o)
    }
    fn max(&self, o: &Self) -> Self {
        binop(self, BinaryOp::Max, o)
    }
}
