//! Forward-mode automatic differentiation with sparse, pooled tangents.
//!
//! A [`DualReal`] carries a value and its partial derivatives with respect to
//! the `n` inputs of one execution. Most values in branch-heavy programs
//! depend on at most one input, so tangents start out as either nothing
//! (constants) or a single `(index, derivative)` pair, and are promoted to a
//! dense array only once a second input index shows up. Dense arrays come
//! from a per-context [`TangentPool`] and go back to it on drop.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::panic::Location;
use std::rc::Rc;

/// Denominators with a magnitude at or below this are treated as zero.
pub const DIV_EPSILON: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub enum AdError {
    InputIndex { index: usize, dim: usize },
    DivisionByZero { site: &'static Location<'static> },
    Domain { op: UnaryOp, value: f64, site: &'static Location<'static> },
    Unsupported { op: UnaryOp },
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::InputIndex { index, dim } => {
                write!(f, "input index {index} out of range for dimension {dim}")
            }
            AdError::DivisionByZero { site } => write!(f, "division by zero at {site}"),
            AdError::Domain { op, value, site } => {
                write!(f, "{op:?} undefined at {value} ({site})")
            }
            AdError::Unsupported { op } => {
                write!(f, "{op:?} is not supported on differentiable values; express it with a branch")
            }
        }
    }
}

impl std::error::Error for AdError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    /// Rejected: kinks belong in explicit branches.
    Abs,
}

/// Free list of dense tangent arrays for one context.
#[derive(Debug)]
pub struct TangentPool {
    dim: usize,
    free: Vec<Vec<f64>>,
    allocated: usize,
}

impl TangentPool {
    fn new(dim: usize) -> Self {
        Self { dim, free: Vec::new(), allocated: 0 }
    }

    /// Hands out a zeroed array of length `dim`.
    pub fn take_zeroed(&mut self) -> Vec<f64> {
        let mut v = self.take_dirty();
        v.fill(0.0);
        v
    }

    /// Contents are unspecified (NaN-poisoned in debug builds); the caller
    /// must overwrite every entry.
    fn take_dirty(&mut self) -> Vec<f64> {
        match self.free.pop() {
            Some(v) => v,
            None => {
                self.allocated += 1;
                vec![0.0; self.dim]
            }
        }
    }

    fn give(&mut self, mut v: Vec<f64>) {
        debug_assert_eq!(v.len(), self.dim);
        if cfg!(debug_assertions) {
            v.fill(f64::NAN);
        }
        self.free.push(v);
    }

    /// Arrays ever allocated by this pool.
    pub fn allocated(&self) -> usize {
        self.allocated
    }

    /// Arrays currently sitting in the free list.
    pub fn available(&self) -> usize {
        self.free.len()
    }
}

/// Per-execution AD state: the input dimension and the tangent pool.
#[derive(Debug)]
pub struct AdContext {
    dim: usize,
    pool: RefCell<TangentPool>,
    dense_inputs: bool,
}

impl AdContext {
    pub fn new(dim: usize) -> Rc<Self> {
        Rc::new(Self { dim, pool: RefCell::new(TangentPool::new(dim)), dense_inputs: false })
    }

    /// Like [`AdContext::new`] but inputs start with dense tangents, which
    /// forces every derived value down the dense code path.
    pub fn new_dense(dim: usize) -> Rc<Self> {
        Rc::new(Self { dim, pool: RefCell::new(TangentPool::new(dim)), dense_inputs: true })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pool_allocated(&self) -> usize {
        self.pool.borrow().allocated()
    }

    pub fn pool_available(&self) -> usize {
        self.pool.borrow().available()
    }

    /// Seeds input `i` with value `v` and tangent `e_i`.
    pub fn input(self: &Rc<Self>, i: usize, v: f64) -> Result<DualReal, AdError> {
        if i >= self.dim {
            return Err(AdError::InputIndex { index: i, dim: self.dim });
        }
        let tangent = if self.dense_inputs {
            let mut data = self.pool.borrow_mut().take_zeroed();
            data[i] = 1.0;
            Tangent::Dense(DenseTangent { data, ctx: Rc::clone(self) })
        } else {
            Tangent::Single { idx: i as u32, d: 1.0, ctx: Rc::clone(self) }
        };
        Ok(DualReal { value: v, tangent })
    }

    /// Dense copy of the tangent of `a`, length `dim`.
    pub fn gradient(&self, a: &DualReal) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        a.tangent.for_each_nonzero(|i, d| g[i] = d);
        // -0.0 and 0.0 are not distinguished in gradients
        g.iter_mut().for_each(|x| *x += 0.0);
        g
    }

    fn take_dirty(&self) -> Vec<f64> {
        self.pool.borrow_mut().take_dirty()
    }
}

struct DenseTangent {
    data: Vec<f64>,
    ctx: Rc<AdContext>,
}

impl Clone for DenseTangent {
    fn clone(&self) -> Self {
        let mut data = self.ctx.take_dirty();
        data.copy_from_slice(&self.data);
        Self { data, ctx: Rc::clone(&self.ctx) }
    }
}

impl Drop for DenseTangent {
    fn drop(&mut self) {
        let data = std::mem::take(&mut self.data);
        if let Ok(mut pool) = self.ctx.pool.try_borrow_mut() {
            pool.give(data);
        }
    }
}

#[derive(Clone)]
enum Tangent {
    Zero,
    Single { idx: u32, d: f64, ctx: Rc<AdContext> },
    Dense(DenseTangent),
}

#[inline(always)]
fn lin(da: f64, x: f64, db: f64, y: f64) -> f64 {
    da * x + db * y
}

impl Tangent {
    fn ctx(&self) -> Option<&Rc<AdContext>> {
        match self {
            Tangent::Zero => None,
            Tangent::Single { ctx, .. } => Some(ctx),
            Tangent::Dense(t) => Some(&t.ctx),
        }
    }

    fn for_each_nonzero(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            Tangent::Zero => {}
            Tangent::Single { idx, d, .. } => f(*idx as usize, *d),
            Tangent::Dense(t) => {
                for (i, &d) in t.data.iter().enumerate() {
                    if d != 0.0 {
                        f(i, d);
                    }
                }
            }
        }
    }

    fn get(&self, i: usize) -> f64 {
        match self {
            Tangent::Zero => 0.0,
            Tangent::Single { idx, d, .. } => {
                if *idx as usize == i {
                    *d
                } else {
                    0.0
                }
            }
            Tangent::Dense(t) => t.data[i],
        }
    }

    fn scale(&self, s: f64) -> Tangent {
        match self {
            Tangent::Zero => Tangent::Zero,
            Tangent::Single { idx, d, ctx } => Tangent::Single { idx: *idx, d: s * d, ctx: Rc::clone(ctx) },
            Tangent::Dense(t) => {
                let mut data = t.ctx.take_dirty();
                for (o, &x) in data.iter_mut().zip(&t.data) {
                    *o = s * x;
                }
                Tangent::Dense(DenseTangent { data, ctx: Rc::clone(&t.ctx) })
            }
        }
    }

    fn scale_in_place(&mut self, s: f64) {
        match self {
            Tangent::Zero => {}
            Tangent::Single { d, .. } => *d *= s,
            Tangent::Dense(t) => t.data.iter_mut().for_each(|x| *x *= s),
        }
    }

    /// `da * a + db * b`, elementwise.
    fn combine(da: f64, a: &Tangent, db: f64, b: &Tangent) -> Tangent {
        match (a, b) {
            (Tangent::Zero, Tangent::Zero) => Tangent::Zero,
            (Tangent::Single { idx, d, ctx }, Tangent::Zero) => {
                Tangent::Single { idx: *idx, d: lin(da, *d, db, 0.0), ctx: Rc::clone(ctx) }
            }
            (Tangent::Zero, Tangent::Single { idx, d, ctx }) => {
                Tangent::Single { idx: *idx, d: lin(da, 0.0, db, *d), ctx: Rc::clone(ctx) }
            }
            (Tangent::Single { idx: i, d: x, ctx }, Tangent::Single { idx: j, d: y, .. }) if i == j => {
                Tangent::Single { idx: *i, d: lin(da, *x, db, *y), ctx: Rc::clone(ctx) }
            }
            _ => {
                let ctx = a.ctx().or(b.ctx()).expect("non-zero tangent carries a context");
                let mut data = ctx.take_dirty();
                Self::combine_into(&mut data, da, a, db, b);
                Tangent::Dense(DenseTangent { data, ctx: Rc::clone(ctx) })
            }
        }
    }

    fn combine_into(out: &mut [f64], da: f64, a: &Tangent, db: f64, b: &Tangent) {
        match (a, b) {
            (Tangent::Dense(x), Tangent::Dense(y)) => {
                for ((o, &x), &y) in out.iter_mut().zip(&x.data).zip(&y.data) {
                    *o = lin(da, x, db, y);
                }
            }
            (Tangent::Dense(x), other) => {
                for (o, &x) in out.iter_mut().zip(&x.data) {
                    *o = lin(da, x, db, 0.0);
                }
                other.for_each_nonzero(|j, y| out[j] = lin(da, a.get(j), db, y));
            }
            (other, Tangent::Dense(y)) => {
                for (o, &y) in out.iter_mut().zip(&y.data) {
                    *o = lin(da, 0.0, db, y);
                }
                other.for_each_nonzero(|j, x| out[j] = lin(da, x, db, b.get(j)));
            }
            _ => {
                out.fill(0.0);
                a.for_each_nonzero(|i, x| out[i] = lin(da, x, db, b.get(i)));
                b.for_each_nonzero(|j, y| out[j] = lin(da, a.get(j), db, y));
            }
        }
    }
}

/// A value together with its partial derivatives wrt. the execution inputs.
#[derive(Clone)]
pub struct DualReal {
    value: f64,
    tangent: Tangent,
}

impl fmt::Debug for DualReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut nz = Vec::new();
        self.tangent.for_each_nonzero(|i, d| nz.push((i, d)));
        f.debug_struct("DualReal").field("value", &self.value).field("tangent", &nz).finish()
    }
}

impl From<f64> for DualReal {
    fn from(v: f64) -> Self {
        DualReal::constant(v)
    }
}

impl DualReal {
    pub fn constant(v: f64) -> Self {
        Self { value: v, tangent: Tangent::Zero }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// Partial derivative wrt. input `i`.
    pub fn partial(&self, i: usize) -> f64 {
        self.tangent.get(i)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.tangent, Tangent::Zero)
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.tangent, Tangent::Dense(_))
    }

    /// Non-zero tangent entries in increasing index order.
    pub fn nonzeros(&self) -> Vec<(u32, f64)> {
        let mut out = Vec::new();
        self.tangent.for_each_nonzero(|i, d| out.push((i as u32, d)));
        out
    }

    pub fn for_each_nonzero(&self, f: impl FnMut(usize, f64)) {
        self.tangent.for_each_nonzero(f)
    }

    /// `Σ_i (∂self/∂x_i)² · w_i`.
    pub fn weighted_tangent_sq(&self, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.tangent.for_each_nonzero(|i, d| acc += d * d * w[i]);
        acc
    }

    /// Same value, tangent dropped.
    pub fn detach(&self) -> Self {
        Self::constant(self.value)
    }

    fn with_tangent(value: f64, tangent: Tangent) -> Self {
        Self { value, tangent }
    }

    /// Value and partials `(∂/∂a, ∂/∂b)` of a binary op.
    pub(crate) fn binary_parts(op: BinaryOp, a: f64, b: f64, b_const: bool) -> (f64, f64, f64) {
        match op {
            BinaryOp::Add => (a + b, 1.0, 1.0),
            BinaryOp::Sub => (a - b, 1.0, -1.0),
            BinaryOp::Mul => (a * b, b, a),
            BinaryOp::Div => (a / b, 1.0 / b, -a / (b * b)),
            BinaryOp::Min => {
                if a <= b {
                    (a, 1.0, 0.0)
                } else {
                    (b, 0.0, 1.0)
                }
            }
            BinaryOp::Max => {
                if a >= b {
                    (a, 1.0, 0.0)
                } else {
                    (b, 0.0, 1.0)
                }
            }
            BinaryOp::Pow => {
                let v = a.powf(b);
                let da = if b == 0.0 { 0.0 } else { b * a.powf(b - 1.0) };
                let db = if b_const || a <= 0.0 { 0.0 } else { v * a.ln() };
                (v, da, db)
            }
        }
    }

    /// Value and derivative of a unary op; `None` for rejected ops.
    pub(crate) fn unary_parts(op: UnaryOp, a: f64) -> Option<(f64, f64)> {
        Some(match op {
            UnaryOp::Neg => (-a, -1.0),
            UnaryOp::Exp => {
                let e = a.exp();
                (e, e)
            }
            UnaryOp::Ln => (a.ln(), 1.0 / a),
            UnaryOp::Sqrt => {
                let s = a.sqrt();
                (s, 0.5 / s)
            }
            UnaryOp::Sin => (a.sin(), a.cos()),
            UnaryOp::Cos => (a.cos(), -a.sin()),
            UnaryOp::Tanh => {
                let t = a.tanh();
                (t, 1.0 - t * t)
            }
            UnaryOp::Abs => return None,
        })
    }

    /// Unchecked binary op with IEEE semantics at singular points.
    pub fn apply_binary(&self, op: BinaryOp, rhs: &DualReal) -> DualReal {
        let (v, da, db) = Self::binary_parts(op, self.value, rhs.value, rhs.is_constant());
        DualReal::with_tangent(v, Tangent::combine(da, &self.tangent, db, &rhs.tangent))
    }

    fn apply_binary_owned(mut self, op: BinaryOp, rhs: &DualReal) -> DualReal {
        let (v, da, db) = Self::binary_parts(op, self.value, rhs.value, rhs.is_constant());
        self.value = v;
        if let Tangent::Dense(t) = &mut self.tangent {
            match &rhs.tangent {
                Tangent::Dense(y) => {
                    for (o, &y) in t.data.iter_mut().zip(&y.data) {
                        *o = lin(da, *o, db, y);
                    }
                }
                Tangent::Single { idx, d, .. } => {
                    let j = *idx as usize;
                    let xj = t.data[j];
                    for o in t.data.iter_mut() {
                        *o = lin(da, *o, db, 0.0);
                    }
                    t.data[j] = lin(da, xj, db, *d);
                }
                Tangent::Zero => {
                    for o in t.data.iter_mut() {
                        *o = lin(da, *o, db, 0.0);
                    }
                }
            }
        } else {
            let t = Tangent::combine(da, &self.tangent, db, &rhs.tangent);
            self.tangent = t;
        }
        self
    }

    /// Checked binary op. Division by (near) zero is an error.
    #[track_caller]
    pub fn binary(&self, op: BinaryOp, rhs: &DualReal) -> Result<DualReal, AdError> {
        if op == BinaryOp::Div && rhs.value.abs() <= DIV_EPSILON {
            return Err(AdError::DivisionByZero { site: Location::caller() });
        }
        Ok(self.apply_binary(op, rhs))
    }

    /// Unchecked unary op. `Abs` yields NaN.
    pub fn apply_unary(&self, op: UnaryOp) -> DualReal {
        match Self::unary_parts(op, self.value) {
            Some((v, d)) => DualReal::with_tangent(v, self.tangent.scale(d)),
            None => DualReal::constant(f64::NAN),
        }
    }

    /// Applies a scalar function given its value and derivative at `self`.
    pub fn chain(&self, value: f64, deriv: f64) -> DualReal {
        DualReal::with_tangent(value, self.tangent.scale(deriv))
    }

    /// Checked unary op: domain violations and `Abs` are errors.
    #[track_caller]
    pub fn unary(&self, op: UnaryOp) -> Result<DualReal, AdError> {
        let site = Location::caller();
        match op {
            UnaryOp::Abs => return Err(AdError::Unsupported { op }),
            UnaryOp::Ln if self.value <= 0.0 => return Err(AdError::Domain { op, value: self.value, site }),
            UnaryOp::Sqrt if self.value < 0.0 => return Err(AdError::Domain { op, value: self.value, site }),
            _ => {}
        }
        Ok(self.apply_unary(op))
    }
}

macro_rules! dual_binop {
    ($tr:ident, $m:ident, $op:expr) => {
        impl $tr<DualReal> for DualReal {
            type Output = DualReal;
            fn $m(self, rhs: DualReal) -> DualReal {
                self.apply_binary_owned($op, &rhs)
            }
        }
        impl<'a> $tr<&'a DualReal> for DualReal {
            type Output = DualReal;
            fn $m(self, rhs: &'a DualReal) -> DualReal {
                self.apply_binary_owned($op, rhs)
            }
        }
        impl<'a> $tr<&'a DualReal> for &'a DualReal {
            type Output = DualReal;
            fn $m(self, rhs: &'a DualReal) -> DualReal {
                self.apply_binary($op, rhs)
            }
        }
    };
}

dual_binop!(Add, add, BinaryOp::Add);
dual_binop!(Sub, sub, BinaryOp::Sub);
dual_binop!(Mul, mul, BinaryOp::Mul);
dual_binop!(Div, div, BinaryOp::Div);

impl Add<f64> for DualReal {
    type Output = DualReal;
    fn add(mut self, c: f64) -> DualReal {
        self.value += c;
        self
    }
}

impl Sub<f64> for DualReal {
    type Output = DualReal;
    fn sub(mut self, c: f64) -> DualReal {
        self.value -= c;
        self
    }
}

impl Mul<f64> for DualReal {
    type Output = DualReal;
    fn mul(mut self, c: f64) -> DualReal {
        self.value *= c;
        self.tangent.scale_in_place(c);
        self
    }
}

impl Div<f64> for DualReal {
    type Output = DualReal;
    fn div(mut self, c: f64) -> DualReal {
        self.value /= c;
        self.tangent.scale_in_place(1.0 / c);
        self
    }
}

impl Neg for DualReal {
    type Output = DualReal;
    fn neg(mut self) -> DualReal {
        self.value = -self.value;
        self.tangent.scale_in_place(-1.0);
        self
    }
}

impl AddAssign<DualReal> for DualReal {
    fn add_assign(&mut self, rhs: DualReal) {
        let lhs = std::mem::replace(self, DualReal::constant(0.0));
        *self = lhs.apply_binary_owned(BinaryOp::Add, &rhs);
    }
}

impl SubAssign<DualReal> for DualReal {
    fn sub_assign(&mut self, rhs: DualReal) {
        let lhs = std::mem::replace(self, DualReal::constant(0.0));
        *self = lhs.apply_binary_owned(BinaryOp::Sub, &rhs);
    }
}

impl AddAssign<f64> for DualReal {
    fn add_assign(&mut self, c: f64) {
        self.value += c;
    }
}

impl SubAssign<f64> for DualReal {
    fn sub_assign(&mut self, c: f64) {
        self.value -= c;
    }
}

impl MulAssign<f64> for DualReal {
    fn mul_assign(&mut self, c: f64) {
        self.value *= c;
        self.tangent.scale_in_place(c);
    }
}
