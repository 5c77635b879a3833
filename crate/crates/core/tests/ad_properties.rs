//! Forward-mode derivatives of random branch-free compositions against
//! finite differences, and sparse against dense tangent storage.

use proptest::prelude::*;
use smoothgrad_core::program::SmoothReal;
use smoothgrad_core::AdContext;

const DIM: usize = 3;

/// One node of a straight-line program over earlier nodes. Every op is
/// smooth and keeps magnitudes moderate so differences stay well-conditioned.
#[derive(Debug, Clone, Copy)]
enum Op {
    Add(usize, usize),
    Sub(usize, usize),
    /// `a · tanh(b)`.
    MulSquashed(usize, usize),
    /// `a / (1 + b²)`.
    DivSafe(usize, usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    /// `exp(tanh(a))`.
    ExpSquashed(usize),
    /// `ln(1 + a²)`.
    LogSafe(usize),
    /// `√(1 + a²)`.
    SqrtSafe(usize),
    Scale(usize, f64),
}

fn op_strategy() -> impl Strategy<Value = (u8, usize, usize, f64)> {
    (0u8..11, any::<usize>(), any::<usize>(), -2.0f64..2.0)
}

fn build(raw: &[(u8, usize, usize, f64)]) -> Vec<Op> {
    raw.iter()
        .enumerate()
        .map(|(i, &(k, a, b, c))| {
            let n = DIM + i;
            let (a, b) = (a % n, b % n);
            match k {
                0 => Op::Add(a, b),
                1 => Op::Sub(a, b),
                2 => Op::MulSquashed(a, b),
                3 => Op::DivSafe(a, b),
                4 => Op::Sin(a),
                5 => Op::Cos(a),
                6 => Op::Tanh(a),
                7 => Op::ExpSquashed(a),
                8 => Op::LogSafe(a),
                9 => Op::SqrtSafe(a),
                _ => Op::Scale(a, c),
            }
        })
        .collect()
}

/// Evaluates the program; the output is the sum of the last three nodes.
fn eval<R: SmoothReal>(ops: &[Op], x: &[R]) -> R {
    let mut v: Vec<R> = x.to_vec();
    for op in ops {
        let out = match *op {
            Op::Add(a, b) => v[a].clone() + &v[b],
            Op::Sub(a, b) => v[a].clone() - &v[b],
            Op::MulSquashed(a, b) => v[a].clone() * v[b].tanh(),
            Op::DivSafe(a, b) => v[a].clone() / (v[b].square() + 1.0),
            Op::Sin(a) => v[a].sin(),
            Op::Cos(a) => v[a].cos(),
            Op::Tanh(a) => v[a].tanh(),
            Op::ExpSquashed(a) => v[a].tanh().exp(),
            Op::LogSafe(a) => (v[a].square() + 1.0).ln(),
            Op::SqrtSafe(a) => (v[a].square() + 1.0).sqrt(),
            Op::Scale(a, c) => v[a].clone() * c,
        };
        v.push(out);
    }
    let n = v.len();
    v[n - 3..].iter().cloned().fold(R::from(0.0), |acc, t| acc + t)
}

fn ad_gradient(ops: &[Op], x: &[f64], dense: bool) -> (f64, Vec<f64>) {
    let ctx = if dense { AdContext::new_dense(DIM) } else { AdContext::new(DIM) };
    let inputs: Vec<_> = x.iter().enumerate().map(|(i, &v)| ctx.input(i, v).unwrap()).collect();
    let y = eval(ops, &inputs);
    (y.value(), ctx.gradient(&y))
}

/// Fourth-order central difference.
fn fd_gradient(ops: &[Op], x: &[f64]) -> Vec<f64> {
    let h = 1e-3;
    (0..DIM)
        .map(|k| {
            let at = |d: f64| {
                let mut xs = x.to_vec();
                xs[k] += d;
                eval::<f64>(ops, &xs)
            };
            (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ad_matches_finite_differences(
        raw in prop::collection::vec(op_strategy(), 3..16),
        x in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let ops = build(&raw);
        let (y, g) = ad_gradient(&ops, &x, false);
        prop_assert_eq!(y, eval::<f64>(&ops, &x));
        let fd = fd_gradient(&ops, &x);
        for k in 0..DIM {
            // relative error with a unit floor: near-zero partials are compared absolutely
            let scale = g[k].abs().max(fd[k].abs()).max(1.0);
            prop_assert!((g[k] - fd[k]).abs() / scale <= 1e-6, "dim {}: ad {} fd {}", k, g[k], fd[k]);
        }
    }

    #[test]
    fn sparse_and_dense_tangents_agree_bitwise(
        raw in prop::collection::vec(op_strategy(), 1..24),
        x in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let ops = build(&raw);
        let (ys, gs) = ad_gradient(&ops, &x, false);
        let (yd, gd) = ad_gradient(&ops, &x, true);
        prop_assert_eq!(ys.to_bits(), yd.to_bits());
        let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&gs), bits(&gd));
    }
}
