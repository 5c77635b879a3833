use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::rc::Rc;

use ordered_float::OrderedFloat;

use super::{GaussianVal, Path, Strategy};
use crate::ad::DualReal;
use crate::gauss::{merge_parts, GaussError};

/// Moment-matched merge of two paths over the `live` slots.
///
/// A slot defined on only one side is undefined on the result.
pub fn merge_paths(p: &Path, q: &Path, live: &[usize], differentiable_variance: bool) -> Result<Path, GaussError> {
    let weight = &p.weight + &q.weight;
    let mut out = Path { weight, vals: Vec::new() };
    for &s in live {
        if let (Some(a), Some(b)) = (p.get_shared(s), q.get_shared(s)) {
            if Rc::ptr_eq(a, b) {
                out.set_shared(s, Rc::clone(a));
                continue;
            }
            let (_, mean, var) = merge_parts(&p.weight, &a.mean, &a.var, &q.weight, &b.mean, &b.var)?;
            let var = if differentiable_variance { var } else { var.detach() };
            out.set(s, GaussianVal { mean, var });
        }
    }
    if !(out.weight.value() > 0.0) {
        return Err(GaussError::DegenerateMerge);
    }
    Ok(out)
}

fn moments(p: &Path, live: &[usize]) -> Vec<(f64, f64)> {
    live.iter().map(|&s| p.get(s).map_or((f64::NAN, f64::NAN), |g| (g.mean.value(), g.stddev()))).collect()
}

fn moment_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut d = 0.0;
    for (&(ma, sa), &(mb, sb)) in a.iter().zip(b) {
        if ma.is_nan() || mb.is_nan() {
            continue;
        }
        d += (ma - mb) * (ma - mb) + (sa - sb) * (sa - sb);
    }
    d
}

/// Reduces `paths` to at most `target` entries. Survivor order follows the
/// input order; a merged path takes the position of its earlier member.
pub fn restrict(
    paths: Vec<Path>,
    target: usize,
    strategy: Strategy,
    live: &[usize],
    differentiable_variance: bool,
) -> Result<Vec<Path>, GaussError> {
    let target = target.max(1);
    if paths.len() <= target {
        return Ok(paths);
    }
    match strategy {
        Strategy::Di => Ok(discard(paths, target)),
        Strategy::Wo => weights_only(paths, target, live, differentiable_variance),
        Strategy::Ch => pairwise(paths, target, live, differentiable_variance, true),
        Strategy::Iw => pairwise(paths, target, live, differentiable_variance, false),
    }
}

fn discard(paths: Vec<Path>, target: usize) -> Vec<Path> {
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.sort_by(|&a, &b| paths[b].weight.value().total_cmp(&paths[a].weight.value()).then(a.cmp(&b)));
    let mut keep = vec![false; paths.len()];
    for &i in &order[..target] {
        keep[i] = true;
    }
    let mut total = DualReal::constant(0.0);
    let mut kept = DualReal::constant(0.0);
    for (p, &k) in paths.iter().zip(&keep) {
        total += p.weight.clone();
        if k {
            kept += p.weight.clone();
        }
    }
    let factor = &total / &kept;
    paths
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(mut p, _)| {
            p.weight = &p.weight * &factor;
            p
        })
        .collect()
}

fn weights_only(paths: Vec<Path>, target: usize, live: &[usize], dv: bool) -> Result<Vec<Path>, GaussError> {
    let mut heap: BinaryHeap<Reverse<(OrderedFloat<f64>, usize)>> =
        paths.iter().enumerate().map(|(i, p)| Reverse((OrderedFloat(p.weight.value()), i))).collect();
    let mut slots: Vec<Option<Path>> = paths.into_iter().map(Some).collect();
    let mut alive = slots.len();
    while alive > target {
        let Reverse((_, a)) = heap.pop().expect("heap holds every live path");
        let Reverse((_, b)) = heap.pop().expect("at least two live paths");
        let (i, j) = (a.min(b), a.max(b));
        let pj = slots[j].take().expect("live");
        let merged = merge_paths(slots[i].as_ref().expect("live"), &pj, live, dv)?;
        heap.push(Reverse((OrderedFloat(merged.weight.value()), i)));
        slots[i] = Some(merged);
        alive -= 1;
    }
    Ok(slots.into_iter().flatten().collect())
}

type PairEntry = Reverse<(OrderedFloat<f64>, usize, usize, u32, u32)>;

fn pairwise(
    paths: Vec<Path>,
    target: usize,
    live: &[usize],
    dv: bool,
    weighted: bool,
) -> Result<Vec<Path>, GaussError> {
    let n = paths.len();
    let mut mom: Vec<Vec<(f64, f64)>> = paths.iter().map(|p| moments(p, live)).collect();
    let mut w: Vec<f64> = paths.iter().map(|p| p.weight.value()).collect();
    let mut version = vec![0u32; n];
    let cost = |mom: &[Vec<(f64, f64)>], w: &[f64], i: usize, j: usize| {
        let d = moment_distance(&mom[i], &mom[j]);
        if weighted {
            d * w[i] * w[j] / (w[i] + w[j])
        } else {
            d
        }
    };
    let mut heap: BinaryHeap<PairEntry> = BinaryHeap::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            heap.push(Reverse((OrderedFloat(cost(&mom, &w, i, j)), i, j, 0, 0)));
        }
    }
    let mut slots: Vec<Option<Path>> = paths.into_iter().map(Some).collect();
    let mut alive = n;
    while alive > target {
        let Reverse((_, i, j, vi, vj)) = heap.pop().expect("a pair remains while alive > 1");
        if slots[i].is_none() || slots[j].is_none() || version[i] != vi || version[j] != vj {
            continue;
        }
        let pj = slots[j].take().expect("live");
        let merged = merge_paths(slots[i].as_ref().expect("live"), &pj, live, dv)?;
        mom[i] = moments(&merged, live);
        w[i] = merged.weight.value();
        slots[i] = Some(merged);
        version[i] += 1;
        alive -= 1;
        for k in 0..n {
            if k == i || slots[k].is_none() {
                continue;
            }
            let (a, b) = (i.min(k), i.max(k));
            heap.push(Reverse((OrderedFloat(cost(&mom, &w, a, b)), a, b, version[a], version[b])));
        }
    }
    Ok(slots.into_iter().flatten().collect())
}
