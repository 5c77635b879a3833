use std::panic::Location;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::state::{SiShared, SiState};
use super::{restrict, GaussianVal, Path, SiConfig, SiScalar, SiStats};
use crate::ad::{AdContext, DualReal};
use crate::gauss::prob_cond_true;
use crate::program::{
    carried_values, check_dim, restore_values, BodyResult, Carry, Cond, Exec, GradResult, Program, ProgramError,
};

/// The SI back-end for one execution.
pub struct SiExec {
    shared: Rc<SiShared>,
    rng: ChaCha8Rng,
}

impl SiExec {
    /// A fresh execution with inputs `X_i ~ N(x_i, σ_i²)`.
    pub fn new(x: &[f64], sigma: &[f64], cfg: SiConfig, seed: u64) -> Result<(Self, Vec<SiScalar>), ProgramError> {
        if sigma.len() != x.len() {
            return Err(ProgramError::Dimension { expected: x.len(), got: sigma.len() });
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(ProgramError::Config("smoothing factors must be non-negative".into()));
        }
        if cfg.restrict.max_paths == 0 {
            return Err(ProgramError::Config("at least one path must be tracked".into()));
        }
        let ctx = AdContext::new(x.len());
        let var: Vec<f64> = sigma.iter().map(|s| s * s).collect();
        let shared = SiShared::new(Rc::clone(&ctx), cfg, var.clone());
        let ids = shared.with(|st| -> Result<Vec<usize>, ProgramError> {
            let mut ids = Vec::with_capacity(x.len());
            for (i, (&xi, &vi)) in x.iter().zip(&var).enumerate() {
                let id = st.alloc();
                let mean = ctx.input(i, xi)?;
                st.active[0].set(id, GaussianVal { mean, var: vi.into() });
                ids.push(id);
            }
            st.note_active(1);
            Ok(ids)
        })?;
        let inputs = ids.into_iter().map(|id| shared.handle(id)).collect();
        Ok((Self { shared, rng: ChaCha8Rng::seed_from_u64(seed) }, inputs))
    }

    fn check(&self) -> BodyResult {
        self.shared.with(|st| match st.error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        })
    }

    /// Weights of the currently active paths.
    pub fn weights(&self) -> Vec<f64> {
        self.shared.with(|st| st.active.iter().map(|p| p.weight.value()).collect())
    }

    /// Mean and variance of `v` on every active path.
    pub fn moments(&self, v: &SiScalar) -> Vec<Option<(f64, f64)>> {
        self.shared.with(|st| st.active.iter().map(|p| v.on(p).map(|g| (g.mean.value(), g.var.value()))).collect())
    }

    /// Current branch nesting depth.
    pub fn depth(&self) -> usize {
        self.shared.with(|st| st.depth)
    }

    pub fn stats(&self) -> SiStats {
        self.shared.with(|st| st.stats.clone())
    }

    /// `Σ_p w_p μ_{p,y}` and its gradient wrt. the input means.
    pub fn expectation(&self, y: &SiScalar) -> Result<GradResult, ProgramError> {
        self.check()?;
        let e = self.shared.with(|st| {
            let mut e = DualReal::constant(0.0);
            for p in &st.active {
                match y.on(p) {
                    Some(g) => e += &p.weight * &g.mean,
                    None => st.error = Some(ProgramError::Undefined),
                }
            }
            e
        });
        self.check()?;
        let gradient = self.shared.with(|st| st.ctx.gradient(&e));
        Ok(GradResult { expectation: e.value(), gradient })
    }

    fn finish_stats(&self) -> SiStats {
        self.shared.with(|st| {
            st.stats.final_weight = st.active.iter().map(|p| p.weight.value()).sum();
            st.stats.final_paths = st.active.len();
            st.stats.clone()
        })
    }

    fn restrict_active(&self, target: usize) {
        self.shared.with(|st| {
            if st.active.len() > target {
                restrict_in(st, target);
            }
        })
    }

    /// Splits the active paths on `cond` into (then, else) sets, dropping
    /// paths whose weight falls under the threshold.
    fn split(&self, cond: Cond<SiScalar>) -> (Vec<Path>, Vec<Path>) {
        let (g, rel) = cond.into_g();
        self.shared.with(|st| {
            let thr = st.cfg.restrict.weight_threshold;
            let dv = st.cfg.differentiable_variance;
            let active = std::mem::take(&mut st.active);
            st.stats.branches += 1;
            st.stats.paths_at_branches += active.len();
            let (mut then_p, mut else_p) = (Vec::new(), Vec::new());
            for mut p in active {
                let (qt, qe) = match g.on(&p) {
                    None => {
                        st.fail(ProgramError::Undefined);
                        (DualReal::constant(0.5), DualReal::constant(0.5))
                    }
                    Some(b) if b.var.value() > 0.0 => {
                        let sd = if dv && !b.var.is_constant() {
                            b.var.apply_unary(crate::ad::UnaryOp::Sqrt)
                        } else {
                            DualReal::constant(b.var.value().sqrt())
                        };
                        (prob_cond_true(&b.mean, &sd), prob_cond_true(&-b.mean.clone(), &sd))
                    }
                    Some(b) => {
                        let t = if rel.holds(b.mean.value()) { 1.0 } else { 0.0 };
                        (DualReal::constant(t), DualReal::constant(1.0 - t))
                    }
                };
                let wt = &p.weight * &qt;
                let we = &p.weight * &qe;
                let keep_t = keep(st, &wt, thr);
                let keep_e = keep(st, &we, thr);
                match (keep_t, keep_e) {
                    (true, true) => {
                        let mut t = p.clone();
                        t.weight = wt;
                        p.weight = we;
                        then_p.push(t);
                        else_p.push(p);
                    }
                    (true, false) => {
                        p.weight = wt;
                        then_p.push(p);
                    }
                    (false, true) => {
                        p.weight = we;
                        else_p.push(p);
                    }
                    (false, false) => {}
                }
            }
            st.note_active(then_p.len() + else_p.len());
            (then_p, else_p)
        })
    }

    fn set_active(&self, paths: Vec<Path>) {
        self.shared.with(|st| st.active = paths)
    }

    fn take_active(&self) -> Vec<Path> {
        self.shared.with(|st| std::mem::take(&mut st.active))
    }

    fn enter(&self) {
        self.shared.with(|st| st.depth += 1)
    }

    fn leave(&self) {
        self.shared.with(|st| st.depth -= 1)
    }
}

fn keep(st: &mut SiState, w: &DualReal, thr: f64) -> bool {
    let v = w.value();
    if v > 0.0 && v >= thr {
        st.stats.min_weight = st.stats.min_weight.min(v);
        true
    } else {
        st.stats.dropped_mass += v.max(0.0);
        false
    }
}

fn restrict_in(st: &mut SiState, target: usize) {
    let live = st.live_slots();
    let before = st.active.len();
    let paths = std::mem::take(&mut st.active);
    let rc = st.cfg.restrict;
    match restrict(paths, target, rc.strategy, &live, st.cfg.differentiable_variance) {
        Ok(r) => {
            let removed = before - r.len();
            if rc.strategy == super::Strategy::Di {
                st.stats.discards += removed;
            } else {
                st.stats.merges += removed;
            }
            st.active = r;
        }
        Err(e) => st.fail(e.into()),
    }
}

/// Copies `v`'s per-path value into `slot` on each of `paths`.
fn copy_into(st: &mut SiState, paths: &mut [Path], v: &SiScalar, slot: usize) {
    for p in paths.iter_mut() {
        match v {
            SiScalar::Const(c) => p.set(slot, GaussianVal::point(*c)),
            SiScalar::Slot(_) => match v.slot_id().and_then(|id| p.get_shared(id)).cloned() {
                Some(g) => p.set_shared(slot, g),
                None => st.fail(ProgramError::Undefined),
            },
        }
    }
}

impl Exec for SiExec {
    type Real = SiScalar;

    fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    #[track_caller]
    fn branch<V, T, F>(&mut self, cond: Cond<SiScalar>, vars: &mut V, then_body: T, else_body: F) -> BodyResult
    where
        V: Carry<SiScalar> + ?Sized,
        T: FnOnce(&mut Self, &mut V) -> BodyResult,
        F: FnOnce(&mut Self, &mut V) -> BodyResult,
    {
        let site = Location::caller();
        self.check()?;
        let rc = self.shared.with(|st| st.cfg.restrict);
        self.restrict_active(rc.pre_split_target());
        let (then_p, else_p) = self.split(cond);
        if then_p.is_empty() && else_p.is_empty() {
            self.check()?;
            // inside an arm this only means the arm's mass fell under the
            // threshold; the enclosing join drops the arm
            return if self.depth() == 0 { Err(ProgramError::EmptyState { site }) } else { Ok(()) };
        }
        let orig = carried_values(vars);
        self.enter();
        let (then_done, then_h) = if then_p.is_empty() {
            (Vec::new(), None)
        } else {
            self.set_active(then_p);
            then_body(self, vars)?;
            let h = carried_values(vars);
            restore_values(vars, &orig);
            let done = self.take_active();
            let h = (!done.is_empty()).then_some(h);
            (done, h)
        };
        let (else_done, else_h) = if else_p.is_empty() {
            (Vec::new(), None)
        } else {
            self.set_active(else_p);
            else_body(self, vars)?;
            let done = self.take_active();
            let h = (!done.is_empty()).then(|| carried_values(vars));
            (done, h)
        };
        self.leave();
        let joined = self.join(then_done, then_h, else_done, else_h).unwrap_or_else(|| orig.clone());
        restore_values(vars, &joined);
        drop(orig);
        let empty = self.shared.with(|st| {
            if st.active.len() > rc.max_paths {
                restrict_in(st, rc.max_paths);
            }
            st.note_active(st.active.len());
            scrub(st);
            st.active.is_empty()
        });
        self.check()?;
        if empty && self.depth() == 0 {
            return Err(ProgramError::EmptyState { site });
        }
        Ok(())
    }

    #[track_caller]
    fn while_loop<V, C, B>(&mut self, vars: &mut V, mut cond: C, mut body: B) -> BodyResult
    where
        V: Carry<SiScalar> + ?Sized,
        C: FnMut(&mut Self, &V) -> Cond<SiScalar>,
        B: FnMut(&mut Self, &mut V) -> BodyResult,
    {
        let site = Location::caller();
        self.check()?;
        let (rc, cap) = self.shared.with(|st| (st.cfg.restrict, st.cfg.loop_cap));
        let n_vars = carried_values(vars).len();
        let acc: Vec<usize> = self.shared.with(|st| (0..n_vars).map(|_| st.alloc()).collect());
        let acc_handles: Vec<SiScalar> = acc.iter().map(|&id| self.shared.handle(id)).collect();
        let mut parked: Vec<Path> = Vec::new();
        let mut iterations = 0;
        loop {
            self.restrict_active(rc.pre_split_target());
            let c = cond(self, vars);
            let (enter, mut exit) = self.split(c);
            if enter.is_empty() && exit.is_empty() && parked.is_empty() {
                self.check()?;
                if self.depth() == 0 {
                    return Err(ProgramError::EmptyState { site });
                }
                restore_values(vars, &acc_handles);
                return Ok(());
            }
            let cur = carried_values(vars);
            self.shared.with(|st| {
                for (h, &slot) in cur.iter().zip(&acc) {
                    copy_into(st, &mut exit, h, slot);
                }
                parked.append(&mut exit);
                if parked.len() > rc.max_paths {
                    std::mem::swap(&mut st.active, &mut parked);
                    restrict_in(st, rc.max_paths);
                    std::mem::swap(&mut st.active, &mut parked);
                }
            });
            drop(cur);
            if enter.is_empty() {
                break;
            }
            if iterations == cap {
                return Err(ProgramError::RunawayLoop { cap, site });
            }
            self.set_active(enter);
            self.enter();
            body(self, vars)?;
            self.leave();
            self.check()?;
            iterations += 1;
        }
        self.set_active(parked);
        restore_values(vars, &acc_handles);
        drop(acc_handles);
        self.shared.with(|st| {
            st.note_active(st.active.len());
            scrub(st);
        });
        self.check()
    }
}

impl SiExec {
    /// Reconciles the carried handles of both arms and unions their paths.
    /// `None` if neither arm has paths left.
    fn join(
        &self,
        mut then_done: Vec<Path>,
        then_h: Option<Vec<SiScalar>>,
        mut else_done: Vec<Path>,
        else_h: Option<Vec<SiScalar>>,
    ) -> Option<Vec<SiScalar>> {
        let (th, eh) = match (then_h, else_h) {
            (Some(t), None) => {
                self.set_active(then_done);
                return Some(t);
            }
            (None, Some(e)) => {
                self.set_active(else_done);
                return Some(e);
            }
            (Some(t), Some(e)) => (t, e),
            (None, None) => return None,
        };
        let mut out = Vec::with_capacity(th.len());
        self.shared.with(|st| {
            for (t, e) in th.iter().zip(&eh) {
                if t.same(e) {
                    out.push(Ok(t.clone()));
                    continue;
                }
                let slot = st.alloc();
                copy_into(st, &mut then_done, t, slot);
                copy_into(st, &mut else_done, e, slot);
                out.push(Err(slot));
            }
            then_done.append(&mut else_done);
            st.active = then_done;
        });
        Some(out.into_iter().map(|r| r.unwrap_or_else(|slot| self.shared.handle(slot))).collect())
    }
}

/// Clears values of released slots from the active paths.
fn scrub(st: &mut SiState) {
    let live = st.live_slots();
    let mut is_live = vec![false; live.last().map_or(0, |l| l + 1)];
    for l in live {
        is_live[l] = true;
    }
    for p in &mut st.active {
        p.vals.truncate(is_live.len());
        for (i, v) in p.vals.iter_mut().enumerate() {
            if !is_live[i] {
                *v = None;
            }
        }
    }
}

/// Runs `program` under smooth interpretation with inputs
/// `X_i ~ N(x_i, σ_i²)`.
pub fn si_execute(
    program: &impl Program,
    x: &[f64],
    sigma: &[f64],
    cfg: SiConfig,
    seed: u64,
) -> Result<(GradResult, SiStats), ProgramError> {
    check_dim(program, x)?;
    let (mut ex, inputs) = SiExec::new(x, sigma, cfg, seed)?;
    let y = program.run(&mut ex, &inputs)?;
    drop(inputs);
    let r = ex.expectation(&y)?;
    drop(y);
    Ok((r, ex.finish_stats()))
}
