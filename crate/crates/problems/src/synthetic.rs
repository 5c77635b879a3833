//! A chain of input- and state-dependent branches over two inputs, with an
//! exact path-enumeration oracle for its smoothed semantics.
//!
//! Branch `i` tests `a_i·x_{i mod 2} + c_i·y ≤ t_i` and adds an affine term
//! of one input to the accumulator `y` on either arm. Because later
//! conditions read `y`, merging paths changes later branch probabilities,
//! which is what makes restriction lossy.

use smoothgrad_core::gauss::{normal_cdf, normal_pdf};
use smoothgrad_core::{Cond, Exec, Program, ProgramError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub a: f64,
    pub c: f64,
    pub t: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Stage {
    /// Coefficients of branch `i`; thresholds are pairwise distinct.
    pub fn of(i: usize) -> Self {
        let f = i as f64;
        Stage {
            a: 1.0 + 0.1 * f,
            c: if i % 2 == 0 { 0.5 } else { -0.3 },
            t: 0.35 * f - 0.6,
            alpha: 1.0 + 0.2 * (i % 4) as f64,
            beta: 0.5 * (i % 3) as f64 - 0.5,
            gamma: 0.7 + 0.1 * (i % 5) as f64,
            delta: 1.0 - 0.25 * f,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    stages: Vec<Stage>,
}

impl Synthetic {
    /// # Panics
    /// If `depth` is 0.
    pub fn new(depth: usize) -> Self {
        assert!(depth >= 1, "synthetic program needs at least one branch");
        Self { stages: (0..depth).map(Stage::of).collect() }
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }
}

impl Program for Synthetic {
    fn name(&self) -> String {
        format!("synthetic{}", self.depth())
    }

    fn dim(&self) -> usize {
        2
    }

    fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
        let mut y = E::Real::from(0.0);
        for (i, s) in self.stages.iter().enumerate() {
            let xi = &x[i % 2];
            let xo = &x[(i + 1) % 2];
            let lhs = xi.clone() * s.a + y.clone() * s.c;
            ex.branch(
                Cond::le(lhs, s.t),
                &mut y,
                |_, y| {
                    *y += xi.clone() * s.alpha + s.beta;
                    Ok(())
                },
                |_, y| {
                    *y += xo.clone() * (-s.gamma) + s.delta;
                    Ok(())
                },
            )?;
        }
        Ok(y)
    }
}

/// Expectation and gradient of [`Synthetic`] under smoothing with
/// independent Gaussian inputs `N(x_i, σ_i²)`, every path tracked and no
/// weight threshold: each of the `2^depth` paths is enumerated with its
/// weight (a product of normal CDFs) and the mean of `y` on it, both
/// differentiated by hand.
pub fn enumerate_paths(p: &Synthetic, x: [f64; 2], sigma: [f64; 2]) -> (f64, [f64; 2]) {
    #[derive(Clone, Copy)]
    struct Node {
        w: f64,
        dw: [f64; 2],
        m: f64,
        dm: [f64; 2],
        v: f64,
    }
    let mut frontier = vec![Node { w: 1.0, dw: [0.0; 2], m: 0.0, dm: [0.0; 2], v: 0.0 }];
    for (i, s) in p.stages.iter().enumerate() {
        let (k, o) = (i % 2, (i + 1) % 2);
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for n in &frontier {
            let mu = s.a * x[k] + s.c * n.m - s.t;
            let mut dmu = [s.c * n.dm[0], s.c * n.dm[1]];
            dmu[k] += s.a;
            let var = s.a * s.a * sigma[k] * sigma[k] + s.c * s.c * n.v;
            let sd = var.sqrt();
            let (qt, qe, dq) = if sd > 0.0 {
                let z = mu / sd;
                (normal_cdf(-z), normal_cdf(z), -normal_pdf(z) / sd)
            } else if mu <= 0.0 {
                (1.0, 0.0, 0.0)
            } else {
                (0.0, 1.0, 0.0)
            };
            // then arm: weight qt, y += α x_k + β
            let mut t = Node {
                w: n.w * qt,
                dw: [0.0; 2],
                m: n.m + s.alpha * x[k] + s.beta,
                dm: n.dm,
                v: n.v + s.alpha * s.alpha * sigma[k] * sigma[k],
            };
            t.dm[k] += s.alpha;
            // else arm: weight qe, y += −γ x_o + δ
            let mut e = Node {
                w: n.w * qe,
                dw: [0.0; 2],
                m: n.m - s.gamma * x[o] + s.delta,
                dm: n.dm,
                v: n.v + s.gamma * s.gamma * sigma[o] * sigma[o],
            };
            e.dm[o] -= s.gamma;
            for j in 0..2 {
                t.dw[j] = n.dw[j] * qt + n.w * dq * dmu[j];
                e.dw[j] = n.dw[j] * qe - n.w * dq * dmu[j];
            }
            next.push(t);
            next.push(e);
        }
        frontier = next;
    }
    let mut ey = 0.0;
    let mut g = [0.0; 2];
    for n in &frontier {
        ey += n.w * n.m;
        for j in 0..2 {
            g[j] += n.dw[j] * n.m + n.w * n.dm[j];
        }
    }
    (ey, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use smoothgrad_core::program::crisp_run;

    #[test]
    fn thresholds_distinct() {
        let p = Synthetic::new(20);
        for i in 0..20 {
            for j in 0..i {
                assert_ne!(p.stages()[i].t, p.stages()[j].t);
            }
        }
    }

    #[test]
    fn depth_one_is_scaled_step() {
        let p = Synthetic::new(1);
        let s = p.stages()[0];
        // then arm iff x0 ≤ t/a
        let lo = crisp_run(&p, &[s.t / s.a - 0.01, 0.0], 0).unwrap();
        let hi = crisp_run(&p, &[s.t / s.a + 0.01, 0.0], 0).unwrap();
        assert!((lo - (s.alpha * (s.t / s.a - 0.01) + s.beta)).abs() < 1e-12);
        assert_eq!(hi, s.delta);
    }

    #[test]
    fn oracle_at_zero_sigma_is_crisp() {
        let p = Synthetic::new(6);
        for x in [[0.3, -0.2], [-1.0, 2.0], [1.7, 0.4]] {
            let (e, _) = enumerate_paths(&p, x, [0.0, 0.0]);
            assert!((e - crisp_run(&p, &x, 0).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_gradient_matches_differences() {
        let p = Synthetic::new(5);
        let (x, s, h) = ([0.2, -0.4], [0.5, 0.3], 1e-6);
        let (_, g) = enumerate_paths(&p, x, s);
        for j in 0..2 {
            let mut a = x;
            let mut b = x;
            a[j] += h;
            b[j] -= h;
            let fd = (enumerate_paths(&p, a, s).0 - enumerate_paths(&p, b, s).0) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "{j}: {fd} vs {}", g[j]);
        }
    }
}
