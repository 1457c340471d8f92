//! Pointwise proximal problems of the modified ALG2 step B.
//!
//! At every space-time quadrature point the densities minimize
//!
//! ```text
//! L(ρ) = Σ_m [ r²|m̄_m|²/(r+V₁ₘ) + r²|n̄_m|²/(r+V₃ₘ) + (ρ_m − rρ̄_m)²/r ]
//!        − 2F(ρ) + Σ_p r²|s̄_p|²/(r+V₂ₚ)
//! ```
//!
//! over `ρ ≥ 0`. `L` is convex in each coordinate, so a bracketing Newton
//! iteration on `∂L/∂ρ_k` is globally safe.

use crate::model::{Mobility, ProblemSpec};

const MAX_DOUBLINGS: usize = 60;
const MAX_NEWTON: usize = 200;

/// Bar-value data of one quadrature point. Reaction entries refer to the
/// active reactions only.
#[derive(Debug, Clone, PartialEq)]
pub struct PointData {
    pub rho_bar: Vec<f64>,
    pub m_bar_sq: Vec<f64>,
    pub n_bar_sq: Vec<f64>,
    pub s_bar_sq: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
    /// Potential shape value at the point.
    pub shape: f64,
}

impl PointData {
    pub fn new(species: usize, active_reactions: usize) -> Self {
        Self {
            rho_bar: vec![0.0; species],
            m_bar_sq: vec![0.0; species],
            n_bar_sq: vec![0.0; species],
            s_bar_sq: vec![0.0; active_reactions],
            w1: vec![1.0; species],
            w2: vec![1.0; active_reactions],
            w3: vec![1.0; species],
            shape: 0.0,
        }
    }
}

/// Minimizes a convex function of one variable over `[0, ∞)` given
/// `f(x) = (value, first, second)` derivatives. `x0` is the warm start.
pub fn minimize_nonneg(
    mut f: impl FnMut(f64) -> (f64, f64, f64),
    x0: f64,
    tol: f64,
) -> Result<f64, String> {
    let (l0, g0, _) = f(0.0);
    if g0 >= 0.0 || g0.abs() <= tol * (1.0 + l0.abs()) {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi;
    let mut x = if x0.is_finite() && x0 > 0.0 { x0 } else { 0.0 };
    let (lx, gx, _) = f(x);
    if x > 0.0 && gx.abs() <= tol * (1.0 + lx.abs()) {
        return Ok(x);
    }
    if x > 0.0 && gx > 0.0 {
        hi = x;
    } else {
        lo = x;
        hi = (2.0 * x).max(1.0);
        let mut doublings = 0;
        while f(hi).1 < 0.0 {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(format!("no upper bracket found below {hi:e}"));
            }
        }
        x = 0.5 * (lo + hi);
    }
    let mut prev_g = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        let (l, g, h) = f(x);
        if g.abs() <= tol * (1.0 + l.abs()) {
            return Ok(x);
        }
        if g < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi.max(f64::MIN_POSITIVE) {
            return Ok(x);
        }
        let newton = if h > 0.0 { x - g / h } else { f64::NAN };
        // Fall back to bisection when Newton leaves the bracket or stalls.
        x = if newton > lo && newton < hi && g.abs() < 0.5 * prev_g {
            newton
        } else {
            0.5 * (lo + hi)
        };
        prev_g = g.abs();
    }
    Ok(x)
}

/// Evaluates a (weighted) single-species mobility at density `x`.
pub(crate) fn single_at(m: &Mobility, x: f64, weight: f64) -> (f64, f64, f64) {
    let e = m.eval_unchecked(x.max(0.0), 0.0);
    (weight * e.value, weight * e.grad[0], weight * e.hess[0])
}

/// Evaluates a (weighted) reaction mobility from the full density vector.
pub(crate) fn mobility_at(m: &Mobility, rho: &[f64], weight: f64) -> (f64, [f64; 2], [f64; 2]) {
    let a = rho[m.species[0]];
    let b = if m.kind.is_pair() { rho[m.species[1]] } else { 0.0 };
    let e = m.eval_unchecked(a.max(0.0), b.max(0.0));
    (
        weight * e.value,
        e.grad.map(|g| weight * g),
        e.hess.map(|h| weight * h),
    )
}

/// Solver for the pointwise density problems of one problem.
#[derive(Debug, Clone)]
pub struct PointwiseSolver<'a> {
    spec: &'a ProblemSpec,
    active: Vec<usize>,
    pub sweeps: usize,
    pub tol: f64,
}

impl<'a> PointwiseSolver<'a> {
    pub fn new(spec: &'a ProblemSpec) -> Self {
        Self {
            spec,
            active: spec.active_reactions(),
            sweeps: 1,
            tol: 1e-10,
        }
    }

    pub fn with_sweeps(mut self, sweeps: usize) -> Self {
        self.sweeps = sweeps.max(1);
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn active_reactions(&self) -> &[usize] {
        &self.active
    }

    /// `L(ρ)`.
    pub fn objective(&self, d: &PointData, rho: &[f64]) -> f64 {
        self.coordinate(d, rho, None).0
    }

    /// `∇L(ρ)`.
    pub fn gradient(&self, d: &PointData, rho: &[f64]) -> Vec<f64> {
        (0..rho.len())
            .map(|k| self.coordinate(d, rho, Some(k)).1)
            .collect()
    }

    /// `L`, `∂L/∂ρ_k` and `∂²L/∂ρ_k²` (derivatives zero when `k` is None).
    pub fn coordinate(&self, d: &PointData, rho: &[f64], k: Option<usize>) -> (f64, f64, f64) {
        let spec = self.spec;
        let r = spec.r;
        let r2 = r * r;
        let (mut l, mut g, mut h) = (0.0, 0.0, 0.0);
        let reciprocal = |coef: f64, v: f64, dv: f64, d2v: f64, hit: bool| {
            if coef == 0.0 {
                return (0.0, 0.0, 0.0);
            }
            let den = r + v;
            let value = coef / den;
            if !hit {
                return (value, 0.0, 0.0);
            }
            let first = -coef * dv / (den * den);
            let second = coef * (2.0 * dv * dv / (den * den * den) - d2v / (den * den));
            (value, first, second)
        };
        for m in 0..spec.species {
            let hit = k == Some(m);
            let x = rho[m];
            let (v1, dv1, d2v1) = single_at(&spec.v1[m], x, d.w1[m]);
            let t = reciprocal(r2 * d.m_bar_sq[m], v1, dv1, d2v1, hit);
            l += t.0;
            g += t.1;
            h += t.2;
            if d.n_bar_sq[m] != 0.0 {
                let (v3, dv3, d2v3) = single_at(&spec.v3[m], x, d.w3[m]);
                let t = reciprocal(r2 * d.n_bar_sq[m], v3, dv3, d2v3, hit);
                l += t.0;
                g += t.1;
                h += t.2;
            }
            let dev = x - r * d.rho_bar[m];
            l += dev * dev / r;
            let (f, df, d2f) = spec.potential.species_term(m, x, d.shape);
            l -= 2.0 * f;
            if hit {
                g += 2.0 * dev / r - 2.0 * df;
                h += 2.0 / r - 2.0 * d2f;
            }
        }
        for (slot, &p) in self.active.iter().enumerate() {
            let mob = &spec.v2[p];
            let (v, dv, d2v) = mobility_at(mob, rho, d.w2[slot]);
            let which = match k {
                Some(k) if mob.species[0] == k => Some(0),
                Some(k) if mob.kind.is_pair() && mob.species[1] == k => Some(1),
                _ => None,
            };
            let (dk, d2k) = which.map_or((0.0, 0.0), |w| (dv[w], d2v[w]));
            let t = reciprocal(r2 * d.s_bar_sq[slot], v, dk, d2k, which.is_some());
            l += t.0;
            g += t.1;
            h += t.2;
        }
        (l, g, h)
    }

    /// Cyclic coordinate descent from the warm start in `rho`.
    pub fn solve(&self, d: &PointData, rho: &mut [f64]) -> Result<(), String> {
        for _ in 0..self.sweeps {
            for k in 0..rho.len() {
                let x0 = rho[k];
                let x = minimize_nonneg(
                    |x| {
                        rho[k] = x;
                        self.coordinate(d, rho, Some(k))
                    },
                    x0,
                    self.tol,
                )?;
                rho[k] = x;
            }
        }
        Ok(())
    }
}

/// Minimizes `2G(ρ) + (ρ − rρ̄_T)²/r` per species over `ρ ≥ 0`.
pub fn terminal_solve(
    spec: &ProblemSpec,
    rho_bar_t: &[f64],
    targets: &[f64],
    warm: &[f64],
    tol: f64,
) -> Result<Vec<f64>, String> {
    let r = spec.r;
    rho_bar_t
        .iter()
        .zip(targets)
        .zip(warm)
        .map(|((&bar, &target), &x0)| {
            minimize_nonneg(
                |x| {
                    let (g, dg, d2g) = spec.terminal.species_term(x, target);
                    let dev = x - r * bar;
                    (2.0 * g + dev * dev / r, 2.0 * dg + 2.0 * dev / r, 2.0 * d2g + 2.0 / r)
                },
                x0,
                tol,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DensitySpec, TerminalCondition};

    fn scalar_spec() -> ProblemSpec {
        ProblemSpec::planning(vec![DensitySpec::uniform(1.0)], vec![DensitySpec::uniform(1.0)])
    }

    #[test]
    fn pure_quadratic() {
        let spec = scalar_spec();
        let solver = PointwiseSolver::new(&spec);
        let mut d = PointData::new(1, 0);
        d.rho_bar[0] = 0.3;
        let mut rho = vec![1.0];
        solver.solve(&d, &mut rho).unwrap();
        assert!((rho[0] - 0.3).abs() < 1e-12);
        d.rho_bar[0] = -0.2;
        solver.solve(&d, &mut rho).unwrap();
        assert_eq!(rho[0], 0.0);
    }

    #[test]
    fn transport_term() {
        let spec = scalar_spec();
        let solver = PointwiseSolver::new(&spec);
        let mut d = PointData::new(1, 0);
        d.m_bar_sq[0] = 1.0;
        let mut rho = vec![0.0];
        solver.solve(&d, &mut rho).unwrap();
        // Stationarity ρ(1 + ρ)² = 1/2, root by bisection.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * (1.0 + mid).powi(2) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((rho[0] - lo).abs() < 1e-9);
    }

    #[test]
    fn terminal_examples() {
        let mut spec = scalar_spec();
        spec.terminal = TerminalCondition::quadratic(1.0, vec![DensitySpec::uniform(1.0)]);
        let x = terminal_solve(&spec, &[0.0], &[1.0], &[0.0], 1e-12).unwrap();
        assert!((x[0] - 2.0 / 3.0).abs() < 1e-10);
        spec.terminal = TerminalCondition::planning(vec![]);
        let x = terminal_solve(&spec, &[0.7, -0.1], &[0.0, 0.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((x[0] - 0.7).abs() < 1e-10 && x[1] == 0.0);
    }
}
