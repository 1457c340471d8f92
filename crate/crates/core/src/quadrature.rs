//! One-dimensional Gauss rules and nodal Lagrange bases on the reference
//! interval `[0, 1]`.
//!
//! Gauss-Legendre nodes collocate the discontinuous (L²) unknowns with the
//! quadrature points, Gauss-Lobatto nodes carry the continuous (H¹) basis.

use std::f64::consts::PI;

use crate::error::{invalid, Result};

const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAXIT: usize = 100;

/// Largest supported Gauss-Legendre rule.
pub const MAX_GAUSS_POINTS: usize = 16;

/// A quadrature rule on `[0, 1]`. Exact for polynomials of degree `2n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule1D {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Legendre polynomial `P_n(x)` and its derivative on `[-1, 1]`.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    for j in 2..=n {
        let jf = j as f64;
        let next = ((2.0 * jf - 1.0) * x * p - (jf - 1.0) * p_prev) / jf;
        p_prev = p;
        p = next;
    }
    // P_n'(x) = n (x P_n - P_{n-1}) / (x^2 - 1), valid away from the endpoints.
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// `n`-point Gauss-Legendre rule mapped to `[0, 1]`.
pub fn gauss_legendre_rule(n: usize) -> Result<QuadRule1D> {
    if n == 0 || n > MAX_GAUSS_POINTS {
        return Err(invalid(format!(
            "Gauss-Legendre rule needs 1..={MAX_GAUSS_POINTS} points, got {n}"
        )));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    // Roots are computed on the negative half of [-1, 1] and mirrored, so the
    // mapped rule is exactly symmetric about 0.5.
    for i in 0..n.div_ceil(2) {
        let mut x = -(PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..NEWTON_MAXIT {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < NEWTON_TOL {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        let j = n - 1 - i;
        if i == j {
            nodes[i] = 0.5;
        } else {
            nodes[i] = 0.5 * (1.0 + x);
            nodes[j] = 1.0 - nodes[i];
        }
        weights[i] = 0.5 * w;
        weights[j] = 0.5 * w;
    }
    Ok(QuadRule1D { nodes, weights })
}

/// `n` Gauss-Lobatto nodes on `[0, 1]`, endpoints included.
pub fn gauss_lobatto_nodes(n: usize) -> Result<Vec<f64>> {
    if !(2..=MAX_GAUSS_POINTS + 1).contains(&n) {
        return Err(invalid(format!(
            "Gauss-Lobatto nodes need 2..={} points, got {n}",
            MAX_GAUSS_POINTS + 1
        )));
    }
    let order = n - 1;
    let mut nodes = vec![0.0; n];
    nodes[order] = 1.0;
    for i in 1..n.div_ceil(2) {
        // Interior nodes are the roots of P_order'. Newton on (1 - x^2) P' with
        // (1 - x^2) P'' = 2x P' - order (order + 1) P eliminated.
        let mut x = -(PI * i as f64 / order as f64).cos();
        for _ in 0..NEWTON_MAXIT {
            let (p, dp) = legendre_with_derivative(order, x);
            let step = (1.0 - x * x) * dp / (order as f64 * (order as f64 + 1.0) * p);
            x += step;
            if step.abs() < NEWTON_TOL {
                break;
            }
        }
        let j = order - i;
        if i == j {
            nodes[i] = 0.5;
        } else {
            nodes[i] = 0.5 * (1.0 + x);
            nodes[j] = 1.0 - nodes[i];
        }
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.5;
    }
    Ok(nodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    GaussLegendre,
    GaussLobatto,
}

/// Lagrange basis through a set of nodes on `[0, 1]`, evaluated in
/// barycentric form.
#[derive(Debug, Clone)]
pub struct NodalBasis1D {
    kind: NodeKind,
    nodes: Vec<f64>,
    bary: Vec<f64>,
}

impl NodalBasis1D {
    /// Basis of polynomial degree `degree` on the requested node family.
    pub fn new(kind: NodeKind, degree: usize) -> Result<Self> {
        let nodes = match kind {
            NodeKind::GaussLegendre => gauss_legendre_rule(degree + 1)?.nodes,
            NodeKind::GaussLobatto => {
                if degree == 0 {
                    return Err(invalid("Gauss-Lobatto basis needs degree >= 1"));
                }
                gauss_lobatto_nodes(degree + 1)?
            }
        };
        Ok(Self::from_nodes(kind, nodes))
    }

    pub fn from_nodes(kind: NodeKind, nodes: Vec<f64>) -> Self {
        let bary = nodes
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let prod: f64 = nodes
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &xj)| xi - xj)
                    .product();
                1.0 / prod
            })
            .collect();
        Self { kind, nodes, bary }
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn degree(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value and derivative of `ℓ_index` at `x`.
    pub fn eval(&self, index: usize, x: f64) -> Result<(f64, f64)> {
        if index >= self.nodes.len() {
            return Err(invalid(format!(
                "basis index {index} out of range for degree {}",
                self.degree()
            )));
        }
        let mut values = vec![0.0; self.len()];
        let mut derivs = vec![0.0; self.len()];
        self.eval_all(x, &mut values, &mut derivs);
        Ok((values[index], derivs[index]))
    }

    /// All basis values and derivatives at `x`.
    pub fn eval_all(&self, x: f64, values: &mut [f64], derivs: &mut [f64]) {
        let n = self.nodes.len();
        if n == 1 {
            values[0] = 1.0;
            derivs[0] = 0.0;
            return;
        }
        if let Some(i) = self.nodes.iter().position(|&xi| xi == x) {
            // At a node: cardinal values, derivative from the differentiation
            // matrix row.
            values.fill(0.0);
            values[i] = 1.0;
            let mut diag = 0.0;
            for j in 0..n {
                if j != i {
                    let d = (self.bary[j] / self.bary[i]) / (self.nodes[i] - self.nodes[j]);
                    derivs[j] = d;
                    diag -= d;
                }
            }
            derivs[i] = diag;
            return;
        }
        let mut denom = 0.0;
        for j in 0..n {
            let t = self.bary[j] / (x - self.nodes[j]);
            values[j] = t;
            denom += t;
        }
        for v in values.iter_mut() {
            *v /= denom;
        }
        for j in 0..n {
            let s: f64 = (0..n)
                .filter(|&k| k != j)
                .map(|k| 1.0 / (x - self.nodes[k]))
                .sum();
            derivs[j] = values[j] * s;
        }
    }

    /// Values and derivatives tabulated at a list of points, laid out
    /// `[point][basis]`.
    pub fn tabulate(&self, points: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let mut values = vec![0.0; points.len() * n];
        let mut derivs = vec![0.0; points.len() * n];
        for (q, &x) in points.iter().enumerate() {
            self.eval_all(x, &mut values[q * n..(q + 1) * n], &mut derivs[q * n..(q + 1) * n]);
        }
        (values, derivs)
    }
}
