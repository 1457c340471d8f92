//! Tensor-product space-time grid on `[0, T] x [0, 1]^d`.
//!
//! Every array over the grid is stored row-major with the time index
//! slowest and the `x` index fastest, i.e. dims `[t, x]` for `d = 1` and
//! `[t, y, x]` for `d = 2`. Continuous (H¹) fields live on Gauss-Lobatto node
//! ladders with shared cell endpoints; discontinuous (L²) fields are stored
//! by their values at the Gauss-Legendre quadrature points.

use crate::error::{invalid, Error, Result};
use crate::quadrature::{gauss_legendre_rule, NodalBasis1D, NodeKind};
use crate::sparse::CsrMatrix;

/// Largest polynomial degree supported by the grid.
pub const MAX_DEGREE: usize = 8;

/// Small sparse matrix acting along one tensor axis.
#[derive(Debug, Clone)]
pub struct AxisOperator {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl AxisOperator {
    pub(crate) fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in &rows {
            for &(c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n_rows: rows.len(),
            n_cols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n_cols];
        for i in 0..self.n_rows {
            for (c, v) in self.row(i) {
                rows[c].push((i, v));
            }
        }
        Self::from_rows(self.n_rows, rows)
    }

    /// Applies the operator along `axis` of a row-major array with shape
    /// `dims`; `dims[axis]` must equal `n_cols`.
    pub fn apply_axis(&self, input: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
        debug_assert_eq!(dims[axis], self.n_cols);
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * self.n_rows * inner];
        for o in 0..outer {
            let src = &input[o * self.n_cols * inner..(o + 1) * self.n_cols * inner];
            let dst = &mut out[o * self.n_rows * inner..(o + 1) * self.n_rows * inner];
            for r in 0..self.n_rows {
                let d = &mut dst[r * inner..(r + 1) * inner];
                for (c, v) in self.row(r) {
                    let s = &src[c * inner..(c + 1) * inner];
                    for (di, si) in d.iter_mut().zip(s) {
                        *di += v * si;
                    }
                }
            }
        }
        out
    }

    /// `Aᵀ diag(w) B` for operators sharing their row space.
    pub fn weighted_gram(a: &Self, b: &Self, w: &[f64]) -> CsrMatrix {
        let entries = (0..a.n_rows).flat_map(|q| {
            a.row(q).flat_map(move |(i, va)| b.row(q).map(move |(j, vb)| (i, j, w[q] * va * vb)))
        });
        CsrMatrix::from_triplets(a.n_cols, b.n_cols, entries.collect::<Vec<_>>())
            .expect("indices in range")
    }
}

/// Applies one operator per axis to a tensor array.
pub fn tensor_apply(ops: &[&AxisOperator], input: &[f64]) -> Vec<f64> {
    let mut dims: Vec<usize> = ops.iter().map(|op| op.n_cols).collect();
    debug_assert_eq!(input.len(), dims.iter().product::<usize>());
    let mut data = input.to_vec();
    // Contract the axis with the largest reduction first.
    let mut order: Vec<usize> = (0..ops.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ops[a].n_rows as f64 / ops[a].n_cols as f64;
        let rb = ops[b].n_rows as f64 / ops[b].n_cols as f64;
        ra.partial_cmp(&rb).expect("finite ratio")
    });
    for axis in order {
        data = ops[axis].apply_axis(&data, &dims, axis);
        dims[axis] = ops[axis].n_rows;
    }
    data
}

/// One tensor axis: uniform cells, Gauss-Legendre points, Gauss-Lobatto
/// H¹ nodes and the operators mapping H¹ coefficients to point values.
#[derive(Debug, Clone)]
pub struct Axis1D {
    cells: usize,
    length: f64,
    degree: usize,
    quad_points: Vec<f64>,
    quad_weights: Vec<f64>,
    nodes: Vec<f64>,
    lobatto: NodalBasis1D,
    legendre: NodalBasis1D,
    value: AxisOperator,
    deriv: AxisOperator,
}

impl Axis1D {
    pub fn new(cells: usize, length: f64, degree: usize) -> Result<Self> {
        let rule = gauss_legendre_rule(degree)?;
        let lobatto = NodalBasis1D::new(NodeKind::GaussLobatto, degree)?;
        let legendre = NodalBasis1D::from_nodes(NodeKind::GaussLegendre, rule.nodes.clone());
        let h = length / cells as f64;
        let mut quad_points = Vec::with_capacity(cells * degree);
        let mut quad_weights = Vec::with_capacity(cells * degree);
        for c in 0..cells {
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                quad_points.push((c as f64 + x) * h);
                quad_weights.push(w * h);
            }
        }
        let mut nodes: Vec<f64> = (0..cells)
            .flat_map(|c| {
                lobatto.nodes()[..degree]
                    .iter()
                    .map(move |x| (c as f64 + x) * h)
            })
            .collect();
        nodes.push(length);
        let (vals, ders) = lobatto.tabulate(&rule.nodes);
        let nb = degree + 1;
        let mut value_rows = Vec::with_capacity(cells * degree);
        let mut deriv_rows = Vec::with_capacity(cells * degree);
        for c in 0..cells {
            for q in 0..degree {
                value_rows.push((0..nb).map(|a| (c * degree + a, vals[q * nb + a])).collect());
                deriv_rows.push((0..nb).map(|a| (c * degree + a, ders[q * nb + a] / h)).collect());
            }
        }
        let n_dofs = cells * degree + 1;
        Ok(Self {
            cells,
            length,
            degree,
            quad_points,
            quad_weights,
            nodes,
            lobatto,
            legendre,
            value: AxisOperator::from_rows(n_dofs, value_rows),
            deriv: AxisOperator::from_rows(n_dofs, deriv_rows),
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn h(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_quad(&self) -> usize {
        self.quad_points.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.nodes.len()
    }

    pub fn quad_points(&self) -> &[f64] {
        &self.quad_points
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Coordinates of the H¹ nodes.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// H¹ coefficients to values at quadrature points.
    pub fn value_op(&self) -> &AxisOperator {
        &self.value
    }

    /// H¹ coefficients to derivatives at quadrature points.
    pub fn deriv_op(&self) -> &AxisOperator {
        &self.deriv
    }

    /// Endpoint trace (1 x n_dofs): first node or last node.
    pub fn trace_op(&self, end: bool) -> AxisOperator {
        let idx = if end { self.n_dofs() - 1 } else { 0 };
        AxisOperator::from_rows(self.n_dofs(), vec![vec![(idx, 1.0)]])
    }

    /// Cell containing `x` and the local coordinate in `[0, 1]`.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x / self.h()).clamp(0.0, self.cells as f64);
        let c = (s.floor() as usize).min(self.cells - 1);
        (c, (s - c as f64).clamp(0.0, 1.0))
    }

    /// Interpolation from quadrature values (L² representative) to
    /// arbitrary points; `derivative` selects the in-cell derivative.
    pub fn l2_sampler(&self, points: &[f64], derivative: bool) -> AxisOperator {
        let k = self.degree;
        let mut v = vec![0.0; k];
        let mut d = vec![0.0; k];
        let rows = points
            .iter()
            .map(|&x| {
                let (c, xi) = self.locate(x);
                self.legendre.eval_all(xi, &mut v, &mut d);
                let src = if derivative { &d } else { &v };
                let scale = if derivative { 1.0 / self.h() } else { 1.0 };
                (0..k).map(|a| (c * k + a, src[a] * scale)).collect()
            })
            .collect();
        AxisOperator::from_rows(self.n_quad(), rows)
    }

    /// Interpolation from H¹ coefficients to arbitrary points.
    pub fn h1_sampler(&self, points: &[f64]) -> AxisOperator {
        let k = self.degree;
        let mut v = vec![0.0; k + 1];
        let mut d = vec![0.0; k + 1];
        let rows = points
            .iter()
            .map(|&x| {
                let (c, xi) = self.locate(x);
                self.lobatto.eval_all(xi, &mut v, &mut d);
                (0..=k).map(|a| (c * k + a, v[a])).collect()
            })
            .collect();
        AxisOperator::from_rows(self.n_dofs(), rows)
    }

    /// Quadrature-based mass matrix `Eᵀ W E`.
    pub fn mass(&self) -> CsrMatrix {
        AxisOperator::weighted_gram(&self.value, &self.value, &self.quad_weights)
    }

    /// Stiffness matrix `Dᵀ W D`.
    pub fn stiffness(&self) -> CsrMatrix {
        AxisOperator::weighted_gram(&self.deriv, &self.deriv, &self.quad_weights)
    }

    /// Mixed matrix `Eᵀ W D` (rows: values, columns: derivatives).
    pub fn value_deriv(&self) -> CsrMatrix {
        AxisOperator::weighted_gram(&self.value, &self.deriv, &self.quad_weights)
    }
}

/// Quadrature point layout of the space-time grid.
#[derive(Debug, Clone)]
pub struct QuadLayout {
    dim: usize,
    space_coords: Vec<f64>,
    space_weights: Vec<f64>,
    time_points: Vec<f64>,
    time_weights: Vec<f64>,
}

impl QuadLayout {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_space(&self) -> usize {
        self.space_weights.len()
    }

    pub fn n_time(&self) -> usize {
        self.time_points.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_space() * self.n_time()
    }

    /// Coordinates of spatial point `i` (x first).
    pub fn space_point(&self, i: usize) -> &[f64] {
        &self.space_coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn space_weights(&self) -> &[f64] {
        &self.space_weights
    }

    pub fn time_points(&self) -> &[f64] {
        &self.time_points
    }

    pub fn time_weights(&self) -> &[f64] {
        &self.time_weights
    }

    /// Global index of the space-time point `(time j, space i)`.
    pub fn index(&self, j: usize, i: usize) -> usize {
        j * self.n_space() + i
    }

    /// Weight `ζ_j ω_i` of space-time point `q`.
    pub fn weight(&self, q: usize) -> f64 {
        let ns = self.n_space();
        self.time_weights[q / ns] * self.space_weights[q % ns]
    }

    /// Discrete space integral `Σ_i f_i ω_i`.
    pub fn space_integral(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.space_weights).map(|(v, w)| v * w).sum()
    }

    /// Discrete space-time integral `Σ_{ij} f_ij ω_i ζ_j`.
    pub fn space_time_integral(&self, values: &[f64]) -> f64 {
        let ns = self.n_space();
        values
            .chunks(ns)
            .zip(&self.time_weights)
            .map(|(slab, zw)| zw * self.space_integral(slab))
            .sum()
    }
}

/// Index bookkeeping for the H¹ space.
#[derive(Debug, Clone)]
pub struct H1DofMap {
    dims: Vec<usize>,
}

impl H1DofMap {
    /// Shape `[t, (y,) x]` of the coefficient array.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn space_count(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// Flat index of the node with per-axis ladder indices `(it, [ix, iy])`.
    pub fn index(&self, it: usize, spatial: &[usize]) -> usize {
        let d = self.dims.len() - 1;
        let mut idx = it;
        for a in (0..d).rev() {
            idx = idx * self.dims[d - a] + spatial[a];
        }
        idx
    }

    /// DOFs on the spatial face `x_axis = 0` (`upper = false`) or `= 1`.
    pub fn boundary_face(&self, axis: usize, upper: bool) -> Vec<usize> {
        let d = self.dims.len() - 1;
        let dim_index = d - axis;
        let target = if upper { self.dims[dim_index] - 1 } else { 0 };
        let inner: usize = self.dims[dim_index + 1..].iter().product();
        let n = self.dims[dim_index];
        (0..self.count())
            .filter(|&g| (g / inner) % n == target)
            .collect()
    }

    /// DOFs on the slice `t = 0` or `t = T`.
    pub fn time_trace(&self, end: bool) -> Vec<usize> {
        let ns = self.space_count();
        let it = if end { self.dims[0] - 1 } else { 0 };
        (it * ns..(it + 1) * ns).collect()
    }
}

/// Point values of an H¹ field and its derivatives.
#[derive(Debug, Clone)]
pub struct H1Eval {
    pub values: Vec<f64>,
    pub time_derivatives: Vec<f64>,
    /// One vector per spatial axis (x first).
    pub gradients: Vec<Vec<f64>>,
    pub trace_start: Vec<f64>,
    pub trace_end: Vec<f64>,
}

/// Per-axis factor of a tensor evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Value,
    Deriv,
    TraceStart,
    TraceEnd,
}

#[derive(Debug, Clone)]
pub struct SpaceTimeGrid {
    dim: usize,
    nx: usize,
    nt: usize,
    degree: usize,
    final_time: f64,
    time: Axis1D,
    space: Axis1D,
    quad: QuadLayout,
    dofs: H1DofMap,
    traces: [AxisOperator; 2],
}

/// Builds the grid, checking all parameters.
pub fn build_grid(d: usize, nx: usize, nt: usize, k: usize, t_final: f64) -> Result<SpaceTimeGrid> {
    SpaceTimeGrid::new(d, nx, nt, k, t_final)
}

impl SpaceTimeGrid {
    pub fn new(d: usize, nx: usize, nt: usize, k: usize, t_final: f64) -> Result<Self> {
        if !(1..=2).contains(&d) {
            return Err(Error::UnsupportedDimension(d));
        }
        if nx == 0 || nt == 0 {
            return Err(invalid(format!("cell counts must be positive, got nx={nx}, nt={nt}")));
        }
        if !(1..=MAX_DEGREE).contains(&k) {
            return Err(invalid(format!("degree must be in 1..={MAX_DEGREE}, got {k}")));
        }
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(invalid(format!("final time must be positive, got {t_final}")));
        }
        let time = Axis1D::new(nt, t_final, k)?;
        let space = Axis1D::new(nx, 1.0, k)?;
        let nq = space.n_quad();
        let n_space = nq.pow(d as u32);
        let mut space_coords = Vec::with_capacity(n_space * d);
        let mut space_weights = Vec::with_capacity(n_space);
        for i in 0..n_space {
            let ix = i % nq;
            let iy = i / nq;
            space_coords.push(space.quad_points()[ix]);
            let mut w = space.quad_weights()[ix];
            if d == 2 {
                space_coords.push(space.quad_points()[iy]);
                w *= space.quad_weights()[iy];
            }
            space_weights.push(w);
        }
        let quad = QuadLayout {
            dim: d,
            space_coords,
            space_weights,
            time_points: time.quad_points().to_vec(),
            time_weights: time.quad_weights().to_vec(),
        };
        let mut dims = vec![time.n_dofs()];
        dims.extend(std::iter::repeat_n(space.n_dofs(), d));
        let traces = [time.trace_op(false), time.trace_op(true)];
        Ok(Self {
            dim: d,
            nx,
            nt,
            degree: k,
            final_time: t_final,
            time,
            space,
            quad,
            dofs: H1DofMap { dims },
            traces,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn time_axis(&self) -> &Axis1D {
        &self.time
    }

    pub fn space_axis(&self) -> &Axis1D {
        &self.space
    }

    pub fn quad(&self) -> &QuadLayout {
        &self.quad
    }

    pub fn dofs(&self) -> &H1DofMap {
        &self.dofs
    }

    fn time_factor(&self, f: Factor) -> &AxisOperator {
        match f {
            Factor::Value => self.time.value_op(),
            Factor::Deriv => self.time.deriv_op(),
            Factor::TraceStart => &self.traces[0],
            Factor::TraceEnd => &self.traces[1],
        }
    }

    fn space_factor(&self, f: Factor) -> &AxisOperator {
        match f {
            Factor::Value => self.space.value_op(),
            Factor::Deriv => self.space.deriv_op(),
            Factor::TraceStart | Factor::TraceEnd => {
                panic!("spatial traces are not used by the discretization")
            }
        }
    }

    /// Tensor factors in storage order `[t, (y,) x]` where `spatial[a]` acts
    /// on spatial axis `a` (x first).
    fn factors(&self, time: Factor, spatial: &[Factor]) -> Vec<&AxisOperator> {
        let mut ops = vec![self.time_factor(time)];
        ops.extend(spatial.iter().rev().map(|&f| self.space_factor(f)));
        ops
    }

    /// Evaluates a tensor product of axis factors on H¹ coefficients.
    pub fn apply_h1(&self, coeffs: &[f64], time: Factor, spatial: &[Factor]) -> Vec<f64> {
        tensor_apply(&self.factors(time, spatial), coeffs)
    }

    /// Transpose of [`apply_h1`]: maps point data back to H¹ test functions.
    pub fn apply_h1_transpose(&self, values: &[f64], time: Factor, spatial: &[Factor]) -> Vec<f64> {
        let transposed: Vec<AxisOperator> = self
            .factors(time, spatial)
            .into_iter()
            .map(AxisOperator::transpose)
            .collect();
        let refs: Vec<&AxisOperator> = transposed.iter().collect();
        tensor_apply(&refs, values)
    }

    /// Values, time derivatives, spatial gradients and time-end traces of an
    /// H¹ field at the quadrature points.
    pub fn eval_h1_at_quads(&self, coeffs: &[f64]) -> Result<H1Eval> {
        if coeffs.len() != self.dofs.count() {
            return Err(invalid(format!(
                "H1 field has {} coefficients, grid has {}",
                coeffs.len(),
                self.dofs.count()
            )));
        }
        let values_sp = vec![Factor::Value; self.dim];
        let gradients = (0..self.dim)
            .map(|a| {
                let mut f = values_sp.clone();
                f[a] = Factor::Deriv;
                self.apply_h1(coeffs, Factor::Value, &f)
            })
            .collect();
        Ok(H1Eval {
            values: self.apply_h1(coeffs, Factor::Value, &values_sp),
            time_derivatives: self.apply_h1(coeffs, Factor::Deriv, &values_sp),
            gradients,
            trace_start: self.apply_h1(coeffs, Factor::TraceStart, &values_sp),
            trace_end: self.apply_h1(coeffs, Factor::TraceEnd, &values_sp),
        })
    }

    /// Uniform sample coordinates `(i + 0.5) / res`.
    pub fn sample_coordinates(res: usize) -> Vec<f64> {
        (0..res).map(|i| (i as f64 + 0.5) / res as f64).collect()
    }

    /// Interpolates an L² field (quadrature values) at time `t` on a uniform
    /// `res^d` sample grid, x fastest.
    pub fn sample_l2_field(&self, field: &[f64], t: f64, res: usize) -> Result<Vec<f64>> {
        if field.len() != self.quad.n_total() {
            return Err(invalid(format!(
                "L2 field has {} values, grid has {} points",
                field.len(),
                self.quad.n_total()
            )));
        }
        if !(0.0..=self.final_time).contains(&t) {
            return Err(invalid(format!("sample time {t} outside [0, {}]", self.final_time)));
        }
        if res == 0 {
            return Err(invalid("sample resolution must be positive"));
        }
        let time_op = self.time.l2_sampler(&[t], false);
        let space_op = self.space.l2_sampler(&Self::sample_coordinates(res), false);
        let mut ops = vec![&time_op];
        ops.extend(std::iter::repeat_n(&space_op, self.dim));
        Ok(tensor_apply(&ops, field))
    }

    /// Spatial gradient of the in-cell polynomial representative of an L²
    /// field, evaluated at the quadrature points. One vector per axis.
    pub fn l2_gradient(&self, field: &[f64]) -> Result<Vec<Vec<f64>>> {
        if field.len() != self.quad.n_total() {
            return Err(invalid("L2 field length does not match the grid"));
        }
        let pts = self.space.quad_points().to_vec();
        let value = self.space.l2_sampler(&pts, false);
        let deriv = self.space.l2_sampler(&pts, true);
        let ident = self.time.l2_sampler(self.time.quad_points(), false);
        Ok((0..self.dim)
            .map(|a| {
                let mut ops = vec![&ident];
                for b in (0..self.dim).rev() {
                    ops.push(if a == b { &deriv } else { &value });
                }
                tensor_apply(&ops, field)
            })
            .collect())
    }
}
