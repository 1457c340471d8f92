//! Compressed sparse row matrices and preconditioned conjugate gradients.

use crate::error::{invalid, Error, Result};

/// Square or rectangular matrix in compressed row storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Builds an `n x n` matrix from `(row, col, value)` contributions.
/// Duplicate entries are summed.
pub fn assemble(
    n: usize,
    entries: impl IntoIterator<Item = (usize, usize, f64)>,
) -> Result<CsrMatrix> {
    CsrMatrix::from_triplets(n, n, entries)
}

impl CsrMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut triplets: Vec<(usize, usize, f64)> = entries.into_iter().collect();
        if let Some(&(i, j, _)) = triplets.iter().find(|&&(i, j, _)| i >= n_rows || j >= n_cols) {
            return Err(invalid(format!(
                "entry ({i}, {j}) outside a {n_rows}x{n_cols} matrix"
            )));
        }
        triplets.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *values.last_mut().expect("previous entry exists") += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    /// `y = A x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for (i, yi) in y.iter_mut().enumerate() {
            let range = self.row_ptr[i]..self.row_ptr[i + 1];
            *yi = self.col_idx[range.clone()]
                .iter()
                .zip(&self.values[range])
                .map(|(&j, &v)| v * x[j])
                .sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        let swapped: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.n_cols, self.n_rows, swapped).expect("indices in range")
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Self) -> Self {
        let n_rows = self.n_rows * other.n_rows;
        let n_cols = self.n_cols * other.n_cols;
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz() * other.nnz());
        let mut values = Vec::with_capacity(self.nnz() * other.nnz());
        row_ptr.push(0);
        for i in 0..self.n_rows {
            let (ac, av) = self.row(i);
            for k in 0..other.n_rows {
                let (bc, bv) = other.row(k);
                for (&j, &a) in ac.iter().zip(av) {
                    for (&l, &b) in bc.iter().zip(bv) {
                        col_idx.push(j * other.n_cols + l);
                        values.push(a * b);
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `Σ c_k A_k` for matrices of equal shape.
    pub fn linear_combination(terms: &[(f64, &CsrMatrix)]) -> Result<Self> {
        let Some((_, first)) = terms.first() else {
            return Err(invalid("linear combination of zero matrices"));
        };
        let (n_rows, n_cols) = (first.n_rows, first.n_cols);
        if terms
            .iter()
            .any(|(_, m)| m.n_rows != n_rows || m.n_cols != n_cols)
        {
            return Err(invalid("linear combination of matrices with different shapes"));
        }
        let entries = terms
            .iter()
            .filter(|(c, _)| *c != 0.0)
            .flat_map(|&(c, m)| m.triplets().map(move |(i, j, v)| (i, j, c * v)));
        Self::from_triplets(n_rows, n_cols, entries)
    }

    /// Stacks square blocks `blocks[i][j]` (None = zero) into one matrix.
    pub fn block(blocks: &[Vec<Option<&CsrMatrix>>]) -> Result<Self> {
        let nb = blocks.len();
        let size = blocks
            .iter()
            .flatten()
            .flatten()
            .map(|m| m.n_rows)
            .next()
            .ok_or_else(|| invalid("block matrix without blocks"))?;
        let mut entries = Vec::new();
        for (bi, row) in blocks.iter().enumerate() {
            if row.len() != nb {
                return Err(invalid("block matrix must be square"));
            }
            for (bj, blk) in row.iter().enumerate() {
                if let Some(m) = blk {
                    if m.n_rows != size || m.n_cols != size {
                        return Err(invalid("block sizes differ"));
                    }
                    entries.extend(m.triplets().map(|(i, j, v)| (bi * size + i, bj * size + j, v)));
                }
            }
        }
        Self::from_triplets(nb * size, nb * size, entries)
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        self.triplets()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.n_rows * self.n_cols];
        for (i, j, v) in self.triplets() {
            dense[i * self.n_cols + j] += v;
        }
        dense
    }
}

/// Replaces constrained rows and columns by the identity. The right-hand side
/// is lifted by the prescribed values so that the free unknowns see the same
/// system as before, then `b[c] = value`.
pub fn apply_identity_constraints(
    a: &mut CsrMatrix,
    rows: &[usize],
    b: &mut [f64],
    values: &[f64],
) -> Result<()> {
    if rows.len() != values.len() {
        return Err(invalid("constraint rows and values differ in length"));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= a.n_rows) {
        return Err(invalid(format!("constraint row {bad} out of range")));
    }
    let mut prescribed = vec![None; a.n_rows];
    for (&r, &v) in rows.iter().zip(values) {
        prescribed[r] = Some(v);
    }
    for i in 0..a.n_rows {
        if prescribed[i].is_some() {
            continue;
        }
        let (cols, vals) = a.row(i);
        let lift: f64 = cols
            .iter()
            .zip(vals)
            .filter_map(|(&j, &v)| prescribed[j].map(|p| v * p))
            .sum();
        b[i] -= lift;
    }
    *a = constrain_matrix(a, rows);
    for (&r, &v) in rows.iter().zip(values) {
        b[r] = v;
    }
    Ok(())
}

/// Matrix part of [`apply_identity_constraints`].
pub fn constrain_matrix(a: &CsrMatrix, rows: &[usize]) -> CsrMatrix {
    let mut fixed = vec![false; a.n_rows];
    for &r in rows {
        fixed[r] = true;
    }
    let kept = a
        .triplets()
        .filter(|&(i, j, _)| !fixed[i] && !fixed[j])
        .chain(rows.iter().map(|&r| (r, r, 1.0)));
    CsrMatrix::from_triplets(a.n_rows, a.n_cols, kept).expect("indices in range")
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// `‖b − Ax‖ / ‖b‖` of the returned iterate.
    pub relative_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PreconditionerKind {
    None,
    #[default]
    Jacobi,
}

/// Action `z = P⁻¹ r` of a symmetric positive (semi)definite preconditioner.
pub trait Preconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

pub struct JacobiPreconditioner {
    inv_diag: Vec<f64>,
}

impl JacobiPreconditioner {
    pub fn new(a: &CsrMatrix) -> Self {
        Self::from_diagonal(a.diagonal())
    }

    pub fn from_diagonal(diag: Vec<f64>) -> Self {
        let inv_diag = diag
            .into_iter()
            .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect();
        Self { inv_diag }
    }
}

impl Preconditioner for JacobiPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
}

impl PreconditionerKind {
    pub fn build(self, a: &CsrMatrix) -> Box<dyn Preconditioner + Send + Sync> {
        match self {
            PreconditionerKind::None => Box::new(IdentityPreconditioner),
            PreconditionerKind::Jacobi => Box::new(JacobiPreconditioner::new(a)),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate gradients from the initial iterate `x0`.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    tol: f64,
    maxit: usize,
    preconditioner: PreconditionerKind,
) -> Result<(Vec<f64>, SolveStats)> {
    if a.n_cols() != a.n_rows() {
        return Err(invalid(format!("pcg needs a square matrix, got {}x{}", a.n_rows(), a.n_cols())));
    }
    let prec = preconditioner.build(a);
    let mut x = x0.to_vec();
    let stats = pcg_in_place(a, b, &mut x, tol, maxit, prec.as_ref())?;
    Ok((x, stats))
}

/// Action `y = A x` of a square linear operator.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n_rows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.mul_vec_into(x, y);
    }
}

/// Conjugate gradients overwriting the warm start `x`.
pub fn pcg_in_place<A: LinearOperator + ?Sized>(
    a: &A,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    maxit: usize,
    prec: &dyn Preconditioner,
) -> Result<SolveStats> {
    pcg_with_reference(a, b, x, tol, maxit, prec, 0.0)
}

/// Like [`pcg_in_place`] but with the stopping test relative to
/// `max(‖b‖, reference)`. A right-hand side assembled from cancelling parts
/// passes the norm of its largest part so that roundoff is not chased.
pub fn pcg_with_reference<A: LinearOperator + ?Sized>(
    a: &A,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    maxit: usize,
    prec: &dyn Preconditioner,
    reference: f64,
) -> Result<SolveStats> {
    let n = a.dim();
    if b.len() != n || x.len() != n {
        return Err(invalid(format!(
            "pcg dimensions: operator {n}, rhs {}, iterate {}",
            b.len(),
            x.len()
        )));
    }
    if !(tol > 0.0) {
        return Err(invalid(format!("pcg tolerance must be positive, got {tol}")));
    }
    let b_norm = norm(b).max(reference);
    if b_norm == 0.0 {
        x.fill(0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let target = tol * b_norm;
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let true_residual = |x: &[f64], r: &mut [f64], q: &mut [f64]| {
        a.apply(x, q);
        for i in 0..n {
            r[i] = b[i] - q[i];
        }
        norm(r)
    };
    let mut res = true_residual(x, &mut r, &mut q);
    let mut iterations = 0;
    // One restart from the true residual guards against recurrence drift.
    let mut restarts = 0;
    while res > target && iterations < maxit {
        prec.apply(&r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        while iterations < maxit {
            a.apply(&p, &mut q);
            let pq = dot(&p, &q);
            if !(pq > 0.0) || !(rz > 0.0) {
                break;
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            iterations += 1;
            if norm(&r) <= target {
                break;
            }
            prec.apply(&r, &mut z);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        res = true_residual(x, &mut r, &mut q);
        restarts += 1;
        if restarts > 3 && res > target {
            break;
        }
    }
    let stats = SolveStats {
        iterations,
        relative_residual: res / b_norm,
        converged: res <= target,
    };
    if stats.converged {
        Ok(stats)
    } else {
        Err(Error::NonConvergence { stats })
    }
}
