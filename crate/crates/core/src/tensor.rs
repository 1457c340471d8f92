//! Fast-diagonalization solver for sums of Kronecker products.
//!
//! Each axis carries a pair `(A_a, B_a)` of symmetric positive semidefinite
//! matrices with `A_a + B_a` positive definite. Both are diagonalized by one
//! congruence `V_aᵀ A_a V_a = diag(α)`, `V_aᵀ B_a V_a = diag(β)`, so any
//! operator `Σ_t c_t ⊗_a X_{t,a}` with `X_{t,a} ∈ {A_a, B_a}` is diagonal in
//! the product basis and its pseudo-inverse costs a few dense axis sweeps.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::grid::{tensor_apply, AxisOperator};
use crate::sparse::{constrain_matrix, CsrMatrix, LinearOperator, Preconditioner};

/// Which member of the axis pair a term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMember {
    A,
    B,
}

/// One Kronecker term `coef · ⊗_a X_a` (axes in storage order).
#[derive(Debug, Clone)]
pub struct KronTerm {
    pub coef: f64,
    pub members: Vec<PairMember>,
}

struct AxisBasis {
    forward: AxisOperator,
    backward: AxisOperator,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn restrict(m: &CsrMatrix, free: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(free.len(), free.len(), |i, j| m.get(free[i], free[j]))
}

fn dense_operator(m: &DMatrix<f64>) -> AxisOperator {
    let rows = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| (j, m[(i, j)])).collect())
        .collect();
    AxisOperator::from_rows(m.ncols(), rows)
}

impl AxisBasis {
    fn new(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Self> {
        let s = a + b;
        let chol = s
            .cholesky()
            .ok_or_else(|| invalid("axis pair sum is not positive definite"))?;
        let l = chol.l();
        let l_inv = l
            .clone()
            .try_inverse()
            .ok_or_else(|| invalid("singular Cholesky factor"))?;
        let c = &l_inv * a * l_inv.transpose();
        let c = (&c + c.transpose()) * 0.5;
        let eig = c.symmetric_eigen();
        let v = l_inv.transpose() * eig.eigenvectors;
        let diag = |m: &DMatrix<f64>| -> Vec<f64> {
            let p = v.transpose() * m * &v;
            (0..p.nrows()).map(|i| p[(i, i)].max(0.0)).collect()
        };
        Ok(Self {
            alpha: diag(a),
            beta: diag(b),
            forward: dense_operator(&v.transpose()),
            backward: dense_operator(&v),
        })
    }
}

/// Exact pseudo-inverse of a Kronecker-sum operator, optionally restricted
/// to free indices per axis (constrained entries act as the identity).
pub struct FastDiagonalization {
    dims: Vec<usize>,
    free: Vec<Vec<usize>>,
    axes: Vec<AxisBasis>,
    inv_eig: Vec<f64>,
}

impl FastDiagonalization {
    /// `pairs[a] = (A_a, B_a)`; `free[a]` lists unconstrained indices of
    /// axis `a` (None = all).
    pub fn new(
        pairs: &[(CsrMatrix, CsrMatrix)],
        terms: &[KronTerm],
        free: &[Option<Vec<usize>>],
    ) -> Result<Self> {
        if pairs.len() != free.len() || terms.iter().any(|t| t.members.len() != pairs.len()) {
            return Err(invalid("fast diagonalization: axis counts differ"));
        }
        let dims: Vec<usize> = pairs.iter().map(|(a, _)| a.n_rows()).collect();
        let free: Vec<Vec<usize>> = free
            .iter()
            .zip(&dims)
            .map(|(f, &n)| f.clone().unwrap_or_else(|| (0..n).collect()))
            .collect();
        let axes = pairs
            .iter()
            .zip(&free)
            .map(|((a, b), f)| AxisBasis::new(&restrict(a, f), &restrict(b, f)))
            .collect::<Result<Vec<_>>>()?;
        let sizes: Vec<usize> = free.iter().map(Vec::len).collect();
        let total: usize = sizes.iter().product();
        let mut eig = vec![0.0; total];
        let mut idx = vec![0usize; sizes.len()];
        for e in eig.iter_mut() {
            *e = terms
                .iter()
                .map(|t| {
                    t.coef
                        * t.members
                            .iter()
                            .zip(&axes)
                            .zip(&idx)
                            .map(|((m, ax), &i)| match m {
                                PairMember::A => ax.alpha[i],
                                PairMember::B => ax.beta[i],
                            })
                            .product::<f64>()
                })
                .sum();
            for a in (0..sizes.len()).rev() {
                idx[a] += 1;
                if idx[a] < sizes[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let max = eig.iter().copied().fold(0.0, f64::max);
        let inv_eig = eig
            .iter()
            .map(|&e| if e > 1e-12 * max { 1.0 / e } else { 0.0 })
            .collect();
        Ok(Self {
            dims,
            free,
            axes,
            inv_eig,
        })
    }

    fn gather(&self, full: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.inv_eig.len());
        let mut idx = vec![0usize; self.dims.len()];
        let sizes: Vec<usize> = self.free.iter().map(Vec::len).collect();
        for _ in 0..self.inv_eig.len() {
            out.push(full[self.flat(&idx)]);
            advance(&mut idx, &sizes);
        }
        out
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.free)
            .zip(&self.dims)
            .fold(0, |acc, ((&i, f), &n)| acc * n + f[i])
    }
}

fn advance(idx: &mut [usize], sizes: &[usize]) {
    for a in (0..sizes.len()).rev() {
        idx[a] += 1;
        if idx[a] < sizes[a] {
            return;
        }
        idx[a] = 0;
    }
}

impl Preconditioner for FastDiagonalization {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        let local = self.gather(r);
        let fwd: Vec<&AxisOperator> = self.axes.iter().map(|a| &a.forward).collect();
        let mut coeffs = tensor_apply(&fwd, &local);
        for (c, s) in coeffs.iter_mut().zip(&self.inv_eig) {
            *c *= s;
        }
        let bwd: Vec<&AxisOperator> = self.axes.iter().map(|a| &a.backward).collect();
        let solved = tensor_apply(&bwd, &coeffs);
        let sizes: Vec<usize> = self.free.iter().map(Vec::len).collect();
        let mut idx = vec![0usize; sizes.len()];
        for v in solved {
            z[self.flat(&idx)] = v;
            advance(&mut idx, &sizes);
        }
    }
}

fn axis_operator(m: &CsrMatrix) -> AxisOperator {
    let rows = (0..m.n_rows())
        .map(|i| {
            let (c, v) = m.row(i);
            c.iter().copied().zip(v.iter().copied()).collect()
        })
        .collect();
    AxisOperator::from_rows(m.n_cols(), rows)
}

struct KronBlock {
    row: usize,
    col: usize,
    coef: f64,
    factors: Vec<CsrMatrix>,
    ops: Vec<AxisOperator>,
}

/// Matrix-free block operator whose blocks are sums of Kronecker products
/// of axis matrices (axes in storage order). Constrained indices are
/// eliminated: the operator acts as `P A P + (I − P)`.
pub struct KronSystem {
    n_blocks: usize,
    block_len: usize,
    dims: Vec<usize>,
    blocks: Vec<KronBlock>,
    fixed: Vec<usize>,
    mask: Vec<bool>,
}

impl KronSystem {
    /// `n_blocks` square blocks over tensor arrays with axis lengths `dims`.
    pub fn new(n_blocks: usize, dims: Vec<usize>) -> Self {
        let block_len = dims.iter().product();
        Self {
            n_blocks,
            block_len,
            dims,
            blocks: Vec::new(),
            fixed: Vec::new(),
            mask: vec![false; n_blocks * block_len],
        }
    }

    /// Adds `coef · ⊗ factors` to block `(row, col)`.
    pub fn add(&mut self, row: usize, col: usize, coef: f64, factors: Vec<CsrMatrix>) -> Result<()> {
        if row >= self.n_blocks || col >= self.n_blocks || factors.len() != self.dims.len() {
            return Err(invalid("kron term does not match the block layout"));
        }
        if factors
            .iter()
            .zip(&self.dims)
            .any(|(f, &n)| f.n_rows() != n || f.n_cols() != n)
        {
            return Err(invalid("kron factor has the wrong size"));
        }
        let ops = factors.iter().map(axis_operator).collect();
        self.blocks.push(KronBlock { row, col, coef, factors, ops });
        Ok(())
    }

    /// Replaces the rows and columns of `fixed` by the identity.
    pub fn constrain(&mut self, fixed: Vec<usize>) {
        self.mask.fill(false);
        for &i in &fixed {
            self.mask[i] = true;
        }
        self.fixed = fixed;
    }

    pub fn fixed(&self) -> &[usize] {
        &self.fixed
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// The operator as an explicit sparse matrix.
    pub fn assemble(&self) -> Result<CsrMatrix> {
        let mut grid: Vec<Vec<Option<CsrMatrix>>> = vec![vec![None; self.n_blocks]; self.n_blocks];
        for b in &self.blocks {
            let mut k = b.factors[0].clone();
            for f in &b.factors[1..] {
                k = k.kron(f);
            }
            k.scale(b.coef);
            let slot = &mut grid[b.row][b.col];
            *slot = Some(match slot.take() {
                Some(prev) => CsrMatrix::linear_combination(&[(1.0, &prev), (1.0, &k)])?,
                None => k,
            });
        }
        let empty = CsrMatrix::zeros(self.block_len, self.block_len);
        let refs: Vec<Vec<Option<&CsrMatrix>>> = grid
            .iter()
            .map(|row| row.iter().map(|m| Some(m.as_ref().unwrap_or(&empty))).collect())
            .collect();
        let full = CsrMatrix::block(&refs)?;
        Ok(if self.fixed.is_empty() { full } else { constrain_matrix(&full, &self.fixed) })
    }

    /// Diagonal of the operator.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.n_blocks * self.block_len];
        for b in self.blocks.iter().filter(|b| b.row == b.col) {
            let factor_diags: Vec<Vec<f64>> = b.factors.iter().map(CsrMatrix::diagonal).collect();
            let offset = b.row * self.block_len;
            let mut idx = vec![0usize; self.dims.len()];
            for k in 0..self.block_len {
                diag[offset + k] += b.coef
                    * factor_diags
                        .iter()
                        .zip(&idx)
                        .map(|(d, &i)| d[i])
                        .product::<f64>();
                advance(&mut idx, &self.dims);
            }
        }
        for &i in &self.fixed {
            diag[i] = 1.0;
        }
        diag
    }
}

impl LinearOperator for KronSystem {
    fn dim(&self) -> usize {
        self.n_blocks * self.block_len
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let free_x: Vec<f64>;
        let x_used = if self.fixed.is_empty() {
            x
        } else {
            free_x = x
                .iter()
                .zip(&self.mask)
                .map(|(&v, &m)| if m { 0.0 } else { v })
                .collect();
            &free_x
        };
        y.fill(0.0);
        let n = self.block_len;
        for b in &self.blocks {
            let refs: Vec<&AxisOperator> = b.ops.iter().collect();
            let part = tensor_apply(&refs, &x_used[b.col * n..(b.col + 1) * n]);
            for (yi, pi) in y[b.row * n..(b.row + 1) * n].iter_mut().zip(part) {
                *yi += b.coef * pi;
            }
        }
        for &i in &self.fixed {
            y[i] = x[i];
        }
    }
}

/// Block-diagonal preconditioner over consecutive index ranges.
pub struct BlockPreconditioner {
    blocks: Vec<(usize, Box<dyn Preconditioner + Send + Sync>)>,
}

impl BlockPreconditioner {
    /// Blocks of equal size `block_len`, in order.
    pub fn new(block_len: usize, blocks: Vec<Box<dyn Preconditioner + Send + Sync>>) -> Self {
        Self {
            blocks: blocks
                .into_iter()
                .enumerate()
                .map(|(i, b)| (i * block_len, b))
                .collect(),
        }
    }
}

impl Preconditioner for BlockPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let len = r.len() / self.blocks.len().max(1);
        for (offset, p) in &self.blocks {
            p.apply(&r[*offset..offset + len], &mut z[*offset..offset + len]);
        }
    }
}
