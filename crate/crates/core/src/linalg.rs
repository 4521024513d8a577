//! Small sparse linear-algebra layer: triplet assembly, CSR products,
//! a quasi-definite LDLT wrapper over `faer`, and conjugate gradients.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LdltRef, SymbolicCholesky,
    SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};

use crate::error::{Result, SimError};

/// Coordinate-format accumulator. Duplicates are summed in insertion order
/// when compressed, so assembly is deterministic.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Appends `scale * other` shifted by `(row_off, col_off)`.
    pub fn extend_scaled(&mut self, other: &Triplets, scale: f64, row_off: usize, col_off: usize) {
        for &(i, j, v) in &other.entries {
            self.push(i + row_off, j + col_off, scale * v);
        }
    }

    pub fn to_csr(&self) -> Csr {
        Csr::from_entries(self.nrows, self.ncols, &self.entries)
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), data: Vec::new() }
    }

    pub fn from_entries(nrows: usize, ncols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by_key(|&k| (entries[k].0, entries[k].1, k));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut data: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (i, j, v) = entries[k];
            if last == Some((i, j)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                data.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Self { nrows, ncols, indptr, indices, data }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.data[r].iter().copied())
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// `y = Aᵀ x`
    pub fn mul_t_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (j, v) in self.row(i) {
                    y[j] += v * xi;
                }
            }
        }
        y
    }

    /// `xᵀ A x`
    pub fn quad(&self, x: &[f64]) -> f64 {
        (0..self.nrows).map(|i| x[i] * self.row(i).map(|(j, v)| v * x[j]).sum::<f64>()).sum()
    }

    pub fn transpose(&self) -> Csr {
        let mut entries = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                entries.push((j, i, v));
            }
        }
        Csr::from_entries(self.ncols, self.nrows, &entries)
    }

    pub fn to_triplets(&self) -> Triplets {
        let mut t = Triplets::new(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                t.push(i, j, v);
            }
        }
        t
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols))
            .map(|i| self.row(i).filter(|&(j, _)| j == i).map(|(_, v)| v).sum())
            .collect()
    }

    /// Squared Euclidean norm of each row.
    pub fn row_norms_sq(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v * v).sum()).collect()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        m
    }
}

/// Sparse `LDLᵀ` factorization of a symmetric matrix given by its full
/// pattern (both triangles). Intended for symmetric quasi-definite systems
/// `[H Aᵀ; A -D]` with `H` and `D` positive definite, which factor stably
/// under any symmetric ordering.
pub struct Ldlt {
    n: usize,
    symbolic: SymbolicCholesky<usize>,
    values: Vec<f64>,
}

impl std::fmt::Debug for Ldlt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ldlt").field("n", &self.n).field("nnz_l", &self.values.len()).finish()
    }
}

impl Ldlt {
    pub fn factor(matrix: &Csr) -> Result<Self> {
        let n = matrix.nrows;
        if n != matrix.ncols {
            return Err(SimError::SingularSystem("LDLT of a non-square matrix".into()));
        }
        // Upper triangle in column-major order equals the lower triangle of the
        // row-major storage read row by row.
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        let mut vals = Vec::new();
        for j in 0..n {
            for (i, v) in matrix.row(j) {
                if i <= j {
                    row_idx.push(i);
                    vals.push(v);
                }
            }
            col_ptr[j + 1] = row_idx.len();
        }
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
        let symbolic = factorize_symbolic_cholesky(
            sym,
            Side::Upper,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams::default(),
        )
        .map_err(|e| SimError::SingularSystem(format!("symbolic factorization: {e:?}")))?;
        let mut values = vec![0.0; symbolic.len_val()];
        let par = Par::Seq;
        let mut mem = MemBuffer::new(
            symbolic.factorize_numeric_ldlt_scratch::<f64>(par, Default::default()),
        );
        let a = SparseColMatRef::new(sym, &vals);
        symbolic
            .factorize_numeric_ldlt(
                &mut values,
                a,
                Side::Upper,
                LdltRegularization::default(),
                par,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| SimError::SingularSystem(format!("numeric factorization: {e:?}")))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimError::SingularSystem("non-finite factor entries".into()));
        }
        Ok(Self { n, symbolic, values })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x, 1);
        x
    }

    /// Solves for `ncols` right-hand sides stored column-major in `data`.
    pub fn solve_in_place(&self, data: &mut [f64], ncols: usize) {
        assert_eq!(data.len(), self.n * ncols);
        let par = Par::Seq;
        let mut mem = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(ncols, par));
        let rhs = MatMut::from_column_major_slice_mut(data, self.n, ncols);
        LdltRef::new(&self.symbolic, &self.values).solve_in_place_with_conj(
            Conj::No,
            rhs,
            par,
            MemStack::new(&mut mem),
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Conjugate gradients for a symmetric positive semidefinite operator with a
/// consistent right-hand side. Returns the iterate with the smallest true
/// residual and that residual's norm.
///
/// On singular operators rounding feeds the null space, and below some level
/// the recursive residual keeps shrinking while the iterate degrades. The true
/// residual is therefore recomputed every few iterations, and the run stops
/// once it has not improved for several checks.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    const CHECK_EVERY: usize = 25;
    const PATIENCE: usize = 8;
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = tol * tol;
    let true_residual = |x: &[f64]| -> f64 {
        let ax = apply(x);
        b.iter().zip(&ax).map(|(bi, ai)| (bi - ai) * (bi - ai)).sum::<f64>().sqrt()
    };
    let mut best = (x.clone(), rr.sqrt());
    let mut stale = 0;
    let mut it = 0;
    while rr > target && it < max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
        it += 1;
        if it % CHECK_EVERY == 0 {
            let res = true_residual(&x);
            if res < best.1 {
                best = (x.clone(), res);
                stale = 0;
            } else {
                stale += 1;
                if stale >= PATIENCE {
                    return best;
                }
            }
        }
    }
    let res = true_residual(&x);
    if res < best.1 {
        best = (x, res);
    }
    best
}
