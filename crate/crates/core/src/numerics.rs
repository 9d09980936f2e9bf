//! Dense linear-algebra substrate and the brute-force oracles the iterative
//! solvers are checked against.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]` in parameter space. Matrices are
//! row-major [`DenseMatrix`]. Everything here is sized for desk-scale problems
//! (a few hundred to a couple of thousand rows).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SgoifError};
use crate::model::ModelHandle;

/// Flat parameter, gradient or IHVP vector.
pub type ParamVector = Vec<f64>;

/// Largest system the dense oracles accept.
pub const DENSE_ORACLE_MAX_DIM: usize = 2000;
/// Largest model for which an explicit Hessian is formed.
pub const EXPLICIT_HESSIAN_MAX_DIM: usize = 200;
/// Default diagonal shift for indefinite model Hessians used as oracles.
pub const DEFAULT_ORACLE_DAMPING: f64 = 1e-3;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(a: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| a * v).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// A symmetric linear operator `v -> A v` on parameter space.
pub trait LinearOperator {
    fn apply(&self, v: &[f64]) -> Vec<f64>;
}

impl<F> LinearOperator for F
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self(v)
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(SgoifError::NonFinite(idx));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    /// Builds a matrix from its columns.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let ncols = cols.len();
        let nrows = cols.first().map_or(0, Vec::len);
        let mut m = Self::zeros(nrows, ncols);
        for (j, c) in cols.iter().enumerate() {
            check_dim(nrows, c.len())?;
            for (i, v) in c.iter().enumerate() {
                m.data[i * ncols + j] = *v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `A^T v`
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            axpy(*vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim(self.cols, other.rows)?;
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(a, orow, dst);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }

    /// `A^T A`
    pub fn gram(&self) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(self.cols, self.cols);
        for i in 0..self.cols {
            for j in i..self.cols {
                let s: f64 = (0..self.rows).map(|k| self.get(k, i) * self.get(k, j)).sum();
                g.set(i, j, s);
                g.set(j, i, s);
            }
        }
        g
    }

    pub fn add_diagonal(&mut self, shift: f64) {
        for i in 0..self.rows.min(self.cols) {
            self.data[i * self.cols + i] += shift;
        }
    }

    pub fn scaled(&self, a: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: scale(a, &self.data),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Checks `|A[i][j] - A[j][i]| <= 1e-12 * max(1, |A[i][j]|)`.
    pub fn check_symmetric(&self) -> Result<()> {
        check_dim(self.rows, self.cols)?;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let a = self.get(i, j);
                let gap = (a - self.get(j, i)).abs();
                if gap > 1e-12 * a.abs().max(1.0) {
                    return Err(SgoifError::NotSymmetric { row: i, col: j, gap });
                }
            }
        }
        Ok(())
    }

    /// Averages `A` with its transpose in place.
    pub fn symmetrize(&mut self) {
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, avg);
                self.set(j, i, avg);
            }
        }
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl LinearOperator for DenseMatrix {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v).expect("operator dimension")
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        check_dim(a.rows(), a.cols())?;
        let n = a.rows();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = a.get(j, j);
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(SgoifError::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n, b.len())?;
        let n = self.n;
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        Ok(y)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky.
pub fn dense_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    check_dim(a.rows(), b.len())?;
    if a.rows() > DENSE_ORACLE_MAX_DIM {
        return Err(SgoifError::DimensionMismatch {
            expected: DENSE_ORACLE_MAX_DIM,
            got: a.rows(),
        });
    }
    Cholesky::factor(a)?.solve(b)
}

/// Inverse of an SPD matrix, column by column.
pub fn dense_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let chol = Cholesky::factor(a)?;
    let n = a.rows();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(chol.solve(&e)?);
    }
    DenseMatrix::from_columns(&cols)
}

/// Eigenvalues (ascending) and matching eigenvectors (as columns) of a
/// symmetric matrix.
pub fn symmetric_eigen(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    a.check_symmetric()?;
    let n = a.rows();
    let eig = SymmetricEigen::new(a.to_nalgebra());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let cols: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    Ok((values, DenseMatrix::from_columns(&cols)?))
}

/// Smallest eigenvalue of a symmetric matrix (full eigensolve).
pub fn min_eigenvalue(a: &DenseMatrix) -> Result<f64> {
    check_dim(a.rows(), a.cols())?;
    if a.rows() > DENSE_ORACLE_MAX_DIM {
        return Err(SgoifError::DimensionMismatch {
            expected: DENSE_ORACLE_MAX_DIM,
            got: a.rows(),
        });
    }
    if a.rows() == 0 {
        return Err(SgoifError::DimensionMismatch { expected: 1, got: 0 });
    }
    let (values, _) = symmetric_eigen(a)?;
    Ok(values[0])
}

pub fn max_eigenvalue(a: &DenseMatrix) -> Result<f64> {
    let (values, _) = symmetric_eigen(a)?;
    values
        .last()
        .copied()
        .ok_or(SgoifError::DimensionMismatch { expected: 1, got: 0 })
}

/// Spectral enclosure `m <= lambda_min <= lambda_max <= M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBounds {
    pub m: f64,
    pub big_m: f64,
    pub kappa: f64,
}

impl SpectralBounds {
    pub fn new(m: f64, big_m: f64) -> Result<Self> {
        if !(m > 0.0) || !(big_m >= m) || !big_m.is_finite() {
            return Err(SgoifError::ConfigInvalid(format!(
                "spectral bounds need 0 < m <= M, got m = {m}, M = {big_m}"
            )));
        }
        Ok(Self {
            m,
            big_m,
            kappa: big_m / m,
        })
    }
}

/// Largest-magnitude eigenvalue estimate of a symmetric operator by power
/// iteration. Returns the final Rayleigh quotient (absolute value).
pub fn power_iteration(op: &dyn LinearOperator, dim: usize, iters: usize) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    // Deterministic, non-degenerate start vector.
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let w = op.apply(&v);
        // For unit v, ||A v|| never exceeds the spectral radius of a symmetric A.
        let nw = norm(&w);
        if nw == 0.0 || !nw.is_finite() {
            return if nw.is_finite() { 0.0 } else { f64::INFINITY };
        }
        estimate = nw;
        v = scale(1.0 / nw, &w);
    }
    estimate
}

/// Orthonormalizes `vectors` by two passes of modified Gram-Schmidt.
/// Columns whose remaining norm falls below `tol` times their original norm
/// are dropped.
pub fn orthonormalize(vectors: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let original = norm(v);
        if original == 0.0 || !original.is_finite() {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                axpy(-c, q, &mut w);
            }
        }
        let nw = norm(&w);
        if nw > tol * original {
            basis.push(scale(1.0 / nw, &w));
        }
    }
    basis
}

/// Exact single-anchor influence `-v^T (H + damping I)^{-1} g_z` with the
/// explicit model Hessian on `batch`.
pub fn exact_influence(
    model: &ModelHandle,
    theta: &[f64],
    batch: &[crate::model::Example],
    anchor_grad: &[f64],
    example_grad: &[f64],
    damping: f64,
) -> Result<f64> {
    let d = model.dim();
    check_dim(d, anchor_grad.len())?;
    check_dim(d, example_grad.len())?;
    let mut h = model.explicit_hessian(theta, batch)?;
    h.add_diagonal(damping);
    h.symmetrize();
    let x = dense_solve(&h, example_grad)?;
    Ok(-dot(anchor_grad, &x))
}
