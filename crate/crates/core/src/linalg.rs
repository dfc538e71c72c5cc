//! Dense row-major matrices and the symmetric eigensolver.
//!
//! All spectral computation in the crate goes through [`sym_eig`], which runs
//! cyclic Jacobi rotations and then canonicalizes the result: eigenvalues in
//! non-increasing order, each eigenvector with a positive leading entry.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;

/// Relative tolerance on `‖offdiag‖_F / ‖S‖_F` at which Jacobi stops.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Iteration cap per eigenvalue for the QL solver.
const QL_MAX_ITERATIONS: usize = 60;
/// Sweep cap for the Jacobi solver.
const JACOBI_MAX_SWEEPS: usize = 100;
/// Entries smaller than this are treated as zero by the sign convention.
const SIGN_TOLERANCE: f64 = 1e-12;
/// Products with more multiply-adds than this are split across rows.
const PARALLEL_MATMUL_WORK: usize = 1 << 18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric (max |S - S^T| = {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("matrix is not positive definite (eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { eigenvalue: f64 },
    #[error("empty matrix")]
    Empty,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape {
                expected: format!("{} entries for {rows}x{cols}", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        let m = Matrix { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: nrows, cols: ncols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[f64]>>(cols: &[C]) -> Self {
        Matrix::from_rows(cols).transpose()
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), LinalgError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(LinalgError::NonFinite { row: i / self.cols.max(1), col: i % self.cols.max(1) }),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, inner) = (other.cols, self.cols);
        let mut out = Matrix::zeros(self.rows, n);
        if n == 0 {
            return out;
        }
        let exec = if self.rows * inner * n > PARALLEL_MATMUL_WORK { Exec::default() } else { Exec::Sequential };
        exec.for_each_row(&mut out.data, GEMM_ROWS * n, |block, rows| gemm_rows(self, other, block * GEMM_ROWS, rows));
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_t shape mismatch: {}x{} · ({}x{})^T",
            self.rows, self.cols, other.rows, other.cols
        );
        self.matmul(&other.transpose())
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        self.transpose().matmul(other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    /// Mean of the columns: the per-row average over examples.
    pub fn mean_column(&self) -> Vec<f64> {
        let m = self.cols as f64;
        (0..self.rows).map(|r| self.row(r).iter().sum::<f64>() / m).collect()
    }

    /// Per-row sums over columns.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum::<f64>()).collect()
    }

    /// Subtracts `v` from every column.
    pub fn sub_column(&self, v: &[f64]) -> Matrix {
        assert_eq!(v.len(), self.rows, "broadcast length mismatch");
        let mut out = self.clone();
        for (r, &vr) in v.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x -= vr);
        }
        out
    }

    /// Adds `v` to every column.
    pub fn add_column(&self, v: &[f64]) -> Matrix {
        assert_eq!(v.len(), self.rows, "broadcast length mismatch");
        let mut out = self.clone();
        for (r, &vr) in v.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x += vr);
        }
        out
    }

    /// Multiplies row `r` by `v[r]`.
    pub fn scale_rows(&self, v: &[f64]) -> Matrix {
        assert_eq!(v.len(), self.rows, "broadcast length mismatch");
        let mut out = self.clone();
        for (r, &vr) in v.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= vr);
        }
        out
    }

    /// Multiplies column `c` by `v[c]`.
    pub fn scale_cols(&self, v: &[f64]) -> Matrix {
        assert_eq!(v.len(), self.cols, "broadcast length mismatch");
        let mut out = self.clone();
        for r in 0..self.rows {
            out.row_mut(r).iter_mut().zip(v).for_each(|(x, &s)| *x *= s);
        }
        out
    }

    /// Copies rows `start..end`.
    pub fn rows_range(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// Copies the listed columns, in order.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (j, &c) in idx.iter().enumerate() {
                out.data[r * idx.len() + j] = src[c];
            }
        }
        out
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[Matrix]) -> Matrix {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::with_capacity(blocks.iter().map(|b| b.data.len()).sum());
        let mut rows = 0;
        for b in blocks {
            assert_eq!(b.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Matrix { rows, cols, data }
    }

    /// Writes `block` into `self` starting at row `start`.
    pub fn set_rows(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.cols, self.cols, "set_rows column mismatch");
        assert!(start + block.rows <= self.rows, "set_rows out of bounds");
        let w = self.cols;
        self.data[start * w..(start + block.rows) * w].copy_from_slice(&block.data);
    }

    /// `(1/m) · self · selfᵀ` for a d×m batch of already-centered columns.
    pub fn gram_scaled(&self) -> Matrix {
        let m = self.cols as f64;
        let mut g = self.matmul_t(self).scale(1.0 / m);
        g.make_symmetric();
        g
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `½(A + Aᵀ)`.
    pub fn symmetrized(&self) -> Matrix {
        let mut out = self.clone();
        out.make_symmetric();
        out
    }

    fn make_symmetric(&mut self) {
        assert!(self.is_square(), "symmetrize requires a square matrix");
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    /// Zeroes everything off the diagonal.
    pub fn diag_part(&self) -> Matrix {
        Matrix::from_diag(&self.diag())
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }
}

const GEMM_ROWS: usize = 4;
const GEMM_COLS: usize = 256;

/// Accumulates rows `row0..` of `a · b` into `out` (whole output rows).
/// Four rows share each load of `b`; every entry is still summed in
/// ascending `k` order.
fn gemm_rows(a: &Matrix, b: &Matrix, row0: usize, out: &mut [f64]) {
    let n = b.cols;
    let inner = a.cols;
    let rows = out.len() / n;
    for j0 in (0..n).step_by(GEMM_COLS) {
        let j1 = (j0 + GEMM_COLS).min(n);
        if rows == GEMM_ROWS {
            let (o0, rest) = out.split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            let (o0, o1, o2, o3) = (&mut o0[j0..j1], &mut o1[j0..j1], &mut o2[j0..j1], &mut o3[j0..j1]);
            for k in 0..inner {
                let a0 = a.data[row0 * inner + k];
                let a1 = a.data[(row0 + 1) * inner + k];
                let a2 = a.data[(row0 + 2) * inner + k];
                let a3 = a.data[(row0 + 3) * inner + k];
                if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                    continue;
                }
                let bk = &b.data[k * n + j0..k * n + j1];
                for ((((x0, x1), x2), x3), &bv) in
                    o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut()).zip(bk)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
        } else {
            for (r, orow) in out.chunks_mut(n).enumerate() {
                let orow = &mut orow[j0..j1];
                let arow = a.row(row0 + r);
                for (k, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let bk = &b.data[k * n + j0..k * n + j1];
                    for (x, &bv) in orow.iter_mut().zip(bk) {
                        *x += av * bv;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent partial sums let the compiler vectorize.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn outer(a: &[f64], b: &[f64]) -> Matrix {
    Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

/// Eigendecomposition `S = D·diag(λ)·Dᵀ` of a symmetric matrix, in canonical
/// form when produced by [`sym_eig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigDecomp {
    pub eigenvalues: Vec<f64>,
    /// Columns are eigenvectors.
    pub eigenvectors: Matrix,
}

impl EigDecomp {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Reorders and sign-flips the eigenpairs: column `j` of the result is
    /// `signs[j] ·` column `perm[j]` of `self`. Used to check that assembled
    /// whitening matrices do not depend on the convention.
    pub fn permuted(&self, perm: &[usize], signs: &[f64]) -> EigDecomp {
        let d = self.dim();
        assert!(perm.len() == d && signs.len() == d);
        let eigenvalues = perm.iter().map(|&p| self.eigenvalues[p]).collect();
        let eigenvectors = Matrix::from_fn(d, d, |r, c| signs[c] * self.eigenvectors[(r, perm[c])]);
        EigDecomp { eigenvalues, eigenvectors }
    }

    /// `D·diag(λ)·Dᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let scaled = self.eigenvectors.scale_cols(&self.eigenvalues);
        scaled.matmul_t(&self.eigenvectors)
    }

    fn inv_sqrt_values(&self) -> Result<Vec<f64>, LinalgError> {
        self.eigenvalues
            .iter()
            .map(|&l| if l > 0.0 { Ok(1.0 / l.sqrt()) } else { Err(LinalgError::NotPositiveDefinite { eigenvalue: l }) })
            .collect()
    }

    /// PCA whitening matrix `U = Λ^{-1/2}·Dᵀ`.
    pub fn pca_whitening(&self) -> Result<Matrix, LinalgError> {
        let s = self.inv_sqrt_values()?;
        Ok(self.eigenvectors.transpose().scale_rows(&s))
    }

    /// ZCA whitening matrix `D·Λ^{-1/2}·Dᵀ`.
    pub fn zca_whitening(&self) -> Result<Matrix, LinalgError> {
        let s = self.inv_sqrt_values()?;
        let scaled = self.eigenvectors.scale_cols(&s);
        Ok(scaled.matmul_t(&self.eigenvectors))
    }

    /// Smallest gap between consecutive (sorted) eigenvalues.
    pub fn min_gap(&self) -> f64 {
        self.eigenvalues.windows(2).map(|w| (w[0] - w[1]).abs()).fold(f64::INFINITY, f64::min)
    }
}

fn check_symmetric(s: &Matrix) -> Result<(), LinalgError> {
    if s.rows() == 0 {
        return Err(LinalgError::Empty);
    }
    if !s.is_square() {
        return Err(LinalgError::Shape { expected: "square matrix".into(), found: format!("{}x{}", s.rows(), s.cols()) });
    }
    s.check_finite()?;
    let scale = s.max_abs().max(1.0);
    let asym = s.max_asymmetry();
    if asym > 1e-12 * scale {
        return Err(LinalgError::NotSymmetric { max_asymmetry: asym });
    }
    Ok(())
}

/// Symmetric eigendecomposition: Householder reduction to tridiagonal form
/// followed by implicit QL iterations.
///
/// The output is canonical: eigenvalues non-increasing, ties ordered by
/// lexicographic comparison of their eigenvector columns (descending), and
/// each eigenvector's first entry with magnitude above `1e-12` positive.
/// Same input bits give the same output bits.
pub fn sym_eig(s: &Matrix) -> Result<EigDecomp, LinalgError> {
    check_symmetric(s)?;
    let n = s.rows();
    let mut v = s.symmetrized().into_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, n, &mut d, &mut e);
    // Work on the transpose so rotations touch contiguous rows.
    let mut vt = Matrix::from_vec(n, n, v).expect("finite").transpose().into_vec();
    tridiagonal_ql(&mut vt, n, &mut d, &mut e)?;
    let vectors: Vec<Vec<f64>> = vt.chunks(n).map(|r| r.to_vec()).collect();
    Ok(canonicalize(d, vectors))
}

/// Householder reduction of the row-major symmetric `v` (overwritten by the
/// accumulated orthogonal transform). On exit `d` holds the diagonal and
/// `e[1..]` the sub-diagonal.
fn tridiagonalize(v: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    d.copy_from_slice(&v[at(n - 1, 0)..at(n - 1, 0) + n]);
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for x in d[..i].iter_mut() {
                *x /= scale;
                h += *x * *x;
            }
            let f = d[i - 1];
            let g = if f > 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);
            for j in 0..i {
                let f = d[j];
                v[at(j, i)] = f;
                let mut g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let (f, g) = (d[j], e[j]);
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal `(d, e)`; `vt` holds the transform's
/// columns as rows and is rotated along. Eigenvalues end up in `d`.
fn tridiagonal_ql(vt: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) -> Result<(), LinalgError> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITERATIONS {
                    return Err(LinalgError::NoConvergence { sweeps: iter, residual: e[l].abs() });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for x in d[l + 2..].iter_mut() {
                    *x -= h;
                }
                f += h;

                p = d[m];
                let (mut c, mut c2, mut c3) = (1.0, 1.0, 1.0);
                let el1 = e[l + 1];
                let (mut s, mut s2) = (0.0, 0.0);
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = vt.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..];
                    let row_next = &mut hi[..n];
                    for (a, b) in row_i.iter_mut().zip(row_next.iter_mut()) {
                        let h = *b;
                        *b = s * *a + c * h;
                        *a = c * *a - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition, canonicalized like [`sym_eig`]. Slower
/// but independent of the tridiagonal path; kept as a cross-check.
pub fn sym_eig_jacobi(s: &Matrix) -> Result<EigDecomp, LinalgError> {
    check_symmetric(s)?;
    let n = s.rows();
    let mut a = s.symmetrized();
    // Rows of `vt` are the eigenvectors; row updates stay contiguous.
    let mut vt = Matrix::identity(n);
    let tol = JACOBI_TOLERANCE * s.frobenius_norm();

    let mut converged = off_diagonal_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Rotation already below the resolution of both diagonals.
                let g = 100.0 * apq.abs();
                if sweeps > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut vt, p, q, c, sn, t, apq);
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&a) <= tol;
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps, residual: off_diagonal_norm(&a) });
    }

    let values = a.diag();
    let vectors: Vec<Vec<f64>> = (0..n).map(|i| vt.row(i).to_vec()).collect();
    Ok(canonicalize(values, vectors))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn rotate(a: &mut Matrix, vt: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t: f64, apq: f64) {
    let n = a.rows();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let new_p = c * akp - s * akq;
        let new_q = s * akp + c * akq;
        a[(k, p)] = new_p;
        a[(p, k)] = new_p;
        a[(k, q)] = new_q;
        a[(q, k)] = new_q;
    }
    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    let w = vt.cols();
    let data = vt.as_mut_slice();
    let (lo, hi) = data.split_at_mut(q * w);
    let row_p = &mut lo[p * w..(p + 1) * w];
    let row_q = &mut hi[..w];
    for (vp, vq) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let x = *vp;
        let y = *vq;
        *vp = c * x - s * y;
        *vq = s * x + c * y;
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

fn canonicalize(values: Vec<f64>, mut vectors: Vec<Vec<f64>>) -> EigDecomp {
    let n = values.len();
    for v in vectors.iter_mut() {
        if let Some(&lead) = v.iter().find(|x| x.abs() > SIGN_TOLERANCE) {
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));

    // Break ties inside runs of (numerically) equal eigenvalues.
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tie = 1e-12 * scale;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (values[order[end - 1]] - values[order[end]]).abs() <= tie {
            end += 1;
        }
        if end - start > 1 {
            order[start..end].sort_by(|&i, &j| lex_cmp(&vectors[j], &vectors[i]));
        }
        start = end;
    }

    let eigenvalues = order.iter().map(|&i| values[i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| vectors[order[c]][r]);
    EigDecomp { eigenvalues, eigenvectors }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// Symmetric inverse square root `D·Λ^{-1/2}·Dᵀ`.
pub fn inv_sqrt_zca(s: &Matrix) -> Result<Matrix, LinalgError> {
    sym_eig(s)?.zca_whitening()
}

/// PCA inverse square root `Λ^{-1/2}·Dᵀ` using the canonical decomposition.
pub fn inv_sqrt_pca(s: &Matrix) -> Result<Matrix, LinalgError> {
    sym_eig(s)?.pca_whitening()
}

/// `σ_max / σ_min`, or `+∞` when `σ_min` is below `1e-300`.
pub fn condition_number(s: &Matrix) -> Result<f64, LinalgError> {
    let eig = sym_eig(s)?;
    Ok(condition_from_spectrum(&eig.eigenvalues))
}

pub(crate) fn condition_from_spectrum(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < 1e-300 {
        f64::INFINITY
    } else {
        max / min
    }
}
