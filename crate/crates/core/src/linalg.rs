//! Small dense/sparse matrix types and the few factorizations the trainers need.
//!
//! Everything is row-major. Time series and state matrices are stored
//! time-major: row `k` holds the vector at time index `k`.

use nalgebra::{DMatrix, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
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

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `out = self * x`
    pub fn mul_vec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.row_iter()) {
            *o = dot(row, x);
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ * x`
    pub fn tr_mul_vec_acc(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&xi, row) in x.iter().zip(self.row_iter()) {
            if xi != T::zero() {
                for (o, &r) in out.iter_mut().zip(row) {
                    *o += xi * r;
                }
            }
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_ptr: vec![0; rows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    /// Builds from `(row, col, value)` triplets. Duplicate positions are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, T)> = triplets.to_vec();
        if let Some(&(r, c, _)) = sorted.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::DimensionMismatch(format!(
                "entry ({r}, {c}) outside a {rows}x{cols} matrix"
            )));
        }
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self { rows, cols, row_ptr, col_idx, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, T)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.push((r, self.col_idx[k], self.values[k]));
            }
        }
        out
    }

    /// `out = self * x`
    pub fn mul_vec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            let mut acc = T::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *o = acc;
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ * x`
    pub fn tr_mul_vec_acc(&self, x: &[T], out: &mut [T]) {
        for (r, &xr) in x.iter().enumerate().take(self.rows) {
            if xr == T::zero() {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.values[k] * xr;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            d[(r, c)] = v;
        }
        d
    }

    pub fn cast<U: Scalar>(&self) -> SparseMatrix<U> {
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: DenseMatrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Fails with [`Error::IllConditioned`] when a pivot falls below
    /// `n * eps * max_diag`.
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::DimensionMismatch("Cholesky needs a square matrix".into()));
        }
        let max_diag = (0..n).fold(T::zero(), |m, i| m.max(a[(i, i)].abs()));
        let floor = T::of(n.max(1) as f64) * T::epsilon() * max_diag;
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
            if !(d > floor) {
                return Err(Error::IllConditioned);
            }
            d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.l.rows();
        for i in 0..n {
            let s = b[i] - dot(&self.l.row(i)[..i], &b[..i]);
            b[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }
}

/// Outcome of [`spectral_radius`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub radius: f64,
    pub iterations: usize,
    /// `false` when power iteration stalled and the dense eigensolver was used.
    pub power_converged: bool,
}

pub const POWER_TOLERANCE: f64 = 1e-9;
pub const POWER_MAX_ITER: usize = 10_000;

/// Largest absolute eigenvalue of a square sparse matrix.
///
/// Power iteration that also resolves a dominant complex-conjugate pair: each
/// sweep fits the two-term recurrence `W²v ≈ a·Wv + b·v`, whose characteristic
/// roots are the dominant eigenvalue(s). Converged when the fit residual is
/// below `tol` relative to `‖W²v‖`. Otherwise falls back to a dense Schur
/// decomposition.
pub fn spectral_radius(w: &SparseMatrix<f64>, tol: f64, max_iter: usize) -> SpectralEstimate {
    let n = w.rows();
    if n == 0 || w.nnz() == 0 {
        return SpectralEstimate { radius: 0.0, iterations: 0, power_converged: true };
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7).sin()).collect();
    normalize(&mut v);
    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    for it in 1..=max_iter {
        w.mul_vec_into(&v, &mut u1);
        w.mul_vec_into(&u1, &mut u2);
        let n2 = dot(&u2, &u2).sqrt();
        if n2 == 0.0 || !n2.is_finite() {
            // nilpotent directions annihilate the iterate
            return dense_fallback(w, it);
        }
        if let Some(radius) = fit_recurrence(&v, &u1, &u2, n2, tol) {
            return SpectralEstimate { radius, iterations: it, power_converged: true };
        }
        v.copy_from_slice(&u2);
        normalize(&mut v);
    }
    dense_fallback(w, max_iter)
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Least-squares fit of `u2 = a·u1 + b·v`; returns the dominant root modulus if
/// the fit (or the single-eigenvalue fit `u2 = λ·u1`) is tight.
fn fit_recurrence(v: &[f64], u1: &[f64], u2: &[f64], n2: f64, tol: f64) -> Option<f64> {
    let s11 = dot(u1, u1);
    let lam = dot(u2, u1) / s11;
    let res1 = u2.iter().zip(u1).map(|(&a, &b)| (a - lam * b).powi(2)).sum::<f64>().sqrt();
    if res1 <= tol * n2 {
        return Some(lam.abs());
    }
    let s00 = dot(v, v);
    let s01 = dot(v, u1);
    let r1 = dot(u2, u1);
    let r0 = dot(u2, v);
    let det = s11 * s00 - s01 * s01;
    if det <= 1e-14 * s11 * s00 {
        return None;
    }
    let a = (r1 * s00 - r0 * s01) / det;
    let b = (s11 * r0 - s01 * r1) / det;
    let res2 = u2
        .iter()
        .zip(u1.iter().zip(v))
        .map(|(&y, (&x1, &x0))| (y - a * x1 - b * x0).powi(2))
        .sum::<f64>()
        .sqrt();
    if res2 > tol * n2 {
        return None;
    }
    let disc = a * a + 4.0 * b;
    Some(if disc >= 0.0 {
        let s = disc.sqrt();
        ((a + s) / 2.0).abs().max(((a - s) / 2.0).abs())
    } else {
        (-b).sqrt()
    })
}

fn dense_fallback(w: &SparseMatrix<f64>, iterations: usize) -> SpectralEstimate {
    SpectralEstimate { radius: dense_spectral_radius(&w.to_dense()), iterations, power_converged: false }
}

/// Spectral radius through a real Schur decomposition.
pub fn dense_spectral_radius(m: &DenseMatrix<f64>) -> f64 {
    let n = m.rows();
    let dm = DMatrix::from_row_slice(n, m.cols(), m.as_slice());
    let schur = Schur::try_new(dm, f64::EPSILON, 100 * n.max(10))
        .expect("Schur iteration converges for finite matrices");
    schur
        .complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = DenseMatrix::from_rows(&[vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 2.0]])
            .unwrap();
        let x_true = [1.0_f64, -2.0, 0.5];
        let mut b = a.mul_vec(&x_true);
        Cholesky::factor(&a).unwrap().solve_in_place(&mut b);
        for (x, t) in b.iter().zip(x_true) {
            assert!((x - t).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(Cholesky::factor(&a), Err(Error::IllConditioned)));
    }

    #[test]
    fn sparse_duplicates_are_summed_and_products_match_dense() {
        let t = [(0, 1, 2.0), (1, 0, -1.0), (0, 1, 1.0), (2, 2, 4.0)];
        let s = SparseMatrix::from_triplets(3, 3, &t).unwrap();
        assert_eq!(s.nnz(), 3);
        let d = s.to_dense();
        assert_eq!(d[(0, 1)], 3.0);
        let x = [1.0, 2.0, 3.0];
        assert_eq!(s.mul_vec(&x), d.mul_vec(&x));
        let mut a = vec![0.0; 3];
        let mut b = vec![0.0; 3];
        s.tr_mul_vec_acc(&x, &mut a);
        d.tr_mul_vec_acc(&x, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn sparse_rejects_out_of_range() {
        assert!(SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn power_iteration_real_dominant() {
        let s = SparseMatrix::from_triplets(3, 3, &[(0, 0, -3.0), (1, 1, 2.0), (2, 2, 1.0)]).unwrap();
        let est = spectral_radius(&s, POWER_TOLERANCE, POWER_MAX_ITER);
        assert!(est.power_converged);
        assert!((est.radius - 3.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_complex_pair() {
        // rotation-scaling block with eigenvalues 2e^{±iθ} plus a smaller real mode
        let (c, s) = (2.0 * 0.3_f64.cos(), 2.0 * 0.3_f64.sin());
        let m = SparseMatrix::from_triplets(3, 3, &[(0, 0, c), (0, 1, -s), (1, 0, s), (1, 1, c), (2, 2, 0.5)])
            .unwrap();
        let est = spectral_radius(&m, POWER_TOLERANCE, POWER_MAX_ITER);
        assert!(est.power_converged);
        assert!((est.radius - 2.0).abs() < 1e-9, "{est:?}");
        assert!((dense_spectral_radius(&m.to_dense()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nilpotent_matrix_has_zero_radius() {
        let m = SparseMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let est = spectral_radius(&m, POWER_TOLERANCE, POWER_MAX_ITER);
        assert!(est.radius < 1e-12);
    }
}
