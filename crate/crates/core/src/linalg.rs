//! Small dense linear algebra: row-major matrices, Cholesky solves and
//! dominant eigenvalues of symmetric matrices by power iteration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EIG_TOL: f64 = 1e-10;
pub const DEFAULT_EIG_MAX_ITER: usize = 200_000;

/// Multiply-adds per parallel task in [`Matrix::matmul`].
const PAR_WORK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        if other.cols == 0 {
            return Ok(out);
        }
        // Rows are independent, so the parallel result equals the serial one.
        let min_rows = (PAR_WORK / (self.cols * other.cols).max(1)).max(1);
        out.data
            .par_chunks_mut(other.cols)
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(i, dst)| {
                for (k, &a) in self.row(i).iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                        *d += a * b;
                    }
                }
            });
        Ok(out)
    }

    /// `selfᵀ · self`. Exactly symmetric.
    pub fn gram(&self) -> Matrix {
        self.transpose().matmul(self).expect("conforming shapes")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn add_diagonal(&mut self, eps: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += eps;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::DimensionMismatch("matrix subtraction".into()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            for (k, &j) in cols.iter().enumerate() {
                out[(i, k)] = self[(i, j)];
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `a = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "Cholesky of non-square {}x{} matrix",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        // Pivots at rounding level relative to the largest diagonal entry
        // mean the matrix is singular in floating point.
        let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let floor = 4.0 * n as f64 * f64::EPSILON * max_diag;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: d,
                    hint: "matrix must be symmetric positive definite".into(),
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    /// Solves `L·y = b` in place.
    pub fn forward_substitute(&self, b: &mut [f64]) {
        let n = self.l.rows;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `Lᵀ·x = y` in place.
    pub fn backward_substitute(&self, y: &mut [f64]) {
        let n = self.l.rows;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `a·X = b` column by column.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows != self.l.rows {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has {} rows, system has {}",
                b.rows, self.l.rows
            )));
        }
        let mut cols = b.transpose();
        if b.rows > 0 {
            cols.data.par_chunks_mut(b.rows).for_each(|col| {
                self.forward_substitute(col);
                self.backward_substitute(col);
            });
        }
        Ok(cols.transpose())
    }

    /// `L⁻¹ · s · L⁻ᵀ` for symmetric `s`; the result is symmetrized.
    pub fn whiten(&self, s: &Matrix) -> Result<Matrix> {
        let n = self.l.rows;
        if s.rows != n || s.cols != n {
            return Err(Error::DimensionMismatch("whitening dimension".into()));
        }
        // Y = L⁻¹ S, column by column.
        let mut y = Matrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                col[i] = s[(i, j)];
            }
            self.forward_substitute(&mut col);
            for i in 0..n {
                y[(i, j)] = col[i];
            }
        }
        // M = L⁻¹ Yᵀ = L⁻¹ S L⁻ᵀ since S is symmetric.
        let yt = y.transpose();
        let mut m = Matrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                col[i] = yt[(i, j)];
            }
            self.forward_substitute(&mut col);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        Ok(m)
    }
}

/// Solves `a·X = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor(a)?.solve(b)
}

/// Algebraically largest eigenvalue of a symmetric matrix.
///
/// Power iteration on `a + s·I`, with `s` chosen from the Gershgorin discs so
/// that the shifted matrix is positive semidefinite; its dominant eigenvalue
/// is then the largest one of `a`, shifted.
pub fn largest_eigenvalue_sym(a: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    check_symmetric(a)?;
    let shift = (0..a.rows)
        .map(|i| {
            let off: f64 = (0..a.cols).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
            off - a[(i, i)]
        })
        .fold(0.0_f64, f64::max);
    Ok(power_iteration(a, shift, tol, max_iter)? - shift)
}

/// Dominant eigenvalue of a symmetric positive semidefinite matrix, which is
/// also its largest one. No shift is applied.
pub fn largest_eigenvalue_psd(a: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    check_symmetric(a)?;
    power_iteration(a, 0.0, tol, max_iter)
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "eigenvalue of non-square {}x{} matrix",
            a.rows, a.cols
        )));
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigenvalue input".into()));
    }
    let scale = a.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if a.asymmetry() > 1e-9 * scale.max(1e-300) {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    Ok(())
}

/// Returns the Rayleigh quotient of `a + shift·I` at convergence.
///
/// Converged when the Rayleigh quotient changes by at most `tol` (relative)
/// and the residual `‖Bv − θv‖` is at most `tol · ‖B‖_F`. The residual bound
/// caps the eigenvalue error at `tol · ‖B‖_F` whatever the spectral gap.
fn power_iteration(a: &Matrix, shift: f64, tol: f64, max_iter: usize) -> Result<f64> {
    let n = a.rows;
    if n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let mut b = a.clone();
    b.add_diagonal(shift);
    let norm = b.frobenius_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    if n == 1 {
        return Ok(b[(0, 0)]);
    }
    // Deterministic start with components along every axis.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    normalize(&mut v);
    let mut theta = f64::NAN;
    for _ in 0..max_iter {
        let w = b.mat_vec(&v);
        let next_theta: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - next_theta * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let settled = (next_theta - theta).abs() <= tol * next_theta.abs().max(tol * norm);
        theta = next_theta;
        if settled && residual <= tol * norm {
            return Ok(theta);
        }
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            // v lies in the null space; every eigenvalue reachable from it is 0.
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        estimate: theta,
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}
