//! Dense row-major linear algebra for the closed-form solve path.
//!
//! Everything here is deliberately small: a `Matrix` carrier, the products
//! needed to form normal equations, and a Cholesky-based SPD solver. There is
//! no pivoting. Ridge regularization keeps the systems positive definite, and
//! a short jitter ladder covers round-off on the boundary.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter applied on the first retry, scaled by `trace(A)/n`.
pub const JITTER_BASE: f64 = 1e-10;
/// Number of jittered retries after the plain factorization fails.
pub const JITTER_ATTEMPTS: usize = 3;

/// Dense row-major matrix of `f64`.
///
/// Entries are finite on construction and after every operation returning a
/// `Matrix`.
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

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("data of length {}", data.len()),
            ));
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from a slice of equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row 0 of length {cols}"),
                    format!("row {i} of length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        let end = end.min(self.rows);
        let start = start.min(end);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::shape("vstack", self.dim_str(), other.dim_str()));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.dims() != other.dims() {
            return Err(Error::shape("sub", self.dim_str(), other.dim_str()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        let m = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        m.check_finite()?;
        Ok(m)
    }

    /// `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn relative_error(&self, reference: &Matrix) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let scale = reference.frobenius_norm();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    pub(crate) fn dim_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.dim_str(), b.dim_str()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in orow.iter_mut().zip(b.row(p)) {
                *o += aip * bpj;
            }
        }
    }
    out.check_finite()?;
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.dim_str(), b.dim_str()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            for (o, &brj) in out.row_mut(i).iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    out.check_finite()?;
    Ok(out)
}

/// `a + λ·I`; only the diagonal changes.
pub fn add_scaled_identity(a: &Matrix, lambda: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("add_scaled_identity", a.dim_str(), "square matrix"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param("lambda", format!("must be finite and >= 0, got {lambda}")));
    }
    let mut out = a.clone();
    for i in 0..a.rows {
        out.data[i * a.cols + i] += lambda;
    }
    out.check_finite()?;
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: Matrix,
    jitter_applied: f64,
}

impl CholeskyFactor {
    /// Factors a symmetric positive-definite matrix. Only the lower triangle
    /// of `a` is read.
    ///
    /// A non-positive pivot triggers retries with jitter
    /// `1e-10·trace(A)/n`, growing ×10 per attempt, up to three attempts.
    pub fn factor(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape("cholesky", a.dim_str(), "square matrix"));
        }
        let n = a.rows;
        let mut failing = match factor_lower(a, 0.0) {
            Ok(l) => {
                return Ok(Self {
                    l,
                    jitter_applied: 0.0,
                })
            }
            Err(pivot) => pivot,
        };
        let base = if n > 0 { JITTER_BASE * a.trace() / n as f64 } else { 0.0 };
        if base > 0.0 && base.is_finite() {
            let mut jitter = base;
            for _ in 0..JITTER_ATTEMPTS {
                match factor_lower(a, jitter) {
                    Ok(l) => {
                        return Ok(Self {
                            l,
                            jitter_applied: jitter,
                        })
                    }
                    Err(pivot) => failing = pivot,
                }
                jitter *= 10.0;
            }
        }
        Err(Error::NotPositiveDefinite {
            pivot: failing,
            attempts: JITTER_ATTEMPTS,
        })
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `L·Lᵀ·X = B` by forward then back substitution.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows != n {
            return Err(Error::shape("cholesky solve", self.l.dim_str(), b.dim_str()));
        }
        let l = &self.l;
        let mut x = b.clone();
        for c in 0..b.cols {
            // L y = b
            for i in 0..n {
                let mut s = x.get(i, c);
                for j in 0..i {
                    s -= l.get(i, j) * x.get(j, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
            // Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for j in i + 1..n {
                    s -= l.get(j, i) * x.get(j, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
        }
        x.check_finite()?;
        Ok(x)
    }
}

/// Column-oriented Cholesky on the lower triangle; returns the index of the
/// first non-positive pivot on failure.
fn factor_lower(a: &Matrix, jitter: f64) -> std::result::Result<Matrix, usize> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + jitter;
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(j);
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Solves `a·X = b` for symmetric positive-definite `a` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("solve_spd", a.dim_str(), "square matrix"));
    }
    if b.rows != a.rows {
        return Err(Error::shape("solve_spd", a.dim_str(), b.dim_str()));
    }
    CholeskyFactor::factor(a)?.solve(b)
}
