//! Small dense vectors and matrices.
//!
//! The problems handled here are tiny (a handful of inputs, at most a few
//! hundred states), so everything is a plain row-major `Vec` with no
//! blocking or SIMD.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default lower bound for Cholesky diagonal entries, in control units.
pub const DIAG_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    /// Builds a vector, rejecting non-finite components.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("component {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![T::zero(); dim])
    }

    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = T::one();
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        norm(&self.0)
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(values: Vec<T>) -> Self {
        Self(values)
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn all_finite<T: Scalar>(a: &[T]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[T]) {
        for (i, &v) in col.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Aᵀ y`
    pub fn tr_mul_vec(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, &yi) in y.iter().enumerate() {
            axpy(yi, self.row(i), &mut out);
        }
        out
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(a, other.row(k), dst);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix<T>, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::invalid("matrix shapes differ"));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    /// Solves `A X = B` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.rows;
        if self.cols != n || rhs.rows != n {
            return Err(Error::invalid("solve needs a square system"));
        }
        let m = rhs.cols;
        let mut a = self.clone();
        let mut b = rhs.clone();
        let scale = a.max_abs().max(T::min_positive_value());
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    a[(i, col)]
                        .abs()
                        .partial_cmp(&a[(j, col)].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(col);
            if a[(pivot, col)].abs() <= scale * T::epsilon() {
                return Err(Error::SingularMatrix(format!("zero pivot in column {col}")));
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(col * n + j, pivot * n + j);
                }
                for j in 0..m {
                    b.data.swap(col * m + j, pivot * m + j);
                }
            }
            let p = a[(col, col)];
            for i in col + 1..n {
                let f = a[(i, col)] / p;
                if f == T::zero() {
                    continue;
                }
                for j in col..n {
                    let v = a[(col, j)];
                    a[(i, j)] -= f * v;
                }
                for j in 0..m {
                    let v = b[(col, j)];
                    b[(i, j)] -= f * v;
                }
            }
        }
        for col in (0..n).rev() {
            let p = a[(col, col)];
            for j in 0..m {
                let mut acc = b[(col, j)];
                for k in col + 1..n {
                    acc -= a[(col, k)] * b[(k, j)];
                }
                b[(col, j)] = acc / p;
            }
        }
        Ok(b)
    }

    pub fn inverse(&self) -> Result<Matrix<T>> {
        self.solve(&Self::identity(self.rows))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: crate::scalar::cast_slice(&self.data),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Number of free entries in an `n x n` lower-triangular matrix.
pub const fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(i, j)`, `j <= i`, in row-major packed lower-triangular storage.
#[inline]
pub const fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Lower-triangular Cholesky factor `L` of a sampling covariance `L Lᵀ`.
///
/// Strictly-upper entries are zero and every diagonal entry is at least the
/// floor the factor was validated against.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor<T> {
    m: Matrix<T>,
}

impl<T: Scalar> CholeskyFactor<T> {
    /// Validates `m` as a Cholesky factor with diagonal `>= floor`.
    pub fn new(m: Matrix<T>, floor: T) -> Result<Self> {
        if m.rows() != m.cols() || m.rows() == 0 {
            return Err(Error::invalid("Cholesky factor must be square and non-empty"));
        }
        if !m.is_finite() {
            return Err(Error::invalid("Cholesky factor has non-finite entries"));
        }
        let n = m.rows();
        for i in 0..n {
            for j in i + 1..n {
                if m[(i, j)] != T::zero() {
                    return Err(Error::invalid(format!("entry ({i},{j}) above the diagonal is nonzero")));
                }
            }
            if !(m[(i, i)] >= floor) || m[(i, i)] <= T::zero() {
                return Err(Error::invalid(format!(
                    "diagonal entry {i} = {} is below the floor {floor}",
                    m[(i, i)]
                )));
            }
        }
        Ok(Self { m })
    }

    /// Accepts any lower-triangular matrix with a strictly positive diagonal.
    pub fn from_matrix(m: Matrix<T>) -> Result<Self> {
        Self::new(m, T::min_positive_value())
    }

    pub fn identity(n: usize) -> Self {
        Self { m: Matrix::identity(n) }
    }

    pub fn from_diag(diag: &[T]) -> Result<Self> {
        Self::from_matrix(Matrix::from_diag(diag))
    }

    /// Unpacks row-major lower-triangular storage.
    pub fn from_packed(n: usize, packed: &[T]) -> Result<Self> {
        if packed.len() != tri_len(n) {
            return Err(Error::invalid(format!(
                "packed factor of size {n} needs {} entries, got {}",
                tri_len(n),
                packed.len()
            )));
        }
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                m[(i, j)] = packed[tri_index(i, j)];
            }
        }
        Self::from_matrix(m)
    }

    /// Factors a symmetric positive-definite covariance, adding `jitter * I` first.
    pub fn factor(cov: &Matrix<T>, jitter: T) -> Result<Self> {
        let n = cov.rows();
        if cov.cols() != n {
            return Err(Error::invalid("covariance must be square"));
        }
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = cov[(i, j)];
                if i == j {
                    s += jitter;
                }
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if !(s > T::zero()) {
                        return Err(Error::SingularMatrix(format!(
                            "covariance is not positive definite at pivot {i}"
                        )));
                    }
                    l[(i, i)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Self::from_matrix(l)
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.m
    }

    pub fn packed(&self) -> Vec<T> {
        let n = self.dim();
        let mut out = Vec::with_capacity(tri_len(n));
        for i in 0..n {
            out.extend_from_slice(&self.m.row(i)[..=i]);
        }
        out
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.dim()).map(|i| self.m[(i, i)]).collect()
    }

    /// `L ε`, exploiting the triangular structure.
    pub fn mul_vec(&self, eps: &[T]) -> Vec<T> {
        let n = self.dim();
        (0..n).map(|i| dot(&self.m.row(i)[..=i], &eps[..=i])).collect()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[T]) -> Result<Vec<T>> {
        let n = self.dim();
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let d = self.m[(i, i)];
            if d == T::zero() {
                return Err(Error::SingularMatrix(format!("zero diagonal at {i}")));
            }
            let acc = b[i] - dot(&self.m.row(i)[..i], &y[..i]);
            y[i] = acc / d;
        }
        Ok(y)
    }

    /// `L⁻¹`, which is again lower triangular.
    pub fn inverse(&self) -> Result<Matrix<T>> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        for j in 0..n {
            let col = self.solve_lower(&Vector::<T>::basis(n, j))?;
            inv.set_column(j, &col);
        }
        if !inv.is_finite() {
            return Err(Error::SingularMatrix("inverse overflowed".into()));
        }
        Ok(inv)
    }

    /// `L Lᵀ`
    pub fn covariance(&self) -> Matrix<T> {
        let n = self.dim();
        let mut c = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(&self.m.row(i)[..=j], &self.m.row(j)[..=j]);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    }

    pub fn scaled(&self, s: T) -> Result<Self> {
        Self::from_matrix(self.m.scale(s))
    }

    pub fn cast<U: Scalar>(&self) -> CholeskyFactor<U> {
        CholeskyFactor { m: self.m.cast() }
    }
}

/// Projects a matrix onto lower-triangular support by zeroing strictly-upper entries.
pub fn lower_part<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in i + 1..m.cols() {
            out[(i, j)] = T::zero();
        }
    }
    out
}
