//! Row-major dense matrix used by the SVD and projection code.

use std::fmt;

use crate::scalar::{sum_sq, KahanSum, Real};

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
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

    /// Wrap a row-major buffer. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "buffer of {} elements cannot be a {rows}x{cols} matrix",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[T]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

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

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[T]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.cols,
            rhs.rows,
            "matmul shape mismatch: {:?} x {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.rows,
            rhs.rows,
            "t_matmul shape mismatch: {:?}ᵀ x {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let rhs_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// `self * x` for a vector `x` of length `cols`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect()
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape());
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        Self::from_vec(self.rows, self.cols, data)
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape());
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect();
        Self::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|&a| a * s).collect())
    }

    /// Squared Frobenius norm, compensated.
    pub fn frob_sq(&self) -> T {
        sum_sq(&self.data)
    }

    pub fn frob_norm(&self) -> T {
        self.frob_sq().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Keep the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        assert!(k <= self.cols);
        Self::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    /// `‖selfᵀself − I‖_max`, the orthonormality defect of the columns.
    pub fn orthonormality_defect(&self) -> T {
        let g = self.t_matmul(self);
        let mut worst = T::zero();
        for i in 0..g.rows {
            for j in 0..g.cols {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

impl<T: Copy> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T: Copy> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

/// Orthonormalize the columns of `q` in place with two passes of modified
/// Gram–Schmidt.
///
/// Columns that are numerically dependent on their predecessors are replaced
/// by a unit vector orthogonal to every earlier column, so the result always
/// has orthonormal columns (requires `cols <= rows`).
pub fn orthonormalize_columns<T: Real>(q: &mut Matrix<T>) {
    let (m, n) = q.shape();
    assert!(n <= m, "cannot orthonormalize {n} columns in R^{m}");
    let tiny = T::epsilon() * T::of(16.0);
    let mut next_basis = 0usize;
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| q.column(j)).collect();
    for j in 0..n {
        let original = sum_sq(&cols[j]).sqrt();
        let (done, rest) = cols.split_at_mut(j);
        let v = &mut rest[0];
        for _ in 0..2 {
            for u in done.iter() {
                project_out(v, u);
            }
        }
        let mut norm = sum_sq(v).sqrt();
        if !(norm > tiny * original.max(T::min_positive_value())) || norm == T::zero() {
            // Dependent column: substitute the first canonical basis vector
            // that still has a component outside the span so far.
            loop {
                assert!(next_basis < m, "ran out of basis vectors");
                let mut e = vec![T::zero(); m];
                e[next_basis] = T::one();
                next_basis += 1;
                for _ in 0..2 {
                    for u in done.iter() {
                        project_out(&mut e, u);
                    }
                }
                let en = sum_sq(&e).sqrt();
                if en > T::of(0.5) / T::of(m as f64).sqrt() {
                    *v = e;
                    norm = en;
                    break;
                }
            }
        }
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    for (j, c) in cols.iter().enumerate() {
        q.set_column(j, c);
    }
}

fn project_out<T: Real>(v: &mut [T], u: &[T]) {
    let c = v.iter().zip(u).map(|(&a, &b)| a * b).collect::<KahanSum<T>>().value();
    for (x, &b) in v.iter_mut().zip(u) {
        *x = *x - c * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_transpose_agree() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let ab = a.matmul(&b);
        assert_eq!(ab, Matrix::from_rows(&[&[4.0, 5.0], &[10.0, 11.0]]));
        assert_eq!(a.transpose().t_matmul(&b), ab);
    }

    #[test]
    fn orthonormalize_completes_dependent_columns() {
        let mut q = Matrix::from_rows(&[&[1.0, 2.0, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        orthonormalize_columns(&mut q);
        assert!(q.orthonormality_defect() < 1e-14);
        assert_eq!(q.column(0), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn orthonormalize_zero_matrix() {
        let mut q = Matrix::<f64>::zeros(4, 3);
        orthonormalize_columns(&mut q);
        assert!(q.orthonormality_defect() < 1e-14);
    }
}
