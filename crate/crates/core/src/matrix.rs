use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
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

    /// Builds from nested rows. Returns `None` when rows are ragged.
    pub fn from_rows(rows: &[Vec<T>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows).map(|i| self.row(i).iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Frobenius inner product `sum_ij a_ij * b_ij`.
    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` if a pivot falls below `1e-300` in magnitude (singular system).
pub(crate) fn solve_dense<T: Scalar>(mut a: Matrix<T>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = a.rows();
    debug_assert!(a.is_square() && b.len() == n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| {
            a[(x, col)].abs().partial_cmp(&a[(y, col)].abs()).unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[(pivot, col)].abs() <= T::min_positive_value() {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                let tmp = a[(col, k)];
                a[(col, k)] = a[(pivot, k)];
                a[(pivot, k)] = tmp;
            }
            b.swap(col, pivot);
        }
        let diag = a[(col, col)];
        for r in col + 1..n {
            let factor = a[(r, col)] / diag;
            if factor == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[(col, k)];
                a[(r, k)] -= factor * v;
            }
            let bv = b[col];
            b[r] -= factor * bv;
        }
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for k in i + 1..n {
            acc -= a[(i, k)] * x[k];
        }
        x[i] = acc / a[(i, i)];
    }
    Some(x)
}
