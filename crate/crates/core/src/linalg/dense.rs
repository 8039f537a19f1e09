use std::fmt;

use crate::error::{check_dim, Error, Result};

/// Row-major dense matrix of doubles.
///
/// Batched states are stored as `d x m` blocks: one column per mini-batch member,
/// so a row holds one spatial point across the whole batch.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{}) ", self.rows, self.cols)?;
        let mut list = f.debug_list();
        for i in 0..self.rows.min(8) {
            list.entry(&self.row(i));
        }
        list.finish()
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("DenseMatrix::new", rows * cols, data.len())?;
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
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// A single column vector.
    pub fn column_vector(v: Vec<f64>) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v,
        }
    }

    /// Stacks equally long vectors as the columns of a matrix.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, |c| c.len());
        for c in columns {
            check_dim("DenseMatrix::from_columns", rows, c.len())?;
        }
        Ok(Self::from_fn(rows, cols, |i, j| columns[j][i]))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (i, &x) in v.iter().enumerate() {
            self.set(i, j, x);
        }
    }

    /// Selects a subset of columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |i, k| self.get(i, idx[k]))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        check_dim(context, self.rows, other.rows)?;
        check_dim(context, self.cols, other.cols)
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: f64, x: &Self) {
        debug_assert_eq!(self.shape(), x.shape());
        if alpha == 0.0 {
            return;
        }
        for (y, &v) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_dim("matmul", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("matvec", self.cols, x.len())?;
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{what} has non-finite entries")))
        }
    }
}

/// Borrowed row-major matrix, optionally read as its transpose.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape and (row, column) strides.
    fn layout(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

impl<'a> From<&'a DenseMatrix> for MatRef<'a> {
    fn from(m: &'a DenseMatrix) -> Self {
        MatRef::new(&m.data, m.rows, m.cols)
    }
}

/// `c = alpha * a * b + beta * c` on a row-major `c` of shape `c_rows x c_cols`.
pub(crate) fn gemm_into(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], c_rows: usize, c_cols: usize) {
    let (m, k, rsa, csa) = a.layout();
    let (kb, n, rsb, csb) = b.layout();
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!((c_rows, c_cols), (m, n), "gemm output shape");
    assert_eq!(c.len(), m * n, "gemm output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the pointers cover `a`, `b` and `c` exactly, with strides derived
    // from the row-major layouts checked above; `c` is a unique borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, with `op` an optional transpose.
pub(crate) fn gemm(
    alpha: f64,
    a: &DenseMatrix,
    transpose_a: bool,
    b: &DenseMatrix,
    transpose_b: bool,
    beta: f64,
    c: &mut DenseMatrix,
) {
    let ar = if transpose_a { MatRef::from(a).t() } else { MatRef::from(a) };
    let br = if transpose_b { MatRef::from(b).t() } else { MatRef::from(b) };
    let (rows, cols) = (c.rows, c.cols);
    gemm_into(alpha, ar, br, beta, &mut c.data, rows, cols);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_match_naive() {
        let a = DenseMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = DenseMatrix::from_fn(3, 2, |i, j| (i as f64 - j as f64) * 1.5);
        let mut c = DenseMatrix::zeros(4, 2);
        gemm_into(1.0, MatRef::from(&a).t(), MatRef::from(&b), 0.0, c.data_mut(), 4, 2);
        let naive = a.transpose().matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|k| a.get(k, i) * b.get(k, j)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-14);
                assert!((naive.get(i, j) - want).abs() < 1e-14);
            }
        }
        let mut d = DenseMatrix::zeros(3, 3);
        gemm_into(1.0, MatRef::from(&a), MatRef::from(&a).t(), 0.0, d.data_mut(), 3, 3);
        assert!((d.get(1, 2) - a.row(1).iter().zip(a.row(2)).map(|(x, y)| x * y).sum::<f64>()).abs() < 1e-13);
    }

    #[test]
    fn shape_errors() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        let a = DenseMatrix::zeros(2, 3);
        assert!(a.matmul(&DenseMatrix::zeros(2, 3)).is_err());
    }
}
