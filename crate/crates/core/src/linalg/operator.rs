use super::DenseMatrix;

/// A square linear map acting on `dim x m` blocks, column by column.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    /// `M x` for every column of `x`.
    fn apply(&self, x: &DenseMatrix) -> DenseMatrix;

    /// `Mᵀ x` for every column of `x`.
    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix;

    /// Materialized matrix, when the operator has one.
    fn to_dense(&self) -> Option<DenseMatrix> {
        None
    }

    fn is_symmetric(&self) -> bool {
        false
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        (**self).apply(x)
    }
    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix {
        (**self).apply_transpose(x)
    }
    fn to_dense(&self) -> Option<DenseMatrix> {
        (**self).to_dense()
    }
    fn is_symmetric(&self) -> bool {
        (**self).is_symmetric()
    }
}

/// An explicit matrix.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    matrix: DenseMatrix,
    symmetric: bool,
}

impl DenseOperator {
    /// Panics if `matrix` is not square.
    pub fn new(matrix: DenseMatrix) -> Self {
        assert_eq!(matrix.rows(), matrix.cols(), "operator matrix must be square");
        let n = matrix.rows();
        let symmetric = (0..n).all(|i| (0..i).all(|j| matrix.get(i, j) == matrix.get(j, i)));
        Self { matrix, symmetric }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut y = DenseMatrix::zeros(self.matrix.rows(), x.cols());
        super::dense::gemm(1.0, &self.matrix, false, x, false, 0.0, &mut y);
        y
    }

    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut y = DenseMatrix::zeros(self.matrix.cols(), x.cols());
        super::dense::gemm(1.0, &self.matrix, true, x, false, 0.0, &mut y);
        y
    }

    fn to_dense(&self) -> Option<DenseMatrix> {
        Some(self.matrix.clone())
    }

    fn is_symmetric(&self) -> bool {
        self.symmetric
    }
}

/// Matrix-free operator defined by a pair of closures.
pub struct FnOperator<F, T> {
    dim: usize,
    forward: F,
    transpose: T,
}

impl<F, T> FnOperator<F, T>
where
    F: Fn(&DenseMatrix) -> DenseMatrix,
    T: Fn(&DenseMatrix) -> DenseMatrix,
{
    pub fn new(dim: usize, forward: F, transpose: T) -> Self {
        Self {
            dim,
            forward,
            transpose,
        }
    }
}

impl<F, T> LinearOperator for FnOperator<F, T>
where
    F: Fn(&DenseMatrix) -> DenseMatrix,
    T: Fn(&DenseMatrix) -> DenseMatrix,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        (self.forward)(x)
    }
    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix {
        (self.transpose)(x)
    }
}

/// `I - alpha * J`, or `I - alpha * Jᵀ` when `transposed` is set.
pub struct ShiftedOperator<'a> {
    inner: &'a dyn LinearOperator,
    alpha: f64,
    transposed: bool,
}

impl<'a> ShiftedOperator<'a> {
    pub fn new(inner: &'a dyn LinearOperator, alpha: f64, transposed: bool) -> Self {
        Self {
            inner,
            alpha,
            transposed,
        }
    }

    fn shift(&self, x: &DenseMatrix, transpose: bool) -> DenseMatrix {
        let mut y = if transpose {
            self.inner.apply_transpose(x)
        } else {
            self.inner.apply(x)
        };
        y.scale(-self.alpha);
        y.axpy(1.0, x);
        y
    }
}

impl LinearOperator for ShiftedOperator<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        self.shift(x, self.transposed)
    }

    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix {
        self.shift(x, !self.transposed)
    }

    fn to_dense(&self) -> Option<DenseMatrix> {
        let j = self.inner.to_dense()?;
        let j = if self.transposed { j.transpose() } else { j };
        let n = j.rows();
        Some(DenseMatrix::from_fn(n, n, |r, c| {
            let delta = if r == c { 1.0 } else { 0.0 };
            delta - self.alpha * j.get(r, c)
        }))
    }

    fn is_symmetric(&self) -> bool {
        self.inner.is_symmetric()
    }
}
