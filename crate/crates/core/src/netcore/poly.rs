use super::ExplicitTerm;
use crate::error::{check_dim, Result};
use crate::linalg::DenseMatrix;

/// Small parameterized nonlinearity on a periodic lattice:
///
/// `G(u)_i = p0 u_i + p1 u_i² + p2 u_i³ + p3 u_{i-1} u_{i+1}`.
///
/// Cheap, smooth and with exact VJPs, which makes it a convenient stand-in for a
/// network in convergence studies and gradient checks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialTerm {
    dim: usize,
    coeffs: [f64; 4],
}

impl PolynomialTerm {
    pub fn new(dim: usize, coeffs: [f64; 4]) -> Self {
        Self { dim, coeffs }
    }

    fn neighbours(&self, i: usize) -> (usize, usize) {
        let d = self.dim;
        ((i + d - 1) % d, (i + 1) % d)
    }
}

impl ExplicitTerm for PolynomialTerm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn param_count(&self) -> usize {
        4
    }

    fn params(&self) -> &[f64] {
        &self.coeffs
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    fn eval(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("PolynomialTerm", self.dim, u.rows())?;
        let [p0, p1, p2, p3] = self.coeffs;
        let mut g = DenseMatrix::zeros(self.dim, u.cols());
        for i in 0..self.dim {
            let (l, r) = self.neighbours(i);
            for k in 0..u.cols() {
                let x = u.get(i, k);
                let val = p0 * x + p1 * x * x + p2 * x * x * x + p3 * u.get(l, k) * u.get(r, k);
                g.set(i, k, val);
            }
        }
        Ok(g)
    }

    fn vjp(&self, u: &DenseMatrix, v: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
        check_dim("PolynomialTerm vjp", self.dim, u.rows())?;
        u.same_shape(v, "PolynomialTerm vjp")?;
        let [p0, p1, p2, p3] = self.coeffs;
        let mut du = DenseMatrix::zeros(self.dim, u.cols());
        let mut dp = vec![0.0; 4];
        for i in 0..self.dim {
            let (l, r) = self.neighbours(i);
            for k in 0..u.cols() {
                let x = u.get(i, k);
                let w = v.get(i, k);
                let (ul, ur) = (u.get(l, k), u.get(r, k));
                du.set(i, k, du.get(i, k) + w * (p0 + 2.0 * p1 * x + 3.0 * p2 * x * x));
                du.set(l, k, du.get(l, k) + w * p3 * ur);
                du.set(r, k, du.get(r, k) + w * p3 * ul);
                dp[0] += w * x;
                dp[1] += w * x * x;
                dp[2] += w * x * x * x;
                dp[3] += w * ul * ur;
            }
        }
        Ok((du, dp))
    }
}
