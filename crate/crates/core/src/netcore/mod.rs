//! The two halves of a partitioned right-hand side `du/dt = G(u) + J u`.
//!
//! `G` is anything implementing [`ExplicitTerm`]: usually an [`MlpModel`], which
//! carries the trainable parameters and hand-written vector-Jacobian products.
//! `J` is a fixed [`LinearOperator`], usually a circulant [`StencilOperator`].

mod mlp;
mod poly;
mod stencil;

use std::sync::atomic::{AtomicU64, Ordering};

pub use mlp::{init_weights, Activation, MlpModel, MODEL_MAGIC};
pub use poly::PolynomialTerm;
pub use stencil::{make_burgers_diffusion, make_ks_stencil, StencilOperator};

use crate::error::{check_dim, Result};
use crate::linalg::{DenseMatrix, LinearOperator};

/// A nonlinear, possibly parameterized, vector field evaluated on `d x m` blocks.
pub trait ExplicitTerm {
    fn dim(&self) -> usize;

    fn param_count(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn eval(&self, u: &DenseMatrix) -> Result<DenseMatrix>;

    /// `((∂G/∂u)ᵀ v, (∂G/∂p)ᵀ v)` with the parameter part summed over columns.
    fn vjp(&self, u: &DenseMatrix, v: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)>;
}

/// `G ≡ 0`, for purely linear problems.
#[derive(Clone, Copy, Debug)]
pub struct ZeroTerm {
    pub dim: usize,
}

impl ExplicitTerm for ZeroTerm {
    fn dim(&self) -> usize {
        self.dim
    }
    fn param_count(&self) -> usize {
        0
    }
    fn params(&self) -> &[f64] {
        &[]
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }
    fn eval(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("ZeroTerm", self.dim, u.rows())?;
        Ok(DenseMatrix::zeros(u.rows(), u.cols()))
    }
    fn vjp(&self, u: &DenseMatrix, _v: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
        check_dim("ZeroTerm", self.dim, u.rows())?;
        Ok((DenseMatrix::zeros(u.rows(), u.cols()), Vec::new()))
    }
}

static NEXT_OPERATOR_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_OPERATOR_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// The model `du/dt = G(u) + J u`.
///
/// `J` carries a process-unique version number. Factorization caches key on it,
/// so replacing `J` through [`PartitionedOde::set_linear`] invalidates old entries.
pub struct PartitionedOde<G = MlpModel> {
    g: G,
    j: Box<dyn LinearOperator + Send + Sync>,
    j_version: u64,
}

impl<G: ExplicitTerm> PartitionedOde<G> {
    pub fn new(g: G, j: impl LinearOperator + Send + Sync + 'static) -> Result<Self> {
        check_dim("PartitionedOde: G vs J dimension", g.dim(), j.dim())?;
        Ok(Self {
            g,
            j: Box::new(j),
            j_version: next_version(),
        })
    }

    pub fn dim(&self) -> usize {
        self.g.dim()
    }

    pub fn explicit(&self) -> &G {
        &self.g
    }

    pub fn explicit_mut(&mut self) -> &mut G {
        &mut self.g
    }

    pub fn linear(&self) -> &dyn LinearOperator {
        &*self.j
    }

    pub fn linear_version(&self) -> u64 {
        self.j_version
    }

    pub fn set_linear(&mut self, j: impl LinearOperator + Send + Sync + 'static) -> Result<()> {
        check_dim("PartitionedOde::set_linear", self.dim(), j.dim())?;
        self.j = Box::new(j);
        self.j_version = next_version();
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.g.param_count()
    }

    pub fn params(&self) -> &[f64] {
        self.g.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.g.params_mut()
    }

    pub fn eval_g(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        self.g.eval(u)
    }

    pub fn apply_j(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("apply J", self.dim(), u.rows())?;
        Ok(self.j.apply(u))
    }

    pub fn apply_jt(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("apply Jᵀ", self.dim(), u.rows())?;
        Ok(self.j.apply_transpose(u))
    }

    /// Full right-hand side `G(u) + J u`.
    pub fn rhs(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        let mut f = self.g.eval(u)?;
        f.axpy(1.0, &self.apply_j(u)?);
        Ok(f)
    }

    pub fn vjp_g(&self, u: &DenseMatrix, v: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
        self.g.vjp(u, v)
    }

    /// Parameter sensitivity of the linear part. `J` holds no trainable
    /// parameters, so this is always the zero vector.
    pub fn vjp_linear_params(&self, _u: &DenseMatrix, _v: &DenseMatrix) -> Vec<f64> {
        vec![0.0; self.param_count()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_check() {
        let g = MlpModel::relu_net(vec![8, 4, 8]).unwrap();
        let j = make_burgers_diffusion(9, 1.0, 1e-3).unwrap();
        assert!(PartitionedOde::new(g, j).is_err());
    }

    #[test]
    fn versions_are_unique() {
        let g = MlpModel::relu_net(vec![8, 4, 8]).unwrap();
        let mut ode = PartitionedOde::new(g, make_burgers_diffusion(8, 1.0, 1e-3).unwrap()).unwrap();
        let v0 = ode.linear_version();
        ode.set_linear(make_burgers_diffusion(8, 1.0, 2e-3).unwrap()).unwrap();
        assert_ne!(v0, ode.linear_version());
        assert!(ode.vjp_linear_params(&DenseMatrix::zeros(8, 1), &DenseMatrix::zeros(8, 1)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rhs_adds_both_parts() {
        let ode = PartitionedOde::new(ZeroTerm { dim: 6 }, make_burgers_diffusion(6, 1.0, 0.1).unwrap()).unwrap();
        let u = DenseMatrix::from_fn(6, 2, |i, j| (i * 3 + j) as f64);
        assert_eq!(ode.rhs(&u).unwrap(), ode.apply_j(&u).unwrap());
    }
}
