//! Linear algebra for the implicit stages.
//!
//! Every implicit stage solves `(I - alpha J) X = B` where `alpha = dt * ã_ii` and
//! the columns of `B` are the mini-batch members. With a direct solver the LU
//! factors depend only on `(J, alpha)`, so a [`FactorizationCache`] keyed on the
//! operator version and the shift serves every stage, step and batch until `J`
//! changes.

mod dense;
mod gmres;
mod lu;
mod operator;

use std::collections::HashMap;
use std::sync::Arc;

pub use dense::DenseMatrix;
pub(crate) use dense::{gemm_into, MatRef};
pub use gmres::{gmres, gmres_best, gmres_solve, GmresOutcome};
pub use lu::{lu_factor, lu_factor_matrix, lu_solve, LuFactorization};
pub use operator::{DenseOperator, FnOperator, LinearOperator, ShiftedOperator};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Direct,
    Krylov,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Relative residual target for GMRES.
    pub krylov_tol: f64,
    pub krylov_maxit: usize,
    pub restart: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::Direct,
            krylov_tol: 1e-10,
            krylov_maxit: 200,
            restart: 30,
        }
    }
}

impl SolverConfig {
    pub fn krylov() -> Self {
        Self {
            kind: SolverKind::Krylov,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.krylov_tol > 0.0) || self.krylov_maxit == 0 || self.restart == 0 {
            return Err(Error::InvalidArgument(format!(
                "solver needs tol > 0, maxit >= 1 and restart >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    version: u64,
    alpha_bits: u64,
    transposed: bool,
}

/// LU factorizations of shifted operators, keyed by `(J version, alpha, transposed)`.
///
/// Callers bump the version whenever the entries of `J` change. For a symmetric `J`
/// transposed requests share the forward entry.
#[derive(Debug, Default)]
pub struct FactorizationCache {
    entries: HashMap<CacheKey, Arc<LuFactorization>>,
    factorizations: usize,
}

impl FactorizationCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of factorizations computed since construction.
    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops all entries; the counter keeps running.
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Returns the factorization of `I - alpha J` (or of `I - alpha Jᵀ`), computing
    /// and inserting it on a miss.
    pub fn get(
        &mut self,
        j: &dyn LinearOperator,
        version: u64,
        alpha: f64,
        transposed: bool,
    ) -> Result<Arc<LuFactorization>> {
        let key = CacheKey {
            version,
            alpha_bits: alpha.to_bits(),
            transposed: transposed && !j.is_symmetric(),
        };
        if let Some(f) = self.entries.get(&key) {
            return Ok(Arc::clone(f));
        }
        let dense = j.to_dense().ok_or(Error::NotMaterialized)?;
        let dense = if key.transposed { dense.transpose() } else { dense };
        let f = Arc::new(lu_factor(&dense, alpha)?);
        self.factorizations += 1;
        self.entries.insert(key, Arc::clone(&f));
        Ok(f)
    }
}

/// Solves `(I - alpha J) X = B`, or the transposed system, with the configured
/// solver. Returns the solution and the number of Krylov iterations spent.
pub fn solve_shifted(
    j: &dyn LinearOperator,
    version: u64,
    alpha: f64,
    transposed: bool,
    rhs: &DenseMatrix,
    cfg: &SolverConfig,
    cache: &mut FactorizationCache,
) -> Result<(DenseMatrix, usize)> {
    check_dim("solve_shifted", j.dim(), rhs.rows())?;
    match cfg.kind {
        SolverKind::Direct => {
            let f = cache.get(j, version, alpha, transposed)?;
            Ok((lu_solve(&f, rhs)?, 0))
        }
        SolverKind::Krylov => {
            let op = ShiftedOperator::new(j, alpha, transposed);
            gmres_solve(&op, rhs, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gmres_identity_one_iteration() {
        let op = DenseOperator::new(DenseMatrix::identity(5));
        let b = random(5, 3, 1);
        let mut total = 0;
        for c in 0..3 {
            let out = gmres(&op, &b.column(c), &SolverConfig::krylov()).unwrap();
            assert_eq!(out.iterations, 1);
            total += out.iterations;
            for (x, y) in out.x.iter().zip(b.column(c)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert_eq!(total, 3);
    }

    #[test]
    fn gmres_scalar_shift() {
        let j = DenseOperator::new(DenseMatrix::identity(4).scaled(-1.0));
        let op = ShiftedOperator::new(&j, 1.0, false);
        let b = random(4, 2, 2);
        let (x, _) = gmres_solve(&op, &b, &SolverConfig::krylov()).unwrap();
        for (xv, bv) in x.data().iter().zip(b.data()) {
            assert!((xv - bv / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gmres_matches_lu_on_random_system() {
        let n = 32;
        let j = random(n, n, 3).scaled(1.0 / (n as f64).sqrt());
        let alpha = 0.3;
        let b = random(n, 4, 4);
        let op_j = DenseOperator::new(j.clone());
        let op = ShiftedOperator::new(&op_j, alpha, false);
        let cfg = SolverConfig {
            restart: 40,
            ..SolverConfig::krylov()
        };
        let (xk, _) = gmres_solve(&op, &b, &cfg).unwrap();
        let xd = lu_solve(&lu_factor(&j, alpha).unwrap(), &b).unwrap();
        let mut diff = xk.clone();
        diff.axpy(-1.0, &xd);
        assert!(diff.norm() / xd.norm() < 1e-8);
    }

    #[test]
    fn gmres_reports_nonconvergence_with_best_residual() {
        // A rotation has no useful Krylov progress with a single-vector restart.
        let m = DenseMatrix::new(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let op = DenseOperator::new(m);
        let cfg = SolverConfig {
            krylov_maxit: 5,
            restart: 1,
            ..SolverConfig::krylov()
        };
        match gmres(&op, &[1.0, 0.0], &cfg) {
            Err(Error::KrylovNoConvergence {
                iterations,
                best_residual,
            }) => {
                assert_eq!(iterations, 5);
                assert!((best_residual - 1.0).abs() < 1e-12);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn gmres_zero_rhs() {
        let op = DenseOperator::new(random(3, 3, 5));
        let out = gmres(&op, &[0.0; 3], &SolverConfig::krylov()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, vec![0.0; 3]);
    }

    #[test]
    fn cache_counts_distinct_keys() {
        let j = DenseOperator::new(random(6, 6, 6));
        let mut cache = FactorizationCache::new();
        for _ in 0..10 {
            cache.get(&j, 0, 0.25, false).unwrap();
        }
        assert_eq!(cache.factorizations(), 1);
        cache.get(&j, 0, 0.5, false).unwrap();
        cache.get(&j, 1, 0.25, false).unwrap();
        cache.get(&j, 1, 0.25, true).unwrap();
        assert_eq!(cache.factorizations(), 4);
        assert_eq!(cache.len(), 4);
    }

    #[test]
    fn symmetric_operator_shares_transposed_entry() {
        let a = random(5, 5, 7);
        let mut s = a.clone();
        s.axpy(1.0, &a.transpose());
        let j = DenseOperator::new(s);
        assert!(j.is_symmetric());
        let mut cache = FactorizationCache::new();
        cache.get(&j, 0, 0.1, false).unwrap();
        cache.get(&j, 0, 0.1, true).unwrap();
        assert_eq!(cache.factorizations(), 1);
    }

    #[test]
    fn transposed_direct_solve_matches_krylov() {
        let j = DenseOperator::new(random(10, 10, 8).scaled(0.3));
        let b = random(10, 2, 9);
        let mut cache = FactorizationCache::new();
        let (xd, _) = solve_shifted(&j, 0, 0.4, true, &b, &SolverConfig::default(), &mut cache).unwrap();
        let (xk, iters) = solve_shifted(&j, 0, 0.4, true, &b, &SolverConfig::krylov(), &mut cache).unwrap();
        assert!(iters > 0);
        let mut d = xd.clone();
        d.axpy(-1.0, &xk);
        assert!(d.norm() / xd.norm() < 1e-9);
        // Residual against the explicit transpose.
        let jt = j.matrix().transpose();
        let mut r = xd.clone();
        r.axpy(-0.4, &jt.matmul(&xd).unwrap());
        r.axpy(-1.0, &b);
        assert!(r.norm() / b.norm() < 1e-12);
    }

    #[test]
    fn matrix_free_direct_solve_is_rejected() {
        let op = FnOperator::new(3, |x: &DenseMatrix| x.clone(), |x: &DenseMatrix| x.clone());
        let mut cache = FactorizationCache::new();
        let err = solve_shifted(&op, 0, 0.1, false, &DenseMatrix::zeros(3, 1), &SolverConfig::default(), &mut cache);
        assert!(matches!(err, Err(Error::NotMaterialized)));
    }
}
