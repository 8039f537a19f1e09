use super::{DenseMatrix, LinearOperator, SolverConfig};
use crate::error::{check_dim, Error, Result};

/// Result of one GMRES solve.
#[derive(Clone, Debug)]
pub struct GmresOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual `‖b - A x‖ / ‖b‖` of the returned iterate.
    pub residual: f64,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn apply(op: &dyn LinearOperator, v: &[f64]) -> Vec<f64> {
    op.apply(&DenseMatrix::column_vector(v.to_vec())).into_data()
}

/// Restarted GMRES from a zero initial guess.
///
/// Always returns the best iterate found; `converged` tells whether it meets
/// `cfg.krylov_tol`. Iterations count operator applications inside the Arnoldi
/// process (the true-residual check at each restart is not counted).
pub fn gmres_best(op: &dyn LinearOperator, b: &[f64], cfg: &SolverConfig) -> Result<GmresOutcome> {
    check_dim("gmres", op.dim(), b.len())?;
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(GmresOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            converged: true,
        });
    }
    let restart = cfg.restart.max(1);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut beta = bnorm;
    let mut iterations = 0;
    let mut best = (x.clone(), 1.0);

    while iterations < cfg.krylov_maxit {
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        // Hessenberg columns after rotation, stored column-wise.
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(restart);
        let mut cs: Vec<f64> = Vec::with_capacity(restart);
        let mut sn: Vec<f64> = Vec::with_capacity(restart);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k = 0;
        while k < restart && iterations < cfg.krylov_maxit {
            let mut w = apply(op, &basis[k]);
            iterations += 1;
            let wnorm = norm(&w);
            let mut col = vec![0.0; k + 2];
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(&w, v);
                col[i] = hij;
                w.iter_mut().zip(v).for_each(|(a, b)| *a -= hij * b);
            }
            let hnext = norm(&w);
            col[k + 1] = hnext;
            for i in 0..k {
                let t = cs[i] * col[i] + sn[i] * col[i + 1];
                col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
                col[i] = t;
            }
            let rho = col[k].hypot(col[k + 1]);
            let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (col[k] / rho, col[k + 1] / rho) };
            col[k] = rho;
            col[k + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g[k + 1] = -s * g[k];
            g[k] *= c;
            h.push(col);
            k += 1;
            let breakdown = hnext <= 1e-14 * wnorm;
            if g[k].abs() / bnorm <= cfg.krylov_tol || breakdown {
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| h[j][i] * y[j]).sum();
            y[i] = if h[i][i] == 0.0 { 0.0 } else { (g[i] - s) / h[i][i] };
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&basis[j]).for_each(|(a, v)| *a += yj * v);
        }
        let ax = apply(op, &x);
        r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        beta = norm(&r);
        let rel = beta / bnorm;
        if !rel.is_finite() {
            break;
        }
        if rel < best.1 {
            best = (x.clone(), rel);
        }
        if rel <= cfg.krylov_tol {
            return Ok(GmresOutcome {
                x,
                iterations,
                residual: rel,
                converged: true,
            });
        }
    }
    Ok(GmresOutcome {
        x: best.0,
        iterations,
        residual: best.1,
        converged: false,
    })
}

/// GMRES that fails when the tolerance is not reached within `krylov_maxit`.
pub fn gmres(op: &dyn LinearOperator, b: &[f64], cfg: &SolverConfig) -> Result<GmresOutcome> {
    let out = gmres_best(op, b, cfg)?;
    if out.converged {
        Ok(out)
    } else {
        Err(Error::KrylovNoConvergence {
            iterations: out.iterations,
            best_residual: out.residual,
        })
    }
}

/// Solves `op X = B` column by column. Returns the solution and the total number
/// of Krylov iterations.
pub fn gmres_solve(op: &dyn LinearOperator, b: &DenseMatrix, cfg: &SolverConfig) -> Result<(DenseMatrix, usize)> {
    check_dim("gmres_solve", op.dim(), b.rows())?;
    let mut x = DenseMatrix::zeros(b.rows(), b.cols());
    let mut total = 0;
    for c in 0..b.cols() {
        let out = gmres(op, &b.column(c), cfg)?;
        total += out.iterations;
        x.set_column(c, &out.x);
    }
    Ok((x, total))
}
