use super::DenseMatrix;
use crate::error::{check_dim, Error, Result};

/// LU factors of the shifted matrix `I - alpha * J`, with row pivoting.
///
/// Exact zeros in the factors are skipped during solves, so banded and circulant
/// operators solve in time proportional to the fill rather than to `d^2`.
#[derive(Clone, Debug)]
pub struct LuFactorization {
    dim: usize,
    alpha: f64,
    /// `perm[i]` is the original row placed at position `i`.
    perm: Vec<usize>,
    lower: Vec<Vec<(usize, f64)>>,
    upper: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

impl LuFactorization {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn pivots(&self) -> &[usize] {
        &self.perm
    }

    /// Number of stored off-diagonal entries of `L` and `U`.
    pub fn fill(&self) -> usize {
        self.lower.iter().chain(&self.upper).map(Vec::len).sum()
    }
}

/// Factors `I - alpha * j` with partial pivoting.
pub fn lu_factor(j: &DenseMatrix, alpha: f64) -> Result<LuFactorization> {
    check_dim("lu_factor (square)", j.rows(), j.cols())?;
    let n = j.rows();
    let mut a: Vec<f64> = j.data().iter().map(|v| -alpha * v).collect();
    for i in 0..n {
        a[i * n + i] += 1.0;
    }
    factor_in_place(n, a, alpha)
}

/// Factors an already-assembled square matrix.
pub fn lu_factor_matrix(m: &DenseMatrix) -> Result<LuFactorization> {
    check_dim("lu_factor_matrix (square)", m.rows(), m.cols())?;
    factor_in_place(m.rows(), m.data().to_vec(), 0.0)
}

fn factor_in_place(n: usize, mut a: Vec<f64>, alpha: f64) -> Result<LuFactorization> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tiny = scale * f64::EPSILON * n.max(1) as f64;
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (p, pmax) = (k..n)
            .map(|i| (i, a[i * n + k].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pmax > tiny) {
            return Err(Error::SingularPivot { column: k });
        }
        if p != k {
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
            perm.swap(k, p);
        }
        let pivot = a[k * n + k];
        let (top, bottom) = a.split_at_mut((k + 1) * n);
        let krow = &top[k * n..];
        for i in 0..n - k - 1 {
            let row = &mut bottom[i * n..(i + 1) * n];
            if row[k] == 0.0 {
                continue;
            }
            let l = row[k] / pivot;
            row[k] = l;
            for c in k + 1..n {
                row[c] -= l * krow[c];
            }
        }
    }
    let mut lower = vec![Vec::new(); n];
    let mut upper = vec![Vec::new(); n];
    let mut diag = vec![0.0; n];
    for i in 0..n {
        for c in 0..n {
            let v = a[i * n + c];
            if v == 0.0 {
                continue;
            }
            match c.cmp(&i) {
                std::cmp::Ordering::Less => lower[i].push((c, v)),
                std::cmp::Ordering::Equal => diag[i] = v,
                std::cmp::Ordering::Greater => upper[i].push((c, v)),
            }
        }
    }
    Ok(LuFactorization {
        dim: n,
        alpha,
        perm,
        lower,
        upper,
        diag,
    })
}

/// Solves `(I - alpha J) X = B` for all columns of `B` at once.
///
/// Each column sees exactly the same sequence of floating-point operations as a
/// single-column solve would, so results do not depend on the batch width.
pub fn lu_solve(f: &LuFactorization, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_dim("lu_solve", f.dim, b.rows())?;
    let n = f.dim;
    let m = b.cols();
    let mut x = DenseMatrix::zeros(n, m);
    for (i, &p) in f.perm.iter().enumerate() {
        x.row_mut(i).copy_from_slice(b.row(p));
    }
    let data = x.data_mut();
    for i in 0..n {
        let (done, rest) = data.split_at_mut(i * m);
        let xi = &mut rest[..m];
        for &(k, l) in &f.lower[i] {
            let xk = &done[k * m..(k + 1) * m];
            for (t, s) in xi.iter_mut().zip(xk) {
                *t -= l * s;
            }
        }
    }
    for i in (0..n).rev() {
        let (head, tail) = data.split_at_mut((i + 1) * m);
        let xi = &mut head[i * m..];
        for &(k, u) in &f.upper[i] {
            let xk = &tail[(k - i - 1) * m..(k - i) * m];
            for (t, s) in xi.iter_mut().zip(xk) {
                *t -= u * s;
            }
        }
        let d = f.diag[i];
        xi.iter_mut().for_each(|t| *t /= d);
    }
    Ok(x)
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

    fn shifted(j: &DenseMatrix, alpha: f64) -> DenseMatrix {
        let n = j.rows();
        DenseMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 } - alpha * j.get(r, c))
    }

    fn rel_residual(j: &DenseMatrix, alpha: f64, x: &DenseMatrix, b: &DenseMatrix) -> f64 {
        let mut r = shifted(j, alpha).matmul(x).unwrap();
        r.axpy(-1.0, b);
        r.norm() / b.norm()
    }

    #[test]
    fn zero_operator_is_identity() {
        let f = lu_factor(&DenseMatrix::zeros(3, 3), 0.5).unwrap();
        let b = random(3, 2, 1);
        assert_eq!(lu_solve(&f, &b).unwrap(), b);
    }

    #[test]
    fn negative_identity_scales() {
        let j = DenseMatrix::identity(4).scaled(-1.0);
        let f = lu_factor(&j, 0.5).unwrap();
        let b = random(4, 3, 2);
        let x = lu_solve(&f, &b).unwrap();
        for (xv, bv) in x.data().iter().zip(b.data()) {
            assert!((xv - bv / 1.5).abs() < 1e-15);
        }
    }

    #[test]
    fn random_residual() {
        let j = random(8, 8, 3);
        let f = lu_factor(&j, 0.2).unwrap();
        let b = random(8, 1, 4);
        let x = lu_solve(&f, &b).unwrap();
        assert!(rel_residual(&j, 0.2, &x, &b) < 1e-10);
    }

    #[test]
    fn multi_rhs_matches_column_solves_bitwise() {
        let j = random(12, 12, 5);
        let f = lu_factor(&j, 0.3).unwrap();
        let b = random(12, 16, 6);
        let x = lu_solve(&f, &b).unwrap();
        for c in 0..16 {
            let single = lu_solve(&f, &DenseMatrix::column_vector(b.column(c))).unwrap();
            assert_eq!(single.column(0), x.column(c));
        }
    }

    #[test]
    fn replicated_columns_give_identical_solutions() {
        let j = random(6, 6, 7);
        let f = lu_factor(&j, 0.2).unwrap();
        let col = random(6, 1, 8).column(0);
        let b = DenseMatrix::from_fn(6, 16, |i, _| col[i]);
        let x = lu_solve(&f, &b).unwrap();
        for c in 1..16 {
            assert_eq!(x.column(c), x.column(0));
        }
    }

    #[test]
    fn singular_pivot_names_column() {
        // I - 1.0 * J with J = I is the zero matrix.
        let err = lu_factor(&DenseMatrix::identity(3), 1.0).unwrap_err();
        assert!(matches!(err, Error::SingularPivot { column: 0 }));
        let mut m = DenseMatrix::identity(3);
        m.set(1, 1, 0.0);
        m.set(2, 1, 0.0);
        let err = lu_factor_matrix(&m).unwrap_err();
        assert!(matches!(err, Error::SingularPivot { column: 1 }));
    }

    #[test]
    fn dimension_mismatch() {
        let f = lu_factor(&DenseMatrix::zeros(3, 3), 0.1).unwrap();
        assert!(lu_solve(&f, &DenseMatrix::zeros(4, 1)).is_err());
        assert!(lu_factor(&DenseMatrix::zeros(3, 2), 0.1).is_err());
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let m = DenseMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let f = lu_factor_matrix(&m).unwrap();
        let b = DenseMatrix::column_vector(vec![2.0, 3.0]);
        assert_eq!(lu_solve(&f, &b).unwrap().column(0), vec![3.0, 2.0]);
    }

    #[test]
    fn tridiagonal_factor_stays_sparse() {
        let n = 64;
        let j = DenseMatrix::from_fn(n, n, |r, c| {
            let d = (r + n - c) % n;
            match d {
                0 => -2.0,
                1 => 1.0,
                _ if d == n - 1 => 1.0,
                _ => 0.0,
            }
        });
        let f = lu_factor(&j, 0.5).unwrap();
        assert!(f.fill() < 6 * n, "fill {}", f.fill());
        let b = random(n, 3, 9);
        let x = lu_solve(&f, &b).unwrap();
        assert!(rel_residual(&j, 0.5, &x, &b) < 1e-12);
    }
}
