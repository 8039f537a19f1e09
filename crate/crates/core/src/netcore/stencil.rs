use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, LinearOperator};

/// Circulant finite-difference operator with periodic wrap-around.
///
/// Row `i` applies `taps[k]` to entry `(i + k - r) mod d`, where `r` is the
/// stencil half-width.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilOperator {
    taps: Vec<f64>,
    dim: usize,
}

impl StencilOperator {
    pub fn new(taps: Vec<f64>, dim: usize) -> Result<Self> {
        if taps.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "stencil needs an odd number of taps, got {}",
                taps.len()
            )));
        }
        if dim < taps.len() {
            return Err(Error::InvalidArgument(format!(
                "grid of {dim} points is smaller than the {}-point stencil",
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("stencil taps must be finite".into()));
        }
        Ok(Self { taps, dim })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn half_width(&self) -> usize {
        self.taps.len() / 2
    }

    /// Operator with reversed taps, which is the matrix transpose.
    pub fn reversed(&self) -> Self {
        let mut taps = self.taps.clone();
        taps.reverse();
        Self { taps, dim: self.dim }
    }

    /// Eigenvalue for Fourier mode `k`, i.e. for the vector `exp(2πi k j / d)`.
    pub fn eigenvalue(&self, k: usize) -> Complex64 {
        let r = self.half_width() as f64;
        let theta = 2.0 * std::f64::consts::PI * k as f64 / self.dim as f64;
        self.taps
            .iter()
            .enumerate()
            .map(|(i, &c)| c * Complex64::from_polar(1.0, theta * (i as f64 - r)))
            .sum()
    }

    /// All `d` eigenvalues, indexed by Fourier mode.
    pub fn eigenvalues(&self) -> Vec<Complex64> {
        (0..self.dim).map(|k| self.eigenvalue(k)).collect()
    }

    fn apply_taps(taps: &[f64], dim: usize, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(x.rows(), dim, "stencil applied to a block with the wrong row count");
        let m = x.cols();
        let r = taps.len() / 2;
        let mut y = DenseMatrix::zeros(dim, m);
        for i in 0..dim {
            let out = y.row_mut(i);
            for (k, &c) in taps.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let src = (i + dim + k - r) % dim;
                for (o, &v) in out.iter_mut().zip(x.row(src)) {
                    *o += c * v;
                }
            }
        }
        y
    }
}

impl LinearOperator for StencilOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        Self::apply_taps(&self.taps, self.dim, x)
    }

    fn apply_transpose(&self, x: &DenseMatrix) -> DenseMatrix {
        let rev: Vec<f64> = self.taps.iter().rev().copied().collect();
        Self::apply_taps(&rev, self.dim, x)
    }

    fn to_dense(&self) -> Option<DenseMatrix> {
        let r = self.half_width();
        let d = self.dim;
        let mut m = DenseMatrix::zeros(d, d);
        for i in 0..d {
            for (k, &c) in self.taps.iter().enumerate() {
                let j = (i + d + k - r) % d;
                m.set(i, j, m.get(i, j) + c);
            }
        }
        Some(m)
    }

    fn is_symmetric(&self) -> bool {
        self.taps.iter().eq(self.taps.iter().rev())
    }
}

/// Fixed linear part of the Kuramoto–Sivashinsky model on a periodic domain of
/// length `length` with `d` points: `-u_xx - u_xxxx` by central differences.
pub fn make_ks_stencil(d: usize, length: f64) -> Result<StencilOperator> {
    if d < 5 {
        return Err(Error::InvalidArgument(format!("the KS stencil needs d >= 5, got {d}")));
    }
    if !(length > 0.0) {
        return Err(Error::InvalidArgument(format!("domain length must be positive, got {length}")));
    }
    let h = length / d as f64;
    let h2 = h * h;
    let h4 = h2 * h2;
    let taps = vec![
        -1.0 / h4,
        4.0 / h4 - 1.0 / h2,
        -6.0 / h4 + 2.0 / h2,
        4.0 / h4 - 1.0 / h2,
        -1.0 / h4,
    ];
    StencilOperator::new(taps, d)
}

/// Viscous term `nu u_xx` of Burgers' equation by second-order central differences.
pub fn make_burgers_diffusion(d: usize, length: f64, nu: f64) -> Result<StencilOperator> {
    if d < 3 {
        return Err(Error::InvalidArgument(format!("the diffusion stencil needs d >= 3, got {d}")));
    }
    if !(length > 0.0) || !(nu >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need length > 0 and nu >= 0, got length={length}, nu={nu}"
        )));
    }
    let h = length / d as f64;
    let s = nu / (h * h);
    StencilOperator::new(vec![s, -2.0 * s, s], d)
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
    fn ks_taps() {
        let j = make_ks_stencil(64, 22.0).unwrap();
        // h = 0.34375: -6/h^4 + 2/h^2
        assert!((j.taps()[2] + 412.7893).abs() < 1e-4, "{}", j.taps()[2]);
        let ones = DenseMatrix::new(64, 1, vec![1.0; 64]).unwrap();
        assert!(j.apply(&ones).max_abs() < 1e-9);
        assert!(j.is_symmetric());
        assert!(make_ks_stencil(4, 22.0).is_err());
    }

    #[test]
    fn burgers_taps() {
        let j = make_burgers_diffusion(512, 1.0, 8e-4).unwrap();
        assert!((j.taps()[1] + 419.43).abs() < 0.005, "{}", j.taps()[1]);
        let ones = DenseMatrix::new(512, 1, vec![1.0; 512]).unwrap();
        assert!(j.apply(&ones).max_abs() < 1e-10);
        assert!(j.is_symmetric());
        assert!(make_burgers_diffusion(2, 1.0, 8e-4).is_err());
    }

    #[test]
    fn row_sums_match_tap_sum() {
        let j = StencilOperator::new(vec![0.5, -1.0, 3.0], 7).unwrap();
        let ones = DenseMatrix::new(7, 1, vec![1.0; 7]).unwrap();
        for v in j.apply(&ones).data() {
            assert!((v - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn transpose_is_reversed_taps() {
        let j = StencilOperator::new(vec![0.3, -1.0, 2.0, 0.7, -0.1], 9).unwrap();
        assert!(!j.is_symmetric());
        let dense = j.to_dense().unwrap();
        let rev = j.reversed().to_dense().unwrap();
        assert_eq!(dense.transpose(), rev);
        let x = random(9, 3, 1);
        let y = random(9, 3, 2);
        let lhs = j.apply(&x).dot(&y);
        let rhs = x.dot(&j.apply_transpose(&y));
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn apply_matches_dense() {
        let j = make_ks_stencil(16, 22.0).unwrap();
        let x = random(16, 4, 3);
        let a = j.apply(&x);
        let b = j.to_dense().unwrap().matmul(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }
    }

    #[test]
    fn eigenvalues_match_fourier_modes() {
        let d = 32;
        let j = make_ks_stencil(d, 22.0).unwrap();
        for k in [0, 1, 2, 5, 16] {
            let lam = j.eigenvalue(k);
            assert!(lam.im.abs() < 1e-9);
            let theta = 2.0 * std::f64::consts::PI * k as f64 / d as f64;
            let v = DenseMatrix::from_fn(d, 1, |i, _| (theta * i as f64).cos());
            let jv = j.apply(&v);
            for i in 0..d {
                assert!((jv.get(i, 0) - lam.re * v.get(i, 0)).abs() < 1e-8 * lam.re.abs().max(1.0));
            }
        }
        // antidiffusion wins at low wavenumbers, hyperdiffusion at high ones
        assert!(j.eigenvalue(1).re > 0.0);
        assert!(j.eigenvalue(2).re > 0.0);
        let h = 22.0 / d as f64;
        let nyquist = j.eigenvalue(d / 2).re;
        assert!(nyquist < -10.0 / h.powi(4));
    }
}
