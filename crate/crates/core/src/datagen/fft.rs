use num_complex::Complex64;

use crate::error::{Error, Result};

/// Precomputed twiddle factors and bit-reversal permutation for a radix-2 FFT.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("FFT length must be a power of two, got {n}")));
        }
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 / n as f64))
            .collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Ok(Self { n, twiddles, bitrev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn transform(&self, x: &mut [Complex64], inverse: bool) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "fft",
                expected: self.n,
                actual: x.len(),
            });
        }
        for i in 0..self.n {
            let j = self.bitrev[i];
            if i < j {
                x.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let stride = self.n / len;
            for start in (0..self.n).step_by(len) {
                for k in 0..len / 2 {
                    let w = self.twiddles[k * stride];
                    let w = if inverse { w.conj() } else { w };
                    let a = x[start + k];
                    let b = x[start + k + len / 2] * w;
                    x[start + k] = a + b;
                    x[start + k + len / 2] = a - b;
                }
            }
            len <<= 1;
        }
        if inverse {
            let scale = 1.0 / self.n as f64;
            x.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(())
    }

    /// In-place forward DFT, `X_k = Σ_j x_j exp(-2πi jk/n)`.
    pub fn forward(&self, x: &mut [Complex64]) -> Result<()> {
        self.transform(x, false)
    }

    /// In-place inverse DFT including the `1/n` factor.
    pub fn inverse(&self, x: &mut [Complex64]) -> Result<()> {
        self.transform(x, true)
    }
}

pub fn fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let plan = FftPlan::new(x.len())?;
    let mut y = x.to_vec();
    plan.forward(&mut y)?;
    Ok(y)
}

pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let plan = FftPlan::new(x.len())?;
    let mut y = x.to_vec();
    plan.inverse(&mut y)?;
    Ok(y)
}
