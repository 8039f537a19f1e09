use num_complex::Complex64;

use super::dataset::{Dataset, DatasetHeader};
use super::fft::FftPlan;
use crate::error::{Error, Result};

/// Contour points for the φ-function means.
const CONTOUR_POINTS: usize = 32;

/// Settings for Kuramoto-Sivashinsky reference data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsConfig {
    pub d: usize,
    pub length: f64,
    /// Internal ETDRK4 step.
    pub h: f64,
    /// Time discarded before recording.
    pub t_transient: f64,
    /// Recorded time span.
    pub t_span: f64,
    pub dt_sample: f64,
}

impl KsConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            length: 22.0,
            h: 0.025,
            t_transient: 1000.0,
            t_span: 200.0,
            dt_sample: 0.2,
        }
    }

    pub fn n_times(&self) -> usize {
        (self.t_span / self.dt_sample).round() as usize + 1
    }
}

fn whole_steps(t: f64, h: f64, what: &str) -> Result<usize> {
    let n = (t / h).round();
    if n < 0.0 || (n * h - t).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!("{what} {t} is not a multiple of the step {h}")));
    }
    Ok(n as usize)
}

/// The initial condition `cos(x/22) (1 + sin(x/22))` at `x_j = j L / d`.
pub fn ks_initial_condition(d: usize, length: f64) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let x = j as f64 * length / d as f64;
            (x / 22.0).cos() * (1.0 + (x / 22.0).sin())
        })
        .collect()
}

/// ETDRK4 for `u_t = -u u_x - u_xx - u_xxxx` on a periodic interval, in Fourier space.
///
/// The linear part is integrated exactly; the φ-function weights are contour
/// means, which stay accurate where `h L` is tiny. The quadratic term is
/// dealiased with the 2/3 rule.
#[derive(Clone, Debug)]
pub struct KsSolver {
    plan: FftPlan,
    h: f64,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    /// `-i k / 2` with the Nyquist mode and dealiased modes zeroed.
    g: Vec<Complex64>,
}

impl KsSolver {
    pub fn new(d: usize, length: f64, h: f64) -> Result<Self> {
        let plan = FftPlan::new(d)?;
        if d < 4 || !(length > 0.0) || !(h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "KS solver needs d >= 4, L > 0, h > 0; got d={d}, L={length}, h={h}"
            )));
        }
        // The Nyquist mode keeps its true wavenumber in the (even) linear symbol
        // but has no odd derivative.
        let wave = |j: usize| -> f64 {
            let idx = if j <= d / 2 { j as f64 } else { j as f64 - d as f64 };
            2.0 * std::f64::consts::PI * idx / length
        };
        let cutoff = d as f64 / 3.0;
        let roots: Vec<Complex64> = (1..=CONTOUR_POINTS)
            .map(|j| Complex64::from_polar(1.0, std::f64::consts::PI * (j as f64 - 0.5) / (CONTOUR_POINTS / 2) as f64))
            .collect();
        let mean = |f: &dyn Fn(Complex64) -> Complex64| -> f64 {
            roots.iter().map(|&z| f(z)).sum::<Complex64>().re / CONTOUR_POINTS as f64
        };
        let n = d;
        let (mut e, mut e2, mut q, mut f1, mut f2, mut f3) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut g = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            let k = wave(j);
            let lin = k * k - k * k * k * k;
            let hl = h * lin;
            e[j] = hl.exp();
            e2[j] = (hl / 2.0).exp();
            q[j] = h * mean(&|r| {
                let z = hl + r;
                ((z / 2.0).exp() - 1.0) / z
            });
            f1[j] = h * mean(&|r| {
                let z = hl + r;
                (-4.0 - z + z.exp() * (4.0 - 3.0 * z + z * z)) / (z * z * z)
            });
            f2[j] = h * mean(&|r| {
                let z = hl + r;
                (2.0 + z + z.exp() * (-2.0 + z)) / (z * z * z)
            });
            f3[j] = h * mean(&|r| {
                let z = hl + r;
                (-4.0 - 3.0 * z - z * z + z.exp() * (4.0 - z)) / (z * z * z)
            });
            let signed = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            if signed.abs() < cutoff && j != n / 2 {
                g[j] = Complex64::new(0.0, -0.5 * k);
            }
        }
        Ok(Self {
            plan,
            h,
            e,
            e2,
            q,
            f1,
            f2,
            f3,
            g,
        })
    }

    pub fn dim(&self) -> usize {
        self.plan.len()
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn to_spectral(&self, u: &[f64]) -> Result<Vec<Complex64>> {
        let mut v: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.plan.forward(&mut v)?;
        hermitian_projection(&mut v);
        Ok(v)
    }

    pub fn to_physical(&self, v: &[Complex64]) -> Result<Vec<f64>> {
        let mut w = v.to_vec();
        self.plan.inverse(&mut w)?;
        Ok(w.into_iter().map(|c| c.re).collect())
    }

    /// `-(u²)_x / 2` in Fourier space.
    fn nonlinear(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut w = v.to_vec();
        self.plan.inverse(&mut w)?;
        for c in w.iter_mut() {
            *c = Complex64::new(c.re * c.re, 0.0);
        }
        self.plan.forward(&mut w)?;
        for (c, g) in w.iter_mut().zip(&self.g) {
            *c *= g;
        }
        Ok(w)
    }

    pub fn step(&self, v: &mut [Complex64]) -> Result<()> {
        let n = v.len();
        let nv = self.nonlinear(v)?;
        let a: Vec<Complex64> = (0..n).map(|j| self.e2[j] * v[j] + self.q[j] * nv[j]).collect();
        let na = self.nonlinear(&a)?;
        let b: Vec<Complex64> = (0..n).map(|j| self.e2[j] * v[j] + self.q[j] * na[j]).collect();
        let nb = self.nonlinear(&b)?;
        let c: Vec<Complex64> = (0..n)
            .map(|j| self.e2[j] * a[j] + self.q[j] * (2.0 * nb[j] - nv[j]))
            .collect();
        let nc = self.nonlinear(&c)?;
        for j in 0..n {
            v[j] = self.e[j] * v[j]
                + nv[j] * self.f1[j]
                + 2.0 * (na[j] + nb[j]) * self.f2[j]
                + nc[j] * self.f3[j];
        }
        hermitian_projection(v);
        if v.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            Ok(())
        } else {
            Err(Error::BlowUp { stage: 0 })
        }
    }

    pub fn steps(&self, v: &mut [Complex64], n: usize) -> Result<()> {
        for k in 0..n {
            self.step(v).map_err(|e| e.at_step(k))?;
        }
        Ok(())
    }

    /// Advances a physical-space state by `t`, a whole number of steps.
    pub fn advance(&self, u: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut v = self.to_spectral(u)?;
        self.steps(&mut v, whole_steps(t, self.h, "horizon")?)?;
        self.to_physical(&v)
    }
}

/// Restores the conjugate symmetry of the spectrum of a real field. Round-off
/// otherwise seeds an imaginary part that the unstable modes amplify.
fn hermitian_projection(v: &mut [Complex64]) {
    let n = v.len();
    v[0].im = 0.0;
    if n > 1 {
        v[n / 2].im = 0.0;
    }
    for j in 1..n.div_ceil(2) {
        let avg = 0.5 * (v[j] + v[n - j].conj());
        v[j] = avg;
        v[n - j] = avg.conj();
    }
}

/// Runs the transient, then records `n_times` snapshots of one trajectory.
pub fn generate_ks(cfg: &KsConfig) -> Result<Dataset> {
    let solver = KsSolver::new(cfg.d, cfg.length, cfg.h)?;
    let per_sample = whole_steps(cfg.dt_sample, cfg.h, "sampling interval")?;
    let transient = whole_steps(cfg.t_transient, cfg.h, "transient")?;
    let n_times = cfg.n_times();
    let mut v = solver.to_spectral(&ks_initial_condition(cfg.d, cfg.length))?;
    solver.steps(&mut v, transient)?;
    let mut data = Vec::with_capacity(n_times * cfg.d);
    data.extend(solver.to_physical(&v)?);
    for _ in 1..n_times {
        solver.steps(&mut v, per_sample)?;
        data.extend(solver.to_physical(&v)?);
    }
    Dataset::new(
        DatasetHeader {
            d: cfg.d,
            n_traj: 1,
            n_times,
            length: cfg.length,
            dt_sample: cfg.dt_sample,
            n_train: 1,
        },
        data,
    )
}

/// Relative change of the state after `horizon` time units when the internal step
/// is halved, starting from `u0`.
pub fn ks_self_convergence(u0: &[f64], length: f64, h: f64, horizon: f64) -> Result<f64> {
    let d = u0.len();
    let coarse = KsSolver::new(d, length, h)?.advance(u0, horizon)?;
    let fine = KsSolver::new(d, length, h / 2.0)?.advance(u0, horizon)?;
    let diff: f64 = coarse.iter().zip(&fine).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fine.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(diff / norm)
}
