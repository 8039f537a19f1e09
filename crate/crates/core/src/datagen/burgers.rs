use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{Dataset, DatasetHeader};
use crate::error::{check_dim, Error, Result};
use crate::integrator::{advance, StepContext, Stepper};
use crate::linalg::{DenseMatrix, SolverConfig};
use crate::netcore::{make_burgers_diffusion, ExplicitTerm, PartitionedOde};
use crate::tableaux::SchemeId;

/// Convective term `-u u_x` in skew-symmetric form,
/// `-(u D u + D(u²)) / 3` with the centered first difference `D` on a periodic grid.
///
/// The split form conserves both `Σ u` and `Σ u²` exactly, so unresolved
/// shocks cannot feed a grid-scale blow-up; constant states are steady.
#[derive(Clone, Debug, PartialEq)]
pub struct BurgersAdvection {
    dim: usize,
    spacing: f64,
}

impl BurgersAdvection {
    pub fn new(dim: usize, length: f64) -> Result<Self> {
        if dim < 3 || !(length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "advection needs d >= 3 and L > 0, got d={dim}, L={length}"
            )));
        }
        Ok(Self {
            dim,
            spacing: length / dim as f64,
        })
    }
}

impl ExplicitTerm for BurgersAdvection {
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
        check_dim("BurgersAdvection", self.dim, u.rows())?;
        let d = self.dim;
        let c = -1.0 / (6.0 * self.spacing);
        let mut g = DenseMatrix::zeros(d, u.cols());
        for i in 0..d {
            let (l, r) = (u.row((i + d - 1) % d), u.row((i + 1) % d));
            let mid = u.row(i);
            let out = g.row_mut(i);
            for (k, o) in out.iter_mut().enumerate() {
                *o = c * (mid[k] * (r[k] - l[k]) + r[k] * r[k] - l[k] * l[k]);
            }
        }
        Ok(g)
    }

    fn vjp(&self, u: &DenseMatrix, v: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
        check_dim("BurgersAdvection vjp", self.dim, u.rows())?;
        u.same_shape(v, "BurgersAdvection vjp")?;
        let d = self.dim;
        let c = -1.0 / (6.0 * self.spacing);
        let mut du = DenseMatrix::zeros(d, u.cols());
        for i in 0..d {
            let (l, r) = ((i + d - 1) % d, (i + 1) % d);
            for k in 0..u.cols() {
                let w = c * v.get(i, k);
                let (ui, ul, ur) = (u.get(i, k), u.get(l, k), u.get(r, k));
                du.set(i, k, du.get(i, k) + w * (ur - ul));
                du.set(r, k, du.get(r, k) + w * (ui + 2.0 * ur));
                du.set(l, k, du.get(l, k) - w * (ui + 2.0 * ul));
            }
        }
        Ok((du, Vec::new()))
    }
}

/// Settings for viscous Burgers reference data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BurgersConfig {
    pub d: usize,
    pub length: f64,
    pub nu: f64,
    pub n_traj: usize,
    pub n_train: usize,
    pub t_final: f64,
    pub dt_sample: f64,
    /// Internal step of the reference integration.
    pub h: f64,
    /// Number of sine modes in the random initial conditions.
    pub modes: usize,
}

impl BurgersConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            length: 1.0,
            nu: 8e-4,
            n_traj: 100,
            n_train: 80,
            t_final: 5.0,
            dt_sample: 0.1,
            h: 1e-3,
            modes: 4,
        }
    }

    pub fn n_times(&self) -> usize {
        (self.t_final / self.dt_sample).round() as usize + 1
    }

    fn validate(&self) -> Result<()> {
        if self.d < 3 || self.n_traj == 0 || self.n_train > self.n_traj || self.modes == 0 {
            return Err(Error::InvalidArgument(format!("invalid Burgers settings {self:?}")));
        }
        if !(self.nu >= 0.0) || !(self.h > 0.0) || !(self.dt_sample > 0.0) || !(self.t_final > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid Burgers settings {self:?}")));
        }
        Ok(())
    }
}

/// Random initial conditions `Σ_{k=1..K} a_k sin(2πkx/L + φ_k)` with
/// `a_k ~ N(0, 1/k²)` and `φ_k ~ U[0, 2π)`, one per column.
///
/// Trajectory `t` draws from ChaCha8 seeded with `seed` on stream `t`, so each
/// column is independent of how many others are generated.
pub fn burgers_initial_conditions(cfg: &BurgersConfig, seed: u64) -> Result<DenseMatrix> {
    cfg.validate()?;
    let mut u = DenseMatrix::zeros(cfg.d, cfg.n_traj);
    for t in 0..cfg.n_traj {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let terms: Vec<(f64, f64)> = (1..=cfg.modes)
            .map(|k| {
                let a = Normal::new(0.0, 1.0 / k as f64).expect("positive std").sample(&mut rng);
                let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                (a, phase)
            })
            .collect();
        for i in 0..cfg.d {
            let x = i as f64 * cfg.length / cfg.d as f64;
            let val: f64 = terms
                .iter()
                .enumerate()
                .map(|(k, &(a, p))| a * (2.0 * std::f64::consts::PI * (k + 1) as f64 * x / cfg.length + p).sin())
                .sum();
            u.set(i, t, val);
        }
    }
    Ok(u)
}

/// The semi-discrete Burgers system `du/dt = -u D u + nu D² u`.
pub fn burgers_system(d: usize, length: f64, nu: f64) -> Result<PartitionedOde<BurgersAdvection>> {
    PartitionedOde::new(BurgersAdvection::new(d, length)?, make_burgers_diffusion(d, length, nu)?)
}

/// Integrates given initial conditions (one per column) and samples them.
pub fn integrate_burgers(cfg: &BurgersConfig, u0: &DenseMatrix) -> Result<Dataset> {
    cfg.validate()?;
    check_dim("integrate_burgers", cfg.d, u0.rows())?;
    let n_traj = u0.cols();
    let ode = burgers_system(cfg.d, cfg.length, cfg.nu)?;
    let stepper = Stepper::for_scheme(SchemeId::ImexRk5)?;
    let per_sample = (cfg.dt_sample / cfg.h).round() as usize;
    if per_sample == 0 || (per_sample as f64 * cfg.h - cfg.dt_sample).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "sampling interval {} is not a multiple of the internal step {}",
            cfg.dt_sample, cfg.h
        )));
    }
    let n_times = cfg.n_times();
    let mut ctx = StepContext::new(SolverConfig::default());
    let mut snaps = Vec::with_capacity(n_times);
    let mut u = u0.clone();
    snaps.push(u.clone());
    for t in 1..n_times {
        u = advance(&ode, &stepper, &u, cfg.h, per_sample, &mut ctx)
            .map_err(|e| e.at_step((t - 1) * per_sample))?;
        snaps.push(u.clone());
    }
    let mut data = Vec::with_capacity(n_traj * n_times * cfg.d);
    for tr in 0..n_traj {
        for s in &snaps {
            data.extend(s.column(tr));
        }
    }
    Dataset::new(
        DatasetHeader {
            d: cfg.d,
            n_traj,
            n_times,
            length: cfg.length,
            dt_sample: cfg.dt_sample,
            n_train: cfg.n_train.min(n_traj),
        },
        data,
    )
}

/// Random initial conditions, reference integration and the train/test split.
pub fn generate_burgers(cfg: &BurgersConfig, seed: u64) -> Result<Dataset> {
    let u0 = burgers_initial_conditions(cfg, seed)?;
    integrate_burgers(cfg, &u0)
}
