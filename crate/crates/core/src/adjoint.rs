//! Discrete adjoint of the steppers in [`integrator`](crate::integrator).
//!
//! The reverse sweep differentiates the *discrete* forward map, stage by stage, so
//! its gradients match finite differences of the integrator itself to round-off.
//! For an IMEX pair, stage `i` (walking backwards) forms
//!
//! ```text
//! w_g = b_i λ + Σ_{j>i} a_ji θ_j
//! w_h = b̃_i λ + Σ_{j>i} ã_ji θ_j
//! (I - dt ã_ii Jᵀ) θ_i = dt (G_u(U_i)ᵀ w_g + Jᵀ w_h)
//! μ += dt G_p(U_i)ᵀ w_g
//! ```
//!
//! and finally `λ ← λ + Σ θ_i`. Grouping the weights before the VJP means one
//! reverse product of `G` per stage. The transposed solves reuse the cached
//! factorizations from the forward pass (they are the same matrix when `J` is
//! symmetric).

use std::cell::{Cell, RefCell};

use crate::error::{check_dim, Error, Result};
use crate::integrator::{integrate_with, StageTrajectory, StepContext, StepRecord, Stepper};
use crate::linalg::{gmres, DenseMatrix, LinearOperator, SolverConfig};
use crate::netcore::{ExplicitTerm, PartitionedOde};
use crate::tableaux::ButcherTableauPair;

/// Running adjoint state: `lambda` for the state, `mu` for the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointAccumulator {
    pub lambda: DenseMatrix,
    pub mu: Vec<f64>,
    stage_lambdas: Vec<DenseMatrix>,
}

impl AdjointAccumulator {
    /// Starts from the terminal condition `λ_N = lambda`, `μ_N = 0`.
    pub fn new(lambda: DenseMatrix, param_count: usize) -> Self {
        Self {
            lambda,
            mu: vec![0.0; param_count],
            stage_lambdas: Vec::new(),
        }
    }

    /// Stage adjoints `θ_i` of the most recent step.
    pub fn stage_lambdas(&self) -> &[DenseMatrix] {
        &self.stage_lambdas
    }

    fn add_mu(&mut self, scale: f64, dp: &[f64]) {
        for (m, g) in self.mu.iter_mut().zip(dp) {
            *m += scale * g;
        }
    }
}

fn check_finite(x: &DenseMatrix, stage: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::BlowUp { stage })
    }
}

fn vjp_counted<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    u: &DenseMatrix,
    w: &DenseMatrix,
    ctx: &mut StepContext,
) -> Result<(DenseMatrix, Vec<f64>)> {
    let out = ode.vjp_g(u, w)?;
    ctx.nfe.backward_vjp_evals += 1;
    ctx.nfe.recompute_g_evals += 1;
    Ok(out)
}

/// Reverse step through one IMEX Runge-Kutta step.
pub fn adjoint_step<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    tab: &ButcherTableauPair,
    rec: &StepRecord,
    acc: &mut AdjointAccumulator,
    dt: f64,
    ctx: &mut StepContext,
) -> Result<()> {
    let s = tab.stages();
    if rec.stages.len() != s {
        return Err(Error::InvalidArgument(format!(
            "step record holds {} stages, the tableau has {s}",
            rec.stages.len()
        )));
    }
    check_dim("adjoint_step", ode.dim(), acc.lambda.rows())?;
    let mut theta: Vec<DenseMatrix> = vec![DenseMatrix::zeros(0, 0); s];
    for i in (0..s).rev() {
        let mut w_g = acc.lambda.scaled(tab.b()[i]);
        let mut w_h = acc.lambda.scaled(tab.bt()[i]);
        for (j, th) in theta.iter().enumerate().skip(i + 1) {
            let (a, at) = (tab.a(j, i), tab.at(j, i));
            if a != 0.0 {
                w_g.axpy(a, th);
            }
            if at != 0.0 {
                w_h.axpy(at, th);
            }
        }
        let (gu, gp) = vjp_counted(ode, &rec.stages[i], &w_g, ctx)?;
        let mut rhs = gu;
        rhs.axpy(1.0, &ode.apply_jt(&w_h)?);
        rhs.scale(dt);
        let diag = tab.at(i, i);
        theta[i] = if diag != 0.0 {
            ctx.solve(ode, dt * diag, true, &rhs)?
        } else {
            rhs
        };
        check_finite(&theta[i], i)?;
        acc.add_mu(dt, &gp);
    }
    for th in &theta {
        acc.lambda.axpy(1.0, th);
    }
    acc.stage_lambdas = theta;
    check_finite(&acc.lambda, s)
}

/// Reverse step through one explicit Runge-Kutta step on `f = G + J`:
/// `θ_i = dt f_u(U_i)ᵀ (b_i λ + Σ_{j>i} a_ji θ_j)`. No linear solves.
pub fn erk_adjoint_step<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    tab: &ButcherTableauPair,
    rec: &StepRecord,
    acc: &mut AdjointAccumulator,
    dt: f64,
    ctx: &mut StepContext,
) -> Result<()> {
    let s = tab.stages();
    if rec.stages.len() != s {
        return Err(Error::InvalidArgument(format!(
            "step record holds {} stages, the tableau has {s}",
            rec.stages.len()
        )));
    }
    check_dim("erk_adjoint_step", ode.dim(), acc.lambda.rows())?;
    let mut theta: Vec<DenseMatrix> = vec![DenseMatrix::zeros(0, 0); s];
    for i in (0..s).rev() {
        let mut w = acc.lambda.scaled(tab.b()[i]);
        for (j, th) in theta.iter().enumerate().skip(i + 1) {
            let a = tab.a(j, i);
            if a != 0.0 {
                w.axpy(a, th);
            }
        }
        let (gu, gp) = vjp_counted(ode, &rec.stages[i], &w, ctx)?;
        let mut th = gu;
        th.axpy(1.0, &ode.apply_jt(&w)?);
        th.scale(dt);
        check_finite(&th, i)?;
        theta[i] = th;
        acc.add_mu(dt, &gp);
    }
    for th in &theta {
        acc.lambda.axpy(1.0, th);
    }
    acc.stage_lambdas = theta;
    check_finite(&acc.lambda, s)
}

/// `w -> w - h (G_u(v)ᵀ w + Jᵀ w)` on flattened blocks.
struct TransposedNewtonMatrix<'a, G> {
    ode: &'a PartitionedOde<G>,
    v: &'a DenseMatrix,
    h: f64,
    vjps: Cell<u64>,
    failure: RefCell<Option<Error>>,
}

impl<G: ExplicitTerm> LinearOperator for TransposedNewtonMatrix<'_, G> {
    fn dim(&self) -> usize {
        self.v.rows() * self.v.cols()
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let w = DenseMatrix::new(self.v.rows(), self.v.cols(), x.data().to_vec())
            .expect("flattened block has the state's size");
        self.vjps.set(self.vjps.get() + 1);
        let gu = match self.ode.vjp_g(self.v, &w) {
            Ok((gu, _)) => gu,
            Err(e) => {
                self.failure.borrow_mut().get_or_insert(e);
                return DenseMatrix::zeros(x.rows(), 1);
            }
        };
        let jt = self.ode.linear().apply_transpose(&w);
        let mut out = w;
        out.axpy(-self.h, &gu);
        out.axpy(-self.h, &jt);
        DenseMatrix::column_vector(out.into_data())
    }

    fn apply_transpose(&self, _x: &DenseMatrix) -> DenseMatrix {
        unreachable!("GMRES never applies the transpose")
    }
}

/// Relative GMRES tolerance for the transposed Crank-Nicolson system.
pub const CN_ADJOINT_TOL: f64 = 1e-12;

/// Reverse step through one Crank-Nicolson step from `u_n` to `u_next`.
///
/// Solves `(I - dt/2 f_u(u_next))ᵀ θ = λ` matrix-free, then
/// `λ ← θ + dt/2 f_u(u_n)ᵀ θ` and `μ += dt/2 (G_p(u_n)ᵀ θ + G_p(u_next)ᵀ θ)`.
pub fn cn_adjoint_step<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    u_n: &DenseMatrix,
    u_next: &DenseMatrix,
    acc: &mut AdjointAccumulator,
    dt: f64,
    ctx: &mut StepContext,
) -> Result<()> {
    check_dim("cn_adjoint_step", ode.dim(), acc.lambda.rows())?;
    let h = 0.5 * dt;
    let op = TransposedNewtonMatrix {
        ode,
        v: u_next,
        h,
        vjps: Cell::new(0),
        failure: RefCell::new(None),
    };
    let cfg = SolverConfig {
        krylov_tol: CN_ADJOINT_TOL,
        ..ctx.newton.krylov
    };
    let out = gmres(&op, acc.lambda.data(), &cfg);
    ctx.nfe.backward_vjp_evals += op.vjps.get();
    ctx.nfe.recompute_g_evals += op.vjps.get();
    if let Some(e) = op.failure.into_inner() {
        return Err(e);
    }
    let out = out?;
    ctx.nfe.krylov_iters += out.iterations as u64;
    let theta = DenseMatrix::new(u_next.rows(), u_next.cols(), out.x)?;
    let (_, gp_next) = vjp_counted(ode, u_next, &theta, ctx)?;
    let (gu_n, gp_n) = vjp_counted(ode, u_n, &theta, ctx)?;
    let mut lambda = theta.clone();
    lambda.axpy(h, &gu_n);
    lambda.axpy(h, &ode.apply_jt(&theta)?);
    check_finite(&lambda, 0)?;
    acc.add_mu(h, &gp_n);
    acc.add_mu(h, &gp_next);
    acc.lambda = lambda;
    acc.stage_lambdas = vec![theta];
    Ok(())
}

/// Reverse step `n` of a recorded trajectory with whichever adjoint matches its stepper.
pub fn trajectory_adjoint_step<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    traj: &StageTrajectory,
    n: usize,
    acc: &mut AdjointAccumulator,
    ctx: &mut StepContext,
) -> Result<()> {
    let rec = traj.records.get(n).ok_or(Error::MissingStageRecord(n))?;
    match &traj.stepper {
        Stepper::Imex(tab) => adjoint_step(ode, tab, rec, acc, traj.dt, ctx),
        Stepper::Explicit(tab) => erk_adjoint_step(ode, tab, rec, acc, traj.dt, ctx),
        Stepper::CrankNicolson => cn_adjoint_step(ode, &traj.u[n], &traj.u[n + 1], acc, traj.dt, ctx),
    }
}

/// Full reverse sweep.
///
/// `seeds` holds `(step index, ∂ℓ/∂u at that index)` pairs. Seeds at the final
/// index form the terminal condition; the others are added to `λ` when the sweep
/// reaches their index. Returns `(∇_p ℓ, ∇_{u_0} ℓ)`.
pub fn backward_sweep<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    traj: &StageTrajectory,
    seeds: &[(usize, DenseMatrix)],
    ctx: &mut StepContext,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let n_steps = traj.n_steps();
    let shape = traj.u[0].shape();
    for (idx, g) in seeds {
        if *idx > n_steps {
            return Err(Error::InvalidArgument(format!(
                "seed index {idx} is past the last step {n_steps}"
            )));
        }
        if g.shape() != shape {
            return Err(Error::DimensionMismatch {
                context: "backward_sweep seed",
                expected: shape.0 * shape.1,
                actual: g.rows() * g.cols(),
            });
        }
    }
    let inject = |lambda: &mut DenseMatrix, n: usize| {
        for (_, g) in seeds.iter().filter(|(i, _)| *i == n) {
            lambda.axpy(1.0, g);
        }
    };
    let mut lambda = DenseMatrix::zeros(shape.0, shape.1);
    inject(&mut lambda, n_steps);
    let mut acc = AdjointAccumulator::new(lambda, ode.param_count());
    for n in (0..n_steps).rev() {
        trajectory_adjoint_step(ode, traj, n, &mut acc, ctx).map_err(|e| e.at_step(n))?;
        inject(&mut acc.lambda, n);
    }
    if let Some(i) = acc.mu.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    Ok((acc.mu, acc.lambda))
}

/// Adjoint versus finite differences for selected parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// `(parameter index, adjoint value, finite-difference value, relative error)`.
    pub components: Vec<(usize, f64, f64, f64)>,
}

impl GradientCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.3).fold(0.0, f64::max)
    }
}

/// Compares the reverse-sweep gradient of `½‖u_N‖²` with central differences.
///
/// Each difference quotient is Richardson-extrapolated from steps `h` and `h/2`
/// (scaled by `max(1, |p_k|)`), which leaves an `O(h⁴)` truncation error. The
/// relative error of a component is `|a - f| / max(|a|, |f|)`, and zero when both
/// vanish. `settings` is copied into every integration, so tight Newton or
/// Krylov tolerances apply to the probes too.
pub fn gradient_check<G: ExplicitTerm>(
    ode: &mut PartitionedOde<G>,
    stepper: &Stepper,
    u0: &DenseMatrix,
    dt: f64,
    n_steps: usize,
    components: &[usize],
    h: f64,
    settings: &StepContext,
) -> Result<GradientCheck> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    if let Some(&k) = components.iter().find(|&&k| k >= ode.param_count()) {
        return Err(Error::InvalidArgument(format!(
            "parameter index {k} out of range (model has {})",
            ode.param_count()
        )));
    }
    let fresh = || StepContext {
        solver: settings.solver,
        newton: settings.newton,
        ..StepContext::default()
    };
    let mut ctx = fresh();
    let traj = integrate_with(ode, stepper, u0, dt, n_steps, &mut ctx)?;
    let (grad, _) = backward_sweep(ode, &traj, &[(n_steps, traj.final_state().clone())], &mut ctx)?;

    let loss = |ode: &PartitionedOde<G>| -> Result<f64> {
        let u = crate::integrator::advance(ode, stepper, u0, dt, n_steps, &mut fresh())?;
        Ok(0.5 * u.dot(&u))
    };
    let quotient = |ode: &mut PartitionedOde<G>, k: usize, step: f64| -> Result<f64> {
        let p = ode.params()[k];
        ode.params_mut()[k] = p + step;
        let plus = loss(ode);
        ode.params_mut()[k] = p - step;
        let minus = loss(ode);
        ode.params_mut()[k] = p;
        Ok((plus? - minus?) / (2.0 * step))
    };

    let mut out = Vec::with_capacity(components.len());
    for &k in components {
        let step = h * ode.params()[k].abs().max(1.0);
        let coarse = quotient(ode, k, step)?;
        let fine = quotient(ode, k, 0.5 * step)?;
        let fd = (4.0 * fine - coarse) / 3.0;
        let a = grad[k];
        let scale = a.abs().max(fd.abs());
        let rel = if scale == 0.0 { 0.0 } else { (a - fd).abs() / scale };
        out.push((k, a, fd, rel));
    }
    Ok(GradientCheck { components: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::integrate;
    use crate::linalg::DenseOperator;
    use crate::netcore::{make_ks_stencil, PolynomialTerm, StencilOperator, ZeroTerm};
    use crate::tableaux::{get_tableau, SchemeId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn scalar_growth(p: f64) -> PartitionedOde<PolynomialTerm> {
        PartitionedOde::new(
            PolynomialTerm::new(1, [p, 0.0, 0.0, 0.0]),
            DenseOperator::new(DenseMatrix::zeros(1, 1)),
        )
        .unwrap()
    }

    #[test]
    fn zero_terminal_adjoint_stays_zero() {
        let ode = PartitionedOde::new(PolynomialTerm::new(6, [0.1, 0.2, -0.3, 0.4]), make_ks_stencil(6, 22.0).unwrap()).unwrap();
        let u0 = random(6, 2, 1);
        let mut ctx = StepContext::default();
        let traj = integrate(&ode, SchemeId::ImexRk4, &u0, 0.01, 3, &mut ctx).unwrap();
        let (gp, gu) = backward_sweep(&ode, &traj, &[(3, DenseMatrix::zeros(6, 2))], &mut ctx).unwrap();
        assert!(gp.iter().all(|&x| x == 0.0));
        assert!(gu.data().iter().all(|&x| x == 0.0));
        let (gp, gu) = backward_sweep(&ode, &traj, &[], &mut ctx).unwrap();
        assert!(gp.iter().all(|&x| x == 0.0));
        assert_eq!(gu.max_abs(), 0.0);
    }

    #[test]
    fn zero_dynamics_pass_through() {
        let ode = PartitionedOde::new(ZeroTerm { dim: 3 }, DenseOperator::new(DenseMatrix::zeros(3, 3))).unwrap();
        let u0 = random(3, 1, 2);
        let lam = random(3, 1, 3);
        for scheme in SchemeId::ALL {
            let mut ctx = StepContext::default();
            let traj = integrate(&ode, scheme, &u0, 0.1, 2, &mut ctx).unwrap();
            let (_, gu) = backward_sweep(&ode, &traj, &[(2, lam.clone())], &mut ctx).unwrap();
            for (a, b) in gu.data().iter().zip(lam.data()) {
                assert!((a - b).abs() < 1e-14, "{scheme}");
            }
        }
    }

    #[test]
    fn zero_step_sweep_returns_terminal_condition() {
        let ode = scalar_growth(0.5);
        let u0 = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        let mut ctx = StepContext::default();
        let traj = integrate(&ode, SchemeId::ImexRk2, &u0, 0.1, 0, &mut ctx).unwrap();
        let seed = DenseMatrix::new(1, 1, vec![2.5]).unwrap();
        let (gp, gu) = backward_sweep(&ode, &traj, &[(0, seed.clone())], &mut ctx).unwrap();
        assert_eq!(gu, seed);
        assert!(gp.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_growth_one_imex_rk2_step() {
        let (p, dt, u0v) = (0.7, 0.1, 1.3);
        let forward = |p: f64| {
            let ode = scalar_growth(p);
            let u0 = DenseMatrix::new(1, 1, vec![u0v]).unwrap();
            let traj = integrate(&ode, SchemeId::ImexRk2, &u0, dt, 1, &mut StepContext::default()).unwrap();
            traj.final_state().get(0, 0)
        };
        let ode = scalar_growth(p);
        let u0 = DenseMatrix::new(1, 1, vec![u0v]).unwrap();
        let mut ctx = StepContext::default();
        let traj = integrate(&ode, SchemeId::ImexRk2, &u0, dt, 1, &mut ctx).unwrap();
        let ones = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        let (gp, gu) = backward_sweep(&ode, &traj, &[(1, ones)], &mut ctx).unwrap();
        // u1 = u0 (1 + dt p + (dt p)^2 / 2) for the explicit half with J = 0
        let by_hand = u0v * (dt + dt * dt * p);
        assert!((gp[0] - by_hand).abs() < 1e-14);
        assert!((gu.get(0, 0) - (1.0 + dt * p + (dt * p).powi(2) / 2.0)).abs() < 1e-14);
        let h = 1e-5;
        let fd = (forward(p + h) - forward(p - h)) / (2.0 * h);
        assert!((gp[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn erk_adjoint_equals_imex_adjoint_on_same_pair() {
        let ode = PartitionedOde::new(PolynomialTerm::new(5, [0.2, -0.3, -0.1, 0.5]), make_ks_stencil(5, 22.0).unwrap()).unwrap();
        let tab = get_tableau(SchemeId::Erk4).unwrap();
        let u0 = random(5, 2, 4);
        let lam = random(5, 2, 5);
        let mut ctx = StepContext::default();
        let traj = integrate_with(&ode, &Stepper::Explicit(tab.clone()), &u0, 1e-3, 3, &mut ctx).unwrap();
        let (gp_e, gu_e) = backward_sweep(&ode, &traj, &[(3, lam.clone())], &mut ctx).unwrap();
        let as_imex = StageTrajectory {
            stepper: Stepper::Imex(tab),
            ..traj
        };
        let (gp_i, gu_i) = backward_sweep(&ode, &as_imex, &[(3, lam)], &mut ctx).unwrap();
        for (a, b) in gp_e.iter().zip(&gp_i) {
            assert!((a - b).abs() <= 1e-13 * b.abs().max(1.0));
        }
        for (a, b) in gu_e.data().iter().zip(gu_i.data()) {
            assert!((a - b).abs() <= 1e-13 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rk4_gradient_matches_finite_differences() {
        let coeffs = [0.3, -0.8, -0.5, 0.9];
        let u0 = DenseMatrix::new(2, 1, vec![0.6, -0.4]).unwrap();
        let target = DenseMatrix::new(2, 1, vec![0.1, 0.2]).unwrap();
        let zero_j = || DenseOperator::new(DenseMatrix::zeros(2, 2));
        let loss = |c: [f64; 4]| {
            let ode = PartitionedOde::new(PolynomialTerm::new(2, c), zero_j()).unwrap();
            let traj = integrate(&ode, SchemeId::Erk4, &u0, 0.1, 5, &mut StepContext::default()).unwrap();
            let mut d = traj.final_state().clone();
            d.axpy(-1.0, &target);
            0.5 * d.dot(&d)
        };
        let ode = PartitionedOde::new(PolynomialTerm::new(2, coeffs), zero_j()).unwrap();
        let mut ctx = StepContext::default();
        let traj = integrate(&ode, SchemeId::Erk4, &u0, 0.1, 5, &mut ctx).unwrap();
        let mut seed = traj.final_state().clone();
        seed.axpy(-1.0, &target);
        let (gp, _) = backward_sweep(&ode, &traj, &[(5, seed)], &mut ctx).unwrap();
        for k in 0..4 {
            let h = 1e-5;
            let mut cp = coeffs;
            cp[k] += h;
            let mut cm = coeffs;
            cm[k] -= h;
            let fd = (loss(cp) - loss(cm)) / (2.0 * h);
            assert!((gp[k] - fd).abs() <= 1e-7 * fd.abs().max(1e-3), "{k}: {} vs {fd}", gp[k]);
        }
    }

    #[test]
    fn linear_rk4_adjoint_is_transposed_matrix_power() {
        let d = 8;
        let stencil = StencilOperator::new(vec![0.4, -1.5, 0.9], d).unwrap();
        let jm = stencil.to_dense().unwrap();
        let ode = PartitionedOde::new(ZeroTerm { dim: d }, stencil).unwrap();
        let dt = 0.05;
        let n = 6;
        // RK4 step matrix I + X + X²/2 + X³/6 + X⁴/24 with X = dt J
        let x = jm.scaled(dt);
        let mut step = DenseMatrix::identity(d);
        let mut term = DenseMatrix::identity(d);
        for k in 1..=4 {
            term = term.matmul(&x).unwrap().scaled(1.0 / k as f64);
            step.axpy(1.0, &term);
        }
        let lam = random(d, 1, 7);
        let mut want = lam.clone();
        for _ in 0..n {
            want = step.transpose().matmul(&want).unwrap();
        }
        let u0 = random(d, 1, 8);
        let mut ctx = StepContext::default();
        let traj = integrate(&ode, SchemeId::Erk4, &u0, dt, n, &mut ctx).unwrap();
        let (_, gu) = backward_sweep(&ode, &traj, &[(n, lam)], &mut ctx).unwrap();
        for (a, b) in gu.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn transpose_duality_for_linear_imex() {
        let d = 12;
        let stencil = StencilOperator::new(vec![0.3, 1.0, -4.0, 2.0, 0.2], d).unwrap();
        let ode = PartitionedOde::new(ZeroTerm { dim: d }, stencil).unwrap();
        let u0 = random(d, 3, 1);
        let lam = random(d, 3, 2);
        for scheme in SchemeId::IMEX {
            let mut ctx = StepContext::default();
            let traj = integrate(&ode, scheme, &u0, 0.1, 7, &mut ctx).unwrap();
            let (_, gu) = backward_sweep(&ode, &traj, &[(7, lam.clone())], &mut ctx).unwrap();
            let lhs = lam.dot(traj.final_state());
            let rhs = gu.dot(&u0);
            assert!((lhs - rhs).abs() < 1e-11 * lhs.abs().max(1.0), "{scheme}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn seeds_are_linear_and_additive() {
        let ode = PartitionedOde::new(PolynomialTerm::new(4, [0.1, 0.5, -0.2, 0.3]), StencilOperator::new(vec![1.0, -2.0, 1.0], 4).unwrap()).unwrap();
        let u0 = random(4, 2, 3);
        let mut ctx = StepContext::default();
        let traj = integrate(&ode, SchemeId::ImexRk3, &u0, 0.05, 4, &mut ctx).unwrap();
        let s1 = random(4, 2, 4);
        let s2 = random(4, 2, 5);
        let (gp1, gu1) = backward_sweep(&ode, &traj, &[(4, s1.clone())], &mut ctx).unwrap();
        let (gp2, gu2) = backward_sweep(&ode, &traj, &[(4, s1.scaled(2.0))], &mut ctx).unwrap();
        for (a, b) in gp1.iter().zip(&gp2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        for (a, b) in gu1.data().iter().zip(gu2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        // a seed at step 2 plus one at step 4 equals the sum of separate sweeps
        let (gpa, gua) = backward_sweep(&ode, &traj, &[(2, s2.clone())], &mut ctx).unwrap();
        let (gpb, gub) = backward_sweep(&ode, &traj, &[(4, s1.clone()), (2, s2)], &mut ctx).unwrap();
        for ((a, b), c) in gp1.iter().zip(&gpa).zip(&gpb) {
            assert!((a + b - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
        for ((a, b), c) in gu1.data().iter().zip(gua.data()).zip(gub.data()) {
            assert!((a + b - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
        assert!(backward_sweep(&ode, &traj, &[(5, s1)], &mut ctx).is_err());
    }

    #[test]
    fn transposed_solves_hit_the_cache() {
        let d = 10;
        let stencil = StencilOperator::new(vec![0.3, 1.0, -4.0, 2.0, 0.2], d).unwrap();
        let ode = PartitionedOde::new(PolynomialTerm::new(d, [0.0, 0.1, 0.0, 0.0]), stencil).unwrap();
        let u0 = random(d, 2, 6);
        for n in [2, 9] {
            let mut ctx = StepContext::default();
            let traj = integrate(&ode, SchemeId::ImexRk3, &u0, 0.05, n, &mut ctx).unwrap();
            let solves_fwd = ctx.nfe.linear_solves;
            backward_sweep(&ode, &traj, &[(n, u0.clone())], &mut ctx).unwrap();
            assert_eq!(ctx.nfe.lu_factorizations, 2);
            // three implicit stages per step, the first stage is explicit
            assert_eq!(solves_fwd, 3 * n as u64);
            assert_eq!(ctx.nfe.linear_solves - solves_fwd, 3 * n as u64);
            assert_eq!(ctx.nfe.backward_vjp_evals, 4 * n as u64);
        }
    }

    #[test]
    fn crank_nicolson_gradient_matches_finite_differences() {
        let d = 6;
        let coeffs = [0.2, -0.4, -0.3, 0.5];
        let u0 = random(d, 2, 9);
        let j = || StencilOperator::new(vec![2.0, -4.0, 2.0], d).unwrap();
        let run = |c: [f64; 4], ctx: &mut StepContext| {
            ctx.newton.tol = 1e-14;
            let ode = PartitionedOde::new(PolynomialTerm::new(d, c), j()).unwrap();
            let traj = integrate(&ode, SchemeId::CrankNicolson, &u0, 0.1, 3, ctx).unwrap();
            (ode, traj)
        };
        let loss = |c: [f64; 4]| {
            let (_, traj) = run(c, &mut StepContext::default());
            0.5 * traj.final_state().dot(traj.final_state())
        };
        let mut ctx = StepContext::default();
        let (ode, traj) = run(coeffs, &mut ctx);
        let (gp, _) = backward_sweep(&ode, &traj, &[(3, traj.final_state().clone())], &mut ctx).unwrap();
        for k in 0..4 {
            let h = 1e-5;
            let mut cp = coeffs;
            cp[k] += h;
            let mut cm = coeffs;
            cm[k] -= h;
            let fd = (loss(cp) - loss(cm)) / (2.0 * h);
            assert!((gp[k] - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "{k}: {} vs {fd}", gp[k]);
        }
    }
}
