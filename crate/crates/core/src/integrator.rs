//! Forward time stepping.
//!
//! [`imex_step`] advances `du/dt = G(u) + J u` with an IMEX Runge-Kutta pair: the
//! explicit half sees `G`, the implicit half sees `J`. Because `J` is linear, every
//! implicit stage is one shifted linear solve whose columns are the mini-batch
//! members. [`erk_step`] and [`crank_nicolson_step`] are the baselines.
//!
//! Every stepper fills a [`StepRecord`] with what the reverse sweep needs, and
//! bumps an [`NfeCounter`].

use std::cell::{Cell, RefCell};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    gmres_best, solve_shifted, DenseMatrix, FactorizationCache, LinearOperator, SolverConfig,
};
use crate::netcore::{ExplicitTerm, PartitionedOde};
use crate::tableaux::{get_tableau, ButcherTableauPair, SchemeId};

/// States whose magnitude passes this bound count as blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e100;

/// Work counters. All fields only ever increase.
///
/// One NFE is one evaluation of `G` on a whole `d x m` block. Reverse-mode
/// products of `G` recompute the forward activations, which costs one more
/// evaluation each; those are tallied in `recompute_g_evals`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NfeCounter {
    pub forward_g_evals: u64,
    pub forward_j_applies: u64,
    pub backward_vjp_evals: u64,
    pub recompute_g_evals: u64,
    pub lu_factorizations: u64,
    pub linear_solves: u64,
    pub krylov_iters: u64,
    pub newton_iters: u64,
}

impl NfeCounter {
    /// Forward-direction evaluations of `G`, including those spent recomputing
    /// activations for reverse products.
    pub fn total_forward_evals(&self) -> u64 {
        self.forward_g_evals + self.recompute_g_evals
    }

    pub fn merge(&mut self, other: &NfeCounter) {
        self.forward_g_evals += other.forward_g_evals;
        self.forward_j_applies += other.forward_j_applies;
        self.backward_vjp_evals += other.backward_vjp_evals;
        self.recompute_g_evals += other.recompute_g_evals;
        self.lu_factorizations += other.lu_factorizations;
        self.linear_solves += other.linear_solves;
        self.krylov_iters += other.krylov_iters;
        self.newton_iters += other.newton_iters;
    }
}

/// Settings for the Crank-Nicolson Newton solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonConfig {
    /// Converged once `‖r‖ <= tol * (1 + ‖u_n‖)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Inner GMRES on the Newton correction.
    pub krylov: SolverConfig,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 25,
            krylov: SolverConfig {
                krylov_tol: 1e-8,
                krylov_maxit: 300,
                restart: 50,
                ..SolverConfig::krylov()
            },
        }
    }
}

/// Mutable state shared by consecutive steps: solver choice, factorization
/// cache and counters.
#[derive(Debug, Default)]
pub struct StepContext {
    pub solver: SolverConfig,
    pub newton: NewtonConfig,
    pub cache: FactorizationCache,
    pub nfe: NfeCounter,
}

impl StepContext {
    pub fn new(solver: SolverConfig) -> Self {
        Self {
            solver,
            ..Self::default()
        }
    }

    /// Solves `(I - alpha J) X = B` (or with `Jᵀ`), updating the counters.
    pub fn solve<G: ExplicitTerm>(
        &mut self,
        ode: &PartitionedOde<G>,
        alpha: f64,
        transposed: bool,
        rhs: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        let before = self.cache.factorizations();
        let (x, iters) = solve_shifted(
            ode.linear(),
            ode.linear_version(),
            alpha,
            transposed,
            rhs,
            &self.solver,
            &mut self.cache,
        )?;
        self.nfe.lu_factorizations += (self.cache.factorizations() - before) as u64;
        self.nfe.krylov_iters += iters as u64;
        self.nfe.linear_solves += 1;
        Ok(x)
    }
}

/// Stage data of one step, consumed by the reverse sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRecord {
    /// Stage states `U_i`. Empty for Crank-Nicolson, whose adjoint only needs
    /// the step endpoints.
    pub stages: Vec<DenseMatrix>,
    /// `G(U_i)`.
    pub g: Vec<DenseMatrix>,
    /// `J U_i`.
    pub ju: Vec<DenseMatrix>,
    pub newton_iterations: usize,
}

/// How a scheme advances one step.
#[derive(Clone, Debug, PartialEq)]
pub enum Stepper {
    Imex(ButcherTableauPair),
    Explicit(ButcherTableauPair),
    CrankNicolson,
}

impl Stepper {
    pub fn for_scheme(scheme: SchemeId) -> Result<Self> {
        Ok(match scheme {
            SchemeId::CrankNicolson => Stepper::CrankNicolson,
            s if s.is_imex() => Stepper::Imex(get_tableau(s)?),
            s => Stepper::Explicit(get_tableau(s)?),
        })
    }

    pub fn tableau(&self) -> Option<&ButcherTableauPair> {
        match self {
            Stepper::Imex(t) | Stepper::Explicit(t) => Some(t),
            Stepper::CrankNicolson => None,
        }
    }

    pub fn step<G: ExplicitTerm>(
        &self,
        ode: &PartitionedOde<G>,
        u_n: &DenseMatrix,
        dt: f64,
        ctx: &mut StepContext,
    ) -> Result<(DenseMatrix, StepRecord)> {
        match self {
            Stepper::Imex(tab) => imex_step(ode, tab, u_n, dt, ctx),
            Stepper::Explicit(tab) => erk_step(ode, tab, u_n, dt, ctx),
            Stepper::CrankNicolson => crank_nicolson_step(ode, u_n, dt, ctx),
        }
    }
}

/// Forward states and stage records of a whole integration.
#[derive(Clone, Debug)]
pub struct StageTrajectory {
    /// `u[0..=N]`, each `d x m`.
    pub u: Vec<DenseMatrix>,
    pub records: Vec<StepRecord>,
    pub dt: f64,
    pub stepper: Stepper,
}

impl StageTrajectory {
    pub fn n_steps(&self) -> usize {
        self.records.len()
    }

    pub fn final_state(&self) -> &DenseMatrix {
        self.u.last().expect("trajectory holds at least the initial state")
    }

    /// Rebuilds `u[n+1]` from `u[n]` and the stored stage evaluations.
    pub fn reconstruct(&self, n: usize) -> Result<DenseMatrix> {
        let rec = self.records.get(n).ok_or(Error::MissingStageRecord(n))?;
        let tab = self.stepper.tableau().ok_or_else(|| {
            Error::InvalidArgument("Crank-Nicolson steps keep no stage evaluations".into())
        })?;
        let mut u = self.u[n].clone();
        for i in 0..tab.stages() {
            u.axpy(self.dt * tab.b()[i], &rec.g[i]);
            u.axpy(self.dt * tab.bt()[i], &rec.ju[i]);
        }
        Ok(u)
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")))
    }
}

fn check_state(x: &DenseMatrix, stage: usize) -> Result<()> {
    if x.data().iter().all(|v| v.is_finite() && v.abs() <= BLOWUP_THRESHOLD) {
        Ok(())
    } else {
        Err(Error::BlowUp { stage })
    }
}

/// One IMEX Runge-Kutta step.
///
/// Stage `i` solves `(I - dt ã_ii J) U_i = u_n + dt Σ_{j<i} (a_ij G(U_j) + ã_ij J U_j)`
/// with all batch columns as right-hand sides of one system; stages with
/// `ã_ii = 0` are plain assignments.
pub fn imex_step<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    tab: &ButcherTableauPair,
    u_n: &DenseMatrix,
    dt: f64,
    ctx: &mut StepContext,
) -> Result<(DenseMatrix, StepRecord)> {
    check_dt(dt)?;
    check_dim("imex_step", ode.dim(), u_n.rows())?;
    let s = tab.stages();
    let mut rec = StepRecord {
        stages: Vec::with_capacity(s),
        g: Vec::with_capacity(s),
        ju: Vec::with_capacity(s),
        newton_iterations: 0,
    };
    for i in 0..s {
        let mut rhs = u_n.clone();
        for j in 0..i {
            let (a, at) = (tab.a(i, j), tab.at(i, j));
            if a != 0.0 {
                rhs.axpy(dt * a, &rec.g[j]);
            }
            if at != 0.0 {
                rhs.axpy(dt * at, &rec.ju[j]);
            }
        }
        let diag = tab.at(i, i);
        let stage = if diag != 0.0 {
            ctx.solve(ode, dt * diag, false, &rhs)?
        } else {
            rhs
        };
        check_state(&stage, i)?;
        let g = ode.eval_g(&stage)?;
        ctx.nfe.forward_g_evals += 1;
        check_state(&g, i)?;
        let ju = ode.apply_j(&stage)?;
        ctx.nfe.forward_j_applies += 1;
        rec.stages.push(stage);
        rec.g.push(g);
        rec.ju.push(ju);
    }
    let mut u = u_n.clone();
    for i in 0..s {
        if tab.b()[i] != 0.0 {
            u.axpy(dt * tab.b()[i], &rec.g[i]);
        }
        if tab.bt()[i] != 0.0 {
            u.axpy(dt * tab.bt()[i], &rec.ju[i]);
        }
    }
    check_state(&u, s)?;
    Ok((u, rec))
}

/// One explicit Runge-Kutta step on the whole right-hand side `G(u) + J u`.
///
/// The pair must carry the same explicit method in both halves.
pub fn erk_step<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    tab: &ButcherTableauPair,
    u_n: &DenseMatrix,
    dt: f64,
    ctx: &mut StepContext,
) -> Result<(DenseMatrix, StepRecord)> {
    if !tab.is_fully_explicit() {
        return Err(Error::InvalidArgument(
            "erk_step needs a pair whose halves are the same explicit method".into(),
        ));
    }
    imex_step(ode, tab, u_n, dt, ctx)
}

/// Newton system matrix `w -> w - dt/2 (f(v + εw) - f(v)) / ε` on flattened blocks.
struct NewtonJacobian<'a, G> {
    ode: &'a PartitionedOde<G>,
    v: &'a DenseMatrix,
    fv: &'a DenseMatrix,
    half_dt: f64,
    evals: Cell<u64>,
    failure: RefCell<Option<Error>>,
}

impl<G: ExplicitTerm> LinearOperator for NewtonJacobian<'_, G> {
    fn dim(&self) -> usize {
        self.v.rows() * self.v.cols()
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let w = DenseMatrix::new(self.v.rows(), self.v.cols(), x.data().to_vec())
            .expect("flattened block has the state's size");
        let wn = w.norm();
        if wn == 0.0 {
            return DenseMatrix::zeros(x.rows(), 1);
        }
        let eps = f64::EPSILON.sqrt() * (1.0 + self.v.norm()) / wn;
        let mut probe = self.v.clone();
        probe.axpy(eps, &w);
        self.evals.set(self.evals.get() + 1);
        let fp = match self.ode.rhs(&probe) {
            Ok(f) => f,
            Err(e) => {
                self.failure.borrow_mut().get_or_insert(e);
                return DenseMatrix::zeros(x.rows(), 1);
            }
        };
        let mut out = w;
        for ((o, a), b) in out.data_mut().iter_mut().zip(fp.data()).zip(self.fv.data()) {
            *o -= self.half_dt * (a - b) / eps;
        }
        DenseMatrix::column_vector(out.into_data())
    }

    fn apply_transpose(&self, _x: &DenseMatrix) -> DenseMatrix {
        unreachable!("GMRES never applies the transpose")
    }
}

/// One Crank-Nicolson step, solved by Jacobian-free Newton-Krylov.
///
/// Newton starts from `u_n`. Each correction comes from GMRES on the
/// finite-difference Jacobian; an inexact correction is accepted when GMRES
/// stalls. Iteration `k` evaluates the residual and stops if it is small enough,
/// so a step that is already solved reports one iteration.
pub fn crank_nicolson_step<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    u_n: &DenseMatrix,
    dt: f64,
    ctx: &mut StepContext,
) -> Result<(DenseMatrix, StepRecord)> {
    check_dt(dt)?;
    check_dim("crank_nicolson_step", ode.dim(), u_n.rows())?;
    let half_dt = 0.5 * dt;
    let f_n = ode.rhs(u_n)?;
    ctx.nfe.forward_g_evals += 1;
    ctx.nfe.forward_j_applies += 1;
    check_state(&f_n, 0)?;
    let tol = ctx.newton.tol * (1.0 + u_n.norm());
    let mut v = u_n.clone();
    let mut fv = f_n.clone();
    let mut history = Vec::new();
    for iter in 1..=ctx.newton.max_iter {
        ctx.nfe.newton_iters += 1;
        if iter > 1 {
            fv = ode.rhs(&v)?;
            ctx.nfe.forward_g_evals += 1;
            ctx.nfe.forward_j_applies += 1;
        }
        let mut r = v.clone();
        r.axpy(-1.0, u_n);
        r.axpy(-half_dt, &f_n);
        r.axpy(-half_dt, &fv);
        let rn = r.norm();
        history.push(rn);
        if !rn.is_finite() {
            return Err(Error::NewtonDivergence { residual_history: history });
        }
        if rn <= tol {
            check_state(&v, 0)?;
            return Ok((
                v,
                StepRecord {
                    newton_iterations: iter,
                    ..StepRecord::default()
                },
            ));
        }
        if iter == ctx.newton.max_iter {
            break;
        }
        let jac = NewtonJacobian {
            ode,
            v: &v,
            fv: &fv,
            half_dt,
            evals: Cell::new(0),
            failure: RefCell::new(None),
        };
        let neg_r: Vec<f64> = r.data().iter().map(|x| -x).collect();
        let out = gmres_best(&jac, &neg_r, &ctx.newton.krylov)?;
        ctx.nfe.forward_g_evals += jac.evals.get();
        ctx.nfe.forward_j_applies += jac.evals.get();
        ctx.nfe.krylov_iters += out.iterations as u64;
        if let Some(e) = jac.failure.into_inner() {
            return Err(e);
        }
        let delta = DenseMatrix::new(v.rows(), v.cols(), out.x)?;
        v.axpy(1.0, &delta);
    }
    Err(Error::NewtonDivergence { residual_history: history })
}

/// Integrates `n_steps` steps of `scheme`, keeping every stage for the reverse sweep.
pub fn integrate<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    scheme: SchemeId,
    u0: &DenseMatrix,
    dt: f64,
    n_steps: usize,
    ctx: &mut StepContext,
) -> Result<StageTrajectory> {
    integrate_with(ode, &Stepper::for_scheme(scheme)?, u0, dt, n_steps, ctx)
}

pub fn integrate_with<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    stepper: &Stepper,
    u0: &DenseMatrix,
    dt: f64,
    n_steps: usize,
    ctx: &mut StepContext,
) -> Result<StageTrajectory> {
    check_dt(dt)?;
    check_dim("integrate", ode.dim(), u0.rows())?;
    check_state(u0, 0).map_err(|e| e.at_step(0))?;
    let mut u = Vec::with_capacity(n_steps + 1);
    let mut records = Vec::with_capacity(n_steps);
    u.push(u0.clone());
    for n in 0..n_steps {
        let (next, rec) = stepper
            .step(ode, &u[n], dt, ctx)
            .map_err(|e| e.at_step(n))?;
        u.push(next);
        records.push(rec);
    }
    Ok(StageTrajectory {
        u,
        records,
        dt,
        stepper: stepper.clone(),
    })
}

/// Like [`integrate_with`] but keeps only the final state.
pub fn advance<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    stepper: &Stepper,
    u0: &DenseMatrix,
    dt: f64,
    n_steps: usize,
    ctx: &mut StepContext,
) -> Result<DenseMatrix> {
    check_dt(dt)?;
    check_dim("advance", ode.dim(), u0.rows())?;
    let mut u = u0.clone();
    for n in 0..n_steps {
        u = stepper.step(ode, &u, dt, ctx).map_err(|e| e.at_step(n))?.0;
    }
    Ok(u)
}

/// Test problem for convergence studies: a mildly stiff periodic diffusion
/// stencil for `J` and a [`PolynomialTerm`](crate::netcore::PolynomialTerm) for `G`
/// on 8 lattice sites.
pub fn convergence_problem() -> Result<(PartitionedOde<crate::netcore::PolynomialTerm>, DenseMatrix)> {
    use crate::linalg::DenseOperator;
    let d = 8;
    let kappa = 5.0;
    let j = DenseMatrix::from_fn(d, d, |r, c| {
        if r == c {
            -2.0 * kappa
        } else if (r + 1) % d == c || (c + 1) % d == r {
            kappa
        } else {
            0.0
        }
    });
    let g = crate::netcore::PolynomialTerm::new(d, [0.3, -0.5, -0.4, 0.6]);
    let ode = PartitionedOde::new(g, DenseOperator::new(j))?;
    let u0 = DenseMatrix::from_fn(d, 1, |i, _| {
        let x = 2.0 * std::f64::consts::PI * i as f64 / d as f64;
        0.8 * x.sin() + 0.3 * (2.0 * x).cos() + 0.1
    });
    Ok((ode, u0))
}

/// One row of a convergence study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergencePoint {
    pub dt: f64,
    /// Max-norm error at the final time against the reference run.
    pub error: f64,
    /// `log2(error(2 dt) / error(dt))`, absent for the coarsest step.
    pub observed_order: Option<f64>,
}

/// Self-convergence study on [`convergence_problem`] up to time `t_final`.
///
/// `dts` must be decreasing and each must divide `t_final` into a whole number of
/// steps. The reference solution uses the same method at `min(dts) / 64`.
pub fn convergence_study(stepper: &Stepper, dts: &[f64], t_final: f64) -> Result<Vec<ConvergencePoint>> {
    if dts.is_empty() {
        return Err(Error::InvalidArgument("convergence study needs at least one step size".into()));
    }
    let (ode, u0) = convergence_problem()?;
    let steps_for = |dt: f64| -> Result<usize> {
        let n = (t_final / dt).round();
        if n < 1.0 || ((n * dt) - t_final).abs() > 1e-9 * t_final {
            return Err(Error::InvalidArgument(format!(
                "step {dt} does not divide the horizon {t_final}"
            )));
        }
        Ok(n as usize)
    };
    let mut ctx = StepContext::default();
    let dt_ref = dts.iter().cloned().fold(f64::INFINITY, f64::min) / 64.0;
    let reference = advance(&ode, stepper, &u0, dt_ref, steps_for(dt_ref)?, &mut ctx)?;
    let mut points: Vec<ConvergencePoint> = Vec::with_capacity(dts.len());
    for &dt in dts {
        let u = advance(&ode, stepper, &u0, dt, steps_for(dt)?, &mut ctx)?;
        let mut diff = u;
        diff.axpy(-1.0, &reference);
        let error = diff.max_abs();
        let observed_order = points
            .last()
            .map(|p| (p.error / error).ln() / (p.dt / dt).ln());
        points.push(ConvergencePoint {
            dt,
            error,
            observed_order,
        });
    }
    Ok(points)
}
