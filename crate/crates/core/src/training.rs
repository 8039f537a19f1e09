//! Fitting `G` to sampled trajectories.
//!
//! Each training example is a pair of consecutive snapshots `(u_t, u_{t+Δ})`. A
//! mini-batch stacks the inputs as columns, integrates them `steps_per_sample`
//! steps with the chosen scheme, scores the result with a mean squared error,
//! runs the reverse sweep and takes one Adam step.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjoint::backward_sweep;
use crate::datagen::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::integrator::{integrate_with, NewtonConfig, NfeCounter, StepContext, Stepper};
use crate::linalg::{DenseMatrix, FactorizationCache, SolverConfig};
use crate::netcore::{ExplicitTerm, PartitionedOde};
use crate::tableaux::SchemeId;

/// Mean squared error over `K` observed blocks and the matching adjoint seeds.
///
/// `loss = Σ_k ‖pred_k - target_k‖² / (K d m)`; the seed for observation `k`
/// is `2 (pred_k - target_k) / (K d m)` tagged with `index[k]`.
pub fn mse_loss(
    pred: &[DenseMatrix],
    target: &[DenseMatrix],
    index: &[usize],
) -> Result<(f64, Vec<(usize, DenseMatrix)>)> {
    check_dim("mse_loss observations", pred.len(), target.len())?;
    check_dim("mse_loss indices", pred.len(), index.len())?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("mse_loss needs at least one observation".into()));
    }
    let (d, m) = pred[0].shape();
    let scale = 1.0 / (pred.len() * d * m) as f64;
    let mut loss = 0.0;
    let mut seeds = Vec::with_capacity(pred.len());
    for ((p, t), &i) in pred.iter().zip(target).zip(index) {
        p.same_shape(t, "mse_loss")?;
        if p.shape() != (d, m) {
            return Err(Error::InvalidArgument("all observations must share one shape".into()));
        }
        let mut diff = p.clone();
        diff.axpy(-1.0, t);
        loss += diff.dot(&diff) * scale;
        diff.scale(2.0 * scale);
        seeds.push((i, diff));
    }
    Ok((loss, seeds))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. The parameters are left untouched when the
/// gradient has a non-finite entry.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    check_dim("adam_step gradient", params.len(), grad.len())?;
    check_dim("adam_step state", params.len(), state.m.len())?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scheme: SchemeId,
    pub dt: f64,
    pub steps_per_sample: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub solver: SolverConfig,
    pub newton: NewtonConfig,
    /// Write elapsed seconds into the metrics. When off the column is 0, which
    /// makes the metrics file reproducible byte for byte.
    pub record_wall_time: bool,
    /// A prediction whose max-norm exceeds this multiple of the largest value in
    /// its batch (inputs and targets) is reported as a blow-up. A one-interval
    /// prediction that far outside the data means the scheme is unstable at `dt`.
    pub max_growth: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeId::ImexRk3,
            dt: 0.2,
            steps_per_sample: 1,
            batch_size: 16,
            epochs: 100,
            adam: AdamConfig::default(),
            seed: 0,
            solver: SolverConfig::default(),
            newton: NewtonConfig::default(),
            record_wall_time: true,
            max_growth: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if !(self.dt > 0.0) || self.batch_size == 0 || self.steps_per_sample == 0 {
            return Err(Error::InvalidArgument(format!(
                "need dt > 0, batch_size >= 1 and steps_per_sample >= 1, got {self:?}"
            )));
        }
        if !(self.max_growth > 1.0) {
            return Err(Error::InvalidArgument(format!("max_growth must exceed 1, got {}", self.max_growth)));
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.eps > 0.0) {
            return Err(Error::InvalidArgument("Adam needs lr >= 0 and eps > 0".into()));
        }
        self.solver.validate()?;
        let span = self.dt * self.steps_per_sample as f64;
        if (span - data.dt_sample()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "dt * steps_per_sample = {span} does not match the sampling interval {}",
                data.dt_sample()
            )));
        }
        if data.n_times() < 2 {
            return Err(Error::InvalidArgument("training needs at least two snapshots per trajectory".into()));
        }
        Ok(())
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub wall_time_s: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    /// Forward `G` evaluations during this epoch.
    pub nfe_fwd: u64,
    /// Reverse products of `G` during this epoch.
    pub nfe_bwd: u64,
    /// LU factorizations since the start of the run, loss evaluations included.
    pub lu_count: u64,
}

pub const METRICS_HEADER: &str = "epoch,wall_time_s,train_loss,test_loss,nfe_fwd,nfe_bwd,lu_count";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let test = self.test_loss.map_or_else(|| "-".to_string(), |t| format!("{t:e}"));
        format!(
            "{},{:.6},{:e},{},{},{},{}",
            self.epoch, self.wall_time_s, self.train_loss, test, self.nfe_fwd, self.nfe_bwd, self.lu_count
        )
    }
}

/// Writes `# key = value` provenance lines, the header and one row per epoch.
pub fn write_metrics_csv(mut w: impl Write, provenance: &[(String, String)], rows: &[MetricsRow]) -> Result<()> {
    for (k, v) in provenance {
        writeln!(w, "# {k} = {v}")?;
    }
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Summary of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    /// Loss on the training pairs before the first update.
    pub initial_train_loss: f64,
    /// Loss on the training pairs after the last update.
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
    /// Counters of the optimization itself. Loss evaluations are excluded except
    /// for LU factorizations, which both share through one cache.
    pub nfe: NfeCounter,
}

/// `(trajectory, time)` of every pair input in the given split.
pub fn training_pairs(data: &Dataset, train: bool) -> Vec<(usize, usize)> {
    (0..data.n_traj())
        .filter(|&tr| data.is_train(tr) == train)
        .flat_map(|tr| (0..data.n_times() - 1).map(move |t| (tr, t)))
        .collect()
}

fn check_growth(pred: &DenseMatrix, input: &DenseMatrix, target: &DenseMatrix, limit: f64) -> Result<()> {
    let scale = input.max_abs().max(target.max_abs());
    let ratio = pred.max_abs() / scale;
    if scale > 0.0 && ratio > limit {
        return Err(Error::UnstablePrediction { ratio, limit });
    }
    Ok(())
}

fn batch_loss<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    stepper: &Stepper,
    data: &Dataset,
    batch: &[(usize, usize)],
    cfg: &TrainConfig,
    ctx: &mut StepContext,
) -> Result<f64> {
    let u0 = data.gather(batch);
    let targets: Vec<(usize, usize)> = batch.iter().map(|&(tr, t)| (tr, t + 1)).collect();
    let target = data.gather(&targets);
    let traj = integrate_with(ode, stepper, &u0, cfg.dt, cfg.steps_per_sample, ctx)?;
    check_growth(traj.final_state(), &u0, &target, cfg.max_growth)?;
    let (loss, _) = mse_loss(&[traj.final_state().clone()], &[target], &[cfg.steps_per_sample])?;
    Ok(loss)
}

/// Mean squared one-interval prediction error over `pairs`, without updating anything.
pub fn evaluate_loss<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    data: &Dataset,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    cache: &mut FactorizationCache,
) -> Result<f64> {
    evaluate_counted(ode, data, pairs, cfg, cache, &mut 0)
}

fn evaluate_counted<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    data: &Dataset,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    cache: &mut FactorizationCache,
    lu_count: &mut u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let stepper = Stepper::for_scheme(cfg.scheme)?;
    let mut ctx = StepContext {
        solver: cfg.solver,
        newton: cfg.newton,
        cache: std::mem::take(cache),
        nfe: NfeCounter::default(),
    };
    let mut total = 0.0;
    let mut result = Ok(());
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        match batch_loss(ode, &stepper, data, chunk, cfg, &mut ctx) {
            Ok(l) => total += l * chunk.len() as f64,
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    *cache = ctx.cache;
    *lu_count += ctx.nfe.lu_factorizations;
    result.map(|_| total / pairs.len() as f64)
}

/// Trains the parameters of `ode.explicit()` in place.
///
/// `on_epoch` sees each metrics row as soon as the epoch ends.
pub fn train<G: ExplicitTerm>(
    ode: &mut PartitionedOde<G>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainReport> {
    cfg.validate(data)?;
    check_dim("train: dataset grid vs model", ode.dim(), data.d())?;
    let stepper = Stepper::for_scheme(cfg.scheme)?;
    let mut pairs = training_pairs(data, true);
    let test_pairs = training_pairs(data, false);
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training trajectories".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ctx = StepContext {
        solver: cfg.solver,
        newton: cfg.newton,
        ..StepContext::default()
    };
    let mut adam = AdamState::new(ode.param_count());
    let start = Instant::now();
    let mut eval_lu = 0;
    let initial_train_loss = evaluate_counted(ode, data, &pairs, cfg, &mut ctx.cache, &mut eval_lu)
        .map_err(|e| in_training(e, 0, 0))?;
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        pairs.shuffle(&mut rng);
        let before = ctx.nfe;
        let mut loss_sum = 0.0;
        for (b, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let mut step = || -> Result<f64> {
                let u0 = data.gather(batch);
                let targets: Vec<(usize, usize)> = batch.iter().map(|&(tr, t)| (tr, t + 1)).collect();
                let target = data.gather(&targets);
                let traj = integrate_with(ode, &stepper, &u0, cfg.dt, cfg.steps_per_sample, &mut ctx)?;
                check_growth(traj.final_state(), &u0, &target, cfg.max_growth)?;
                let (loss, seeds) = mse_loss(&[traj.final_state().clone()], &[target], &[cfg.steps_per_sample])?;
                let (grad, _) = backward_sweep(ode, &traj, &seeds, &mut ctx)?;
                adam_step(ode.params_mut(), &grad, &mut adam, &cfg.adam)?;
                Ok(loss)
            };
            let loss = step().map_err(|e| in_training(e, epoch, b))?;
            loss_sum += loss * batch.len() as f64;
        }
        let test_loss = if test_pairs.is_empty() {
            None
        } else {
            Some(
                evaluate_counted(ode, data, &test_pairs, cfg, &mut ctx.cache, &mut eval_lu)
                    .map_err(|e| in_training(e, epoch, 0))?,
            )
        };
        let row = MetricsRow {
            epoch,
            wall_time_s: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            train_loss: loss_sum / pairs.len() as f64,
            test_loss,
            nfe_fwd: ctx.nfe.forward_g_evals - before.forward_g_evals,
            nfe_bwd: ctx.nfe.backward_vjp_evals - before.backward_vjp_evals,
            lu_count: ctx.nfe.lu_factorizations + eval_lu,
        };
        on_epoch(&row);
        metrics.push(row);
    }

    let final_train_loss = evaluate_counted(ode, data, &pairs, cfg, &mut ctx.cache, &mut eval_lu)
        .map_err(|e| in_training(e, cfg.epochs, 0))?;
    let final_test_loss = match metrics.last() {
        Some(r) => r.test_loss,
        None if test_pairs.is_empty() => None,
        None => Some(
            evaluate_counted(ode, data, &test_pairs, cfg, &mut ctx.cache, &mut eval_lu)
                .map_err(|e| in_training(e, 0, 0))?,
        ),
    };
    let mut nfe = ctx.nfe;
    nfe.lu_factorizations += eval_lu;
    Ok(TrainReport {
        metrics,
        initial_train_loss,
        final_train_loss,
        final_test_loss,
        nfe,
    })
}

fn in_training(e: Error, epoch: usize, batch: usize) -> Error {
    Error::InTraining {
        epoch,
        batch,
        source: Box::new(e),
    }
}

/// Rolls a model out from `u0`, returning `n_samples + 1` snapshots spaced
/// `steps_per_sample` steps apart.
pub fn rollout<G: ExplicitTerm>(
    ode: &PartitionedOde<G>,
    stepper: &Stepper,
    u0: &DenseMatrix,
    dt: f64,
    steps_per_sample: usize,
    n_samples: usize,
    ctx: &mut StepContext,
) -> Result<Vec<DenseMatrix>> {
    let mut out = Vec::with_capacity(n_samples + 1);
    out.push(u0.clone());
    for s in 0..n_samples {
        let next = crate::integrator::advance(ode, stepper, &out[s], dt, steps_per_sample, ctx)
            .map_err(|e| e.at_step(s * steps_per_sample))?;
        out.push(next);
    }
    Ok(out)
}
