//! Differentiable semi-implicit ODE solvers for learning stiff dynamics.
//!
//! The right-hand side is split as `du/dt = G(u) + J u`, where `G` is a learnable
//! nonlinear map (an MLP here) advanced explicitly and `J` is a fixed linear
//! operator advanced implicitly. Each implicit stage is then a *linear* solve with
//! the shifted matrix `I - dt * a_ii * J`, whose factorization is shared by every
//! stage, every time step and every mini-batch column. Gradients come from the
//! discrete adjoint of the stepping scheme, so they agree with the forward map to
//! round-off instead of to truncation error.
//!
//! Module map:
//!
//! * [`tableaux`]: IMEX and explicit Runge-Kutta coefficients, order-condition checks.
//! * [`linalg`]: dense matrices, cached LU with many right-hand sides, restarted GMRES.
//! * [`netcore`]: the MLP with hand-written VJPs, circulant stencils, [`netcore::PartitionedOde`].
//! * [`integrator`]: IMEX, explicit RK and Crank-Nicolson steppers with NFE counters.
//! * [`adjoint`]: the reverse sweep producing parameter and initial-state gradients.
//! * [`training`]: MSE loss, Adam, the mini-batch loop and metrics.
//! * [`datagen`]: FFT, ETDRK4 for Kuramoto-Sivashinsky, Burgers references, dataset files.
//! * [`cli`]: the `imexode` command line.

pub mod adjoint;
pub mod cli;
pub mod datagen;
mod error;
pub mod integrator;
pub mod linalg;
pub mod netcore;
pub mod tableaux;
pub mod training;

pub use error::{Error, FailureClass, Result};
pub use linalg::DenseMatrix;
pub use tableaux::{ButcherTableauPair, SchemeId};
