//! Reference data for the learning experiments.
//!
//! Kuramoto-Sivashinsky trajectories come from a spectral ETDRK4 solver on top
//! of an in-house radix-2 FFT. Burgers trajectories come from the same
//! finite-difference discretization the models learn, integrated with the
//! fifth-order IMEX pair at a fine step. Both are stored in the `SINODS01`
//! binary format.

mod burgers;
mod dataset;
mod fft;
mod ks;

pub use burgers::{
    burgers_initial_conditions, burgers_system, generate_burgers, integrate_burgers, BurgersAdvection,
    BurgersConfig,
};
pub use dataset::{read_header, Dataset, DatasetHeader, DATASET_MAGIC, DATASET_VERSION, HEADER_BYTES};
pub use fft::{fft, ifft, FftPlan};
pub use ks::{generate_ks, ks_initial_condition, ks_self_convergence, KsConfig, KsSolver};
