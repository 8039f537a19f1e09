//! The book's chapters as rustdoc modules, so `cargo test` runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/imex_stepping.md")]
pub mod imex_stepping {}

#[doc = include_str!("../../../book/src/discrete_adjoint.md")]
pub mod discrete_adjoint {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/data_generation.md")]
pub mod data_generation {}

#[doc = include_str!("../../../book/src/command_line.md")]
pub mod command_line {}
