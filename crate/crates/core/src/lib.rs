//! Mean-field control by accelerated proximal gradient with a monotone
//! finite-difference adjoint solver and interacting particles.

pub mod config;
pub mod emreg;
pub mod error;
pub mod experiment;
pub mod fd;
pub mod grid;
pub mod nag;
pub mod particles;
pub mod problem;
pub mod problems;
pub mod prox;
pub mod riccati;
pub mod rng;

pub use error::{Error, Result};
pub use grid::{GridField, PolicyField, SpaceTimeGrid};
pub use problem::{Dims, EmpiricalMeasure, KernelSlice, MfcProblem};
pub use prox::ProxSpec;
