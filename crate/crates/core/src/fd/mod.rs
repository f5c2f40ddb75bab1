//! Monotone finite-difference solver for the adjoint PDE system.

pub mod banded;
pub mod operator;
pub mod source;
pub mod sweep;

pub use banded::ImplicitSystem;
pub use operator::{MonotoneOperator, NodeCoefficients};
pub use source::{assemble_source, SliceData};
pub use sweep::{backward_sweep, build_operator, slice_measures, solve_backward, AdjointField, SweepOptions};
