//! Periodic-cell homogenization lab for two-phase conductivities with a
//! Hall (antisymmetric) perturbation.
//!
//! The crate solves periodic corrector problems for possibly non-symmetric
//! piecewise-constant conductivities on structured grids, computes effective
//! tensors, and checks them against exact transform identities (Keller
//! duality, the symmetrizing fractional-linear map and its push-forward) and
//! against explicit high-contrast limits for a cross-like thin structure in
//! the plane and a fiber lattice in space.

pub mod cli;
pub mod closed_form;
pub mod error;
pub mod experiment;
pub mod microstructure;
pub mod solver;
pub mod tensor;

pub use error::Error;
pub use microstructure::{CellGeometry, ConductivityField, PhaseMask};
pub use solver::{EffectiveTensor, SolverConfig};
pub use tensor::{HallVector, Mat2, Mat3, PerturbedPhase};
