//! Error types shared across the crate.

use std::io;
use thiserror::Error;

/// Errors from exact small-matrix algebra and the Dykhne transform pipeline.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("matrix is numerically singular (det = {det:.3e})")]
    Singular { det: f64 },

    /// The symmetrizing transform does not exist: h = 0 or the two phases
    /// share the same Hall coefficient. Callers bypass with the identity map.
    #[error("degenerate transform: h = 0 or matching Hall coefficients")]
    DegenerateTransform,

    /// The Mobius image of a phase failed to be real; the coefficients do not
    /// belong to this phase pair.
    #[error("transform produced a non-real phase (|Im|/|Re| = {im_ratio:.3e})")]
    NonRealTransform { im_ratio: f64 },

    #[error("transform produced a non-positive phase ({value:.6e})")]
    NonPositiveTransform { value: f64 },

    #[error("no admissible root: {reason}")]
    NoAdmissibleRoot { reason: String },

    #[error("invalid phase: {0}")]
    InvalidPhase(String),
}

/// Errors from cell geometry and rasterized microstructures.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{0}")]
    Parameter(String),

    #[error(
        "feature of size {feature} spans fewer than {required} elements at resolution {resolution}"
    )]
    UnderResolved {
        feature: f64,
        required: u32,
        resolution: u32,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Errors from reading or writing mask files.
#[derive(Debug, Error)]
pub enum MaskError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unsupported dimension d={dim}")]
    UnsupportedDimension { line: usize, dim: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("invalid mask geometry: {0}")]
    Geometry(#[from] GeometryError),
}

/// Errors from the periodic cell solver.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "no convergence after {iterations} iterations (best relative residual {residual:.3e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("empty mask: averaging set has no elements")]
    EmptyMask,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Crate-wide error used by the experiment and CLI layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Geometry(#[from] GeometryError),

    #[error(transparent)]
    Mask(#[from] MaskError),

    #[error(transparent)]
    Solver(#[from] SolverError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0} sweep term(s) failed; partial results were written")]
    SweepFailures(usize),

    #[error(transparent)]
    Io(#[from] io::Error),
}
