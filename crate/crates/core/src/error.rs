//! Error type shared across the library.

use std::fmt;

/// Errors produced by model construction, estimation, and simulation.
#[derive(Debug)]
pub enum DispatchError {
    /// A constructor or operation received an argument outside its domain.
    InvalidParameter(String),
    /// Matrix/vector dimensions do not agree.
    DimensionMismatch { expected: usize, got: usize },
    /// An empty collection where at least one element is required.
    EmptyPopulation,
    /// An iterative solver did not reach its tolerance.
    NonConvergence(String),
    /// Estimated AR polynomial has roots on or outside the unit circle.
    UnstableFit(String),
    /// Closed-loop poles on or outside the unit circle.
    UnstableLoop(String),
    /// Not enough data for the requested estimate.
    InsufficientData { required: usize, got: usize },
    /// Frequency-grid point coincides with a non-deflated unit-circle pole.
    SingularResolvent(f64),
    /// No corrective action keeps the QoS metric inside its bounds.
    InfeasibleBounds(String),
    /// NRMSE is undefined for a zero reference signal.
    ZeroReference,
    /// Configuration file is invalid.
    Config(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for DispatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Self::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Self::EmptyPopulation => write!(f, "empty population"),
            Self::NonConvergence(msg) => write!(f, "no convergence: {msg}"),
            Self::UnstableFit(msg) => write!(f, "unstable fit: {msg}"),
            Self::UnstableLoop(msg) => write!(f, "unstable closed loop: {msg}"),
            Self::InsufficientData { required, got } => {
                write!(f, "insufficient data: need at least {required}, got {got}")
            }
            Self::SingularResolvent(theta) => {
                write!(f, "singular resolvent at theta = {theta}")
            }
            Self::InfeasibleBounds(msg) => write!(f, "infeasible QoS bounds: {msg}"),
            Self::ZeroReference => write!(f, "zero reference signal"),
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for DispatchError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for DispatchError {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, DispatchError>;
