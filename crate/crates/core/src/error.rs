use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    DimensionMismatch {
        expected: usize,
        found: usize,
    },
    /// An operation that needs at least one input got none.
    Empty(&'static str),
    /// `floor * dim > total` for a simplex projection.
    InfeasibleSimplex {
        dim: usize,
        total: f64,
        floor: f64,
    },
    /// Conjugate gradients stopped at `max_iter` with residual above tolerance.
    SolverNotConverged {
        iterations: usize,
        residual: f64,
        target: f64,
    },
    InvalidConfig {
        field: &'static str,
        reason: String,
    },
    /// A sensitive group has no samples where at least one is required.
    EmptyGroup {
        group: usize,
    },
    /// A group has fewer samples than an operation needs.
    InsufficientGroup {
        group: usize,
        required: usize,
        available: usize,
    },
    WrongBatchKind {
        expected: crate::oracle::BatchKind,
        found: crate::oracle::BatchKind,
    },
    NonFinite(&'static str),
    /// Failure inside the engine loop, tagged with the step index.
    AtStep {
        step: usize,
        source: Box<Error>,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::InfeasibleSimplex { dim, total, floor } => write!(
                f,
                "infeasible simplex: floor {floor} * dim {dim} exceeds total {total}"
            ),
            Error::SolverNotConverged {
                iterations,
                residual,
                target,
            } => write!(
                f,
                "conjugate gradients did not converge after {iterations} iterations \
                 (residual {residual:e}, target {target:e}); check conditioning or strong convexity"
            ),
            Error::InvalidConfig { field, reason } => write!(f, "invalid `{field}`: {reason}"),
            Error::EmptyGroup { group } => write!(f, "group {group} has no samples"),
            Error::InsufficientGroup {
                group,
                required,
                available,
            } => write!(
                f,
                "group {group} needs {required} samples but has {available} (deficit {})",
                required - available
            ),
            Error::WrongBatchKind { expected, found } => {
                write!(
                    f,
                    "minibatch kind {found:?} passed where {expected:?} is required"
                )
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::AtStep { step, source } => write!(f, "step {step}: {source}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::AtStep { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
