use thiserror::Error;

/// Errors raised by the numerical engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QprocError {
    #[error("invalid dimension {dim}: {reason}")]
    InvalidDimension { dim: usize, reason: &'static str },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("event has zero measure (weight {weight:e})")]
    ZeroMeasureEvent { weight: f64 },

    #[error("coherent state exceeds the Fock cutoff: estimated tail mass {tail_mass:e}")]
    TruncationOverflow { tail_mass: f64 },

    #[error("integration region too small: tail estimate {tail:e} exceeds {tolerance:e}")]
    RegionTooSmall { tail: f64, tolerance: f64 },

    #[error("quadrature did not converge: error estimate {error:e} exceeds {tolerance:e}")]
    QuadratureNonconvergence { error: f64, tolerance: f64 },

    #[error("series expansion did not converge: successive orders differ by {difference:e}")]
    SeriesNonconvergence { difference: f64 },

    #[error("wrong engine kind: {0}")]
    WrongEngine(&'static str),

    #[error("every conditioning pair has zero measure")]
    EmptyConditioning,

    #[error("unsupported observable: {0}")]
    UnsupportedObservable(String),

    #[error("unknown observable id '{0}'")]
    UnknownObservable(String),

    #[error("phase undetermined: fringe amplitude {rho:e} below the noise floor")]
    PhaseUndetermined { rho: f64 },

    #[error("degenerate kernel: only {retained} modes above threshold")]
    DegenerateKernel { retained: usize },

    #[error("projected propagator leaks out of the subspace: unitarity defect {defect:e}")]
    SubspaceLeakage { defect: f64 },

    #[error("time step too large: eigenphase {max_phase} leaves the principal branch window")]
    DtTooLarge { max_phase: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("resolution error: {0}")]
    Resolution(String),
}

pub type Result<T> = std::result::Result<T, QprocError>;

impl QprocError {
    /// True for truncation and quadrature failures (the CLI maps these to exit code 3).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            QprocError::TruncationOverflow { .. }
                | QprocError::QuadratureNonconvergence { .. }
                | QprocError::SeriesNonconvergence { .. }
                | QprocError::RegionTooSmall { .. }
                | QprocError::PhaseUndetermined { .. }
                | QprocError::DegenerateKernel { .. }
                | QprocError::SubspaceLeakage { .. }
                | QprocError::DtTooLarge { .. }
                | QprocError::ZeroMeasureEvent { .. }
                | QprocError::EmptyConditioning
        )
    }
}
