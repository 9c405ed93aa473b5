use thiserror::Error;

/// Errors raised by the estimators, generators and metrics.
#[derive(Debug, Error)]
pub enum EsiError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The data carry no information for the requested quantity
    /// (zero variance, exact fit, empty estimate, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    /// A failure inside one stage of a multi-stage solver.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<EsiError>,
    },
}

impl EsiError {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        EsiError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage labels stripped.
    pub fn root(&self) -> &EsiError {
        match self {
            EsiError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, EsiError>;

pub(crate) fn ensure_finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(EsiError::InvalidInput(format!("{what} must be finite, got {value}")))
    }
}
