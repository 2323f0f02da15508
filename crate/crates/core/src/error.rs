use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum CodaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at {locus}")]
    Numerical { locus: String },
    #[error("integration failed at step {step} (stage {stage}){context}")]
    Integration {
        step: usize,
        stage: usize,
        context: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("adaptation diverged: {0}")]
    Adaptation(String),
    #[error("singular context system (condition number {condition:e})")]
    SingularHessian { condition: f64 },
    #[error("degenerate least-squares design: {0}")]
    DegenerateFit(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CodaError {
    /// Attaches a location suffix to integration errors, leaving others untouched.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            CodaError::Integration {
                step,
                stage,
                context,
            } => CodaError::Integration {
                step,
                stage,
                context: format!("{context} [{}]", ctx.as_ref()),
            },
            other => other,
        }
    }
}

pub type Result<T, E = CodaError> = std::result::Result<T, E>;
