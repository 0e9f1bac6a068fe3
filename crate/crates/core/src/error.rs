use thiserror::Error;

/// Every failure the toolkit can report.
///
/// [`Error::category`] gives a stable, machine-readable tag that the CLI
/// prints alongside a nonzero exit status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("singular basis matrix ({dim}x{dim})")]
    SingularBasis { dim: usize },

    #[error("solver did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("cutoff is unbounded: fixpoint not reached after {escalations} escalations")]
    UnboundedCutoff { escalations: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate score: {0}")]
    DegenerateScore(String),

    #[error("insufficient data: {have} rows, need at least {need}")]
    InsufficientData { have: usize, need: usize },

    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGradient { step: usize, detail: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::DegenerateDesign(_) => "degenerate_design",
            Error::SingularBasis { .. } => "singular_basis",
            Error::NotConverged { .. } => "not_converged",
            Error::UnboundedCutoff { .. } => "unbounded_cutoff",
            Error::Contract(_) => "contract",
            Error::DegenerateScore(_) => "degenerate_score",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
