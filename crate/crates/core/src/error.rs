use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the admissible range of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// The explicit integrator left the trusted region `|u| <= limit`.
    #[error(
        "blow-up at t = {t}: |u| = {norm:.3e} exceeds {limit:.3e} (step too large or coefficient condition violated)"
    )]
    BlowUp { t: f64, norm: f64, limit: f64 },

    #[error("degenerate fit: only {valid} valid increment levels (need at least 3)")]
    DegenerateFit { valid: usize },

    /// Config validation failure; `pointer` is the dotted path of the offending key.
    #[error("invalid config at `{pointer}`: {message}")]
    Config { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::BlowUp { .. } | Error::DegenerateFit { .. })
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
