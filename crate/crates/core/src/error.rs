use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes surfaced by
/// the public operations (configuration, input validation, interception,
/// fusion, audits, losses, metrics, generation, serialization, training).
#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("interception error: {0}")]
    Interception(String),
    #[error("fusion error: {0}")]
    Fusion(String),
    #[error("audit error: {0}")]
    Audit(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration/schema problems,
    /// 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            _ => 3,
        }
    }
}
