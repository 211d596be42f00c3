use netmor_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(CoreError),
    #[error("reduction did not converge: {0}")]
    Unconverged(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<CoreError> for CliError {
    /// Rejected specifications are config errors; everything else is numerical.
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidSpec(_)
            | CoreError::MeshNotIntegral { .. }
            | CoreError::MeshTooCoarse { .. }
            | CoreError::Topology(_)
            | CoreError::InvalidReduction(_) => CliError::Config(e.to_string()),
            other => CliError::Numerical(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Unconverged(_) => 4,
            CliError::Io { .. } => 1,
        }
    }
}
