use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical: {0}")]
    Numerical(#[from] gpabc_core::Error),
    #[error("simulator: {0}")]
    Simulator(String),
    #[error("density: {0}")]
    Density(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::Density(_) => 2,
            HarnessError::Numerical(_) => 3,
            HarnessError::Simulator(_) => 4,
            HarnessError::Io(_) => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
