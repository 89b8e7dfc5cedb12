use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// Invalid config file, flags or an unusable output location.
    pub const CONFIG: u8 = 2;
    /// Missing, unreadable or corrupt dataset, run or checkpoint files.
    pub const DATA: u8 = 3;
    /// Training or evaluation failed (non-finite loss, interruption, I/O).
    pub const RUNTIME: u8 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] fscil_core::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use fscil_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(E::Config(_) | E::Validation(_)) => exit::CONFIG,
            CliError::Core(
                E::Ingestion { .. }
                | E::CorruptFile { .. }
                | E::InsufficientData { .. }
                | E::Checkpoint(_),
            ) => exit::DATA,
            CliError::Core(_) | CliError::Io(_) => exit::RUNTIME,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
