//! Command implementations behind the `swn` binary.

pub mod commands;
pub mod config;
pub mod svg;

pub use commands::{ablate, ablate_cmd, eval_cmd, gradcheck_cmd, make_data, sample_cmd, train_cmd};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] swavenet::Error),
}

impl CliError {
    /// 1 for failed checks, 2 for usage and configuration errors, 3 for
    /// numeric aborts.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(swavenet::Error::NumericAbort { .. } | swavenet::Error::NonFinite { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}
