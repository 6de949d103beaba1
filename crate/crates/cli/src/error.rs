use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("could not write plot {path}: {message}")]
    Plot { path: PathBuf, message: String },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] d2ip_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use d2ip_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingInput(_) | CliError::Plot { .. } | CliError::Csv { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) => EXIT_CONFIG,
                E::Io { .. } | E::Format { .. } => EXIT_IO,
                E::DegenerateOperator { .. } | E::Numerical { .. } | E::UndefinedMetric(_) => EXIT_NUMERICAL,
            },
        }
    }

    pub fn plot(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Plot {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn csv(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
