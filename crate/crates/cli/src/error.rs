use std::fmt;

use nfs_core::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        CliError { code: EXIT_CONFIG, message }
    }

    pub fn data(message: String) -> Self {
        CliError { code: EXIT_DATA, message }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) | Error::Dimension { .. } | Error::TomlDe(_) | Error::TomlSer(_) => EXIT_CONFIG,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => EXIT_NUMERIC,
        Error::Data(_)
        | Error::Ingestion { .. }
        | Error::Csv(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Checkpoint(_)
        | Error::TaskMismatch(_)
        | Error::LabelOutOfRange { .. }
        | Error::UndefinedMetric(_)
        | Error::EmptyBatch => EXIT_DATA,
        _ => EXIT_OTHER,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError { code: exit_code(&err), message: err.to_string() }
    }
}
