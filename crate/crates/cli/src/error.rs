use std::io::ErrorKind;
use std::path::Path;

use proxyseg_core::{BundleError, EvalError, ExportError, NpyError, PamError, SegmentError};
use thiserror::Error;

/// Exit 1 for anything wrong with the inputs or configuration, exit 2 when
/// the filesystem itself fails. A missing input file counts as invalid input.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 1,
            Self::Io(_) => 2,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub fn write(path: &Path, e: std::io::Error) -> Self {
        Self::Io(format!("cannot write {}: {e}", path.display()))
    }

    /// Prefixes the message with the field the failure belongs to.
    pub fn in_field(self, field: &str) -> Self {
        match self {
            Self::Invalid(m) => Self::Invalid(format!("`{field}`: {m}")),
            Self::Io(m) => Self::Io(format!("`{field}`: {m}")),
        }
    }
}

fn io_error(e: &std::io::Error, msg: String) -> CliError {
    if e.kind() == ErrorKind::NotFound {
        CliError::Invalid(msg)
    } else {
        CliError::Io(msg)
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        let msg = e.to_string();
        match &e {
            BundleError::Io { source, .. }
            | BundleError::Array {
                source: NpyError::Io { source, .. },
                ..
            } => io_error(source, msg),
            _ => Self::Invalid(msg),
        }
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        let msg = e.to_string();
        match &e {
            ExportError::Io { source, .. } => io_error(source, msg),
            ExportError::Format { .. } => Self::Invalid(msg),
            ExportError::Png(_) => Self::Io(msg),
        }
    }
}

impl From<SegmentError> for CliError {
    fn from(e: SegmentError) -> Self {
        Self::Invalid(e.to_string())
    }
}

impl From<PamError> for CliError {
    fn from(e: PamError) -> Self {
        Self::Invalid(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::Invalid(e.to_string())
    }
}
