use dfc_core::DfcError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] DfcError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Invalid-argument errors from the library, reported as usage errors.
    pub fn usage(e: DfcError) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 usage, 3 numerical failure, 4 insufficient excitation, 1 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_insufficient_excitation() => 4,
            CliError::Core(DfcError::Invalid(_) | DfcError::Dimension(_)) => 2,
            CliError::Core(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(DfcError::NotStabilizable).exit_code(), 3);
        assert_eq!(CliError::from(DfcError::Dimension("k".into())).exit_code(), 2);
        let rank = DfcError::InsufficientExcitation { singular_values: vec![1.0, 0.0] };
        assert_eq!(CliError::from(rank).exit_code(), 4);
    }
}
