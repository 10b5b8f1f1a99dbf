use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}: no such file", path.display())]
    NotFound { path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: d2m_core::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Core(#[from] d2m_core::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            Error::NotFound { path: path.to_path_buf() }
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn input(path: &Path) -> impl FnOnce(d2m_core::Error) -> Self + '_ {
        move |source| Error::Input {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 usage/validation, 3 I/O, 4 internal invariant violation.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) | Error::NotFound { .. } | Error::Csv { .. } => 2,
            Error::Io { .. } => 3,
            Error::Input { source, .. } | Error::Core(source) => core_code(source),
            Error::Internal(_) => 4,
        }
    }
}

fn core_code(e: &d2m_core::Error) -> u8 {
    use d2m_core::Error as E;
    match e {
        E::Io(inner) if inner.kind() == io::ErrorKind::NotFound => 2,
        E::Io(_) => 3,
        E::VerificationFailure { .. } => 4,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let p = Path::new("x");
        assert_eq!(Error::io(p, io::Error::from(io::ErrorKind::NotFound)).exit_code(), 2);
        assert_eq!(Error::io(p, io::Error::from(io::ErrorKind::PermissionDenied)).exit_code(), 3);
        assert_eq!(Error::from(d2m_core::Error::DegenerateCalibration).exit_code(), 2);
        let v = d2m_core::Error::VerificationFailure {
            check: "depth".into(),
            detail: String::new(),
        };
        assert_eq!(Error::from(v).exit_code(), 4);
        assert_eq!(Error::Internal("x".into()).exit_code(), 4);
    }
}
