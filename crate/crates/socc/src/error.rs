use std::io;
use std::path::PathBuf;

/// Errors from file handling and the command line, wrapping engine errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] socc_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// An engine error tied to a specific file.
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: socc_core::Error },
    /// The gradient suite found mismatches.
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Core(socc_core::Error::Config(msg.into()))
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Core(socc_core::Error::MalformedInput(msg.into()))
    }

    fn core(&self) -> Option<&socc_core::Error> {
        match self {
            Error::Core(e) | Error::File { source: e, .. } => Some(e),
            _ => None,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self.core() {
            Some(socc_core::Error::Config(_)) => 2,
            Some(socc_core::Error::Numerical(_)) => 4,
            Some(_) => 3,
            None => match self {
                Error::GradCheck(_) => 4,
                _ => 3,
            },
        }
    }
}

/// Attaches a path to engine errors.
pub(crate) trait WithPath<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> WithPath<T> for socc_core::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::File { path: path.to_path_buf(), source })
    }
}
