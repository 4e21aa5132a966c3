use std::path::{Path, PathBuf};

/// Errors of the file-level tools. [`Error::exit_code`] maps them onto the
/// command-line exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: format error at byte {offset}: {reason}", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{}: unsupported version {found} (expected {expected})", path.display())]
    UnsupportedVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("malformed JSON in {}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] dqformer_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }

    /// 2 for invalid inputs or configuration, 3 for unreadable, unwritable or
    /// malformed files, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::UnsupportedVersion { .. } | Error::Json { .. } => EXIT_IO,
            Error::Config(_) | Error::Validation(_) => EXIT_VALIDATION,
            Error::Core(dqformer_core::Error::Numeric(_)) => EXIT_NUMERIC,
            Error::Core(_) => EXIT_VALIDATION,
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
