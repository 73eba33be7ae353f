use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: quaternion norm {norm} is not 1")]
    InvalidRotation { norm: f64 },

    #[error("{what} = {value} is out of range ({expected})")]
    Range {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("size error: {0}")]
    Size(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown mode: {0}")]
    Mode(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("episode generation failed: {0}")]
    Episode(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("nothing to generate: every frame is marked clean")]
    NothingToGenerate,

    #[error("format error at byte {offset}: {kind}")]
    Format { offset: u64, kind: FormatErrorKind },

    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    DimOverflow,
    Truncated { expected: u64, found: u64 },
    TrailingBytes(u64),
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatErrorKind::BadMagic(m) => write!(f, "bad magic {:?}", String::from_utf8_lossy(m)),
            FormatErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            FormatErrorKind::DimOverflow => write!(f, "dimension product overflows"),
            FormatErrorKind::Truncated { expected, found } => {
                write!(f, "truncated payload: expected {expected} bytes, found {found}")
            }
            FormatErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes after payload"),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Range { .. }
                | Error::Size(_)
                | Error::Shape(_)
                | Error::Mode(_)
                | Error::InvalidRotation { .. }
                | Error::Format { .. }
        )
    }
}
