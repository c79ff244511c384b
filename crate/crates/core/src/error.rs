use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed content in {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },

    /// A domain invariant failed; `field` is a path such as `layout[3]`.
    #[error("invalid {field}: {msg}")]
    Invalid { field: String, msg: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported major version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("length mismatch: expected {expected} bytes, found {actual} bytes")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("band grids differ: {0}")]
    BandGridMismatch(String),

    #[error("too few valid bands: {found} < {required}")]
    TooFewBands { found: usize, required: usize },

    #[error("zero-norm spectrum")]
    ZeroNorm,

    #[error("singular homography for lens {lens}")]
    SingularHomography { lens: usize },

    #[error("region of interest out of bounds: {0}")]
    RoiOutOfBounds(String),

    #[error("white reference unusable: every band invalid")]
    UnusableWhiteReference,

    #[error("empty reference library")]
    EmptyLibrary,

    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },

    #[error("png export failed: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than by the program.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Png(_))
    }
}
