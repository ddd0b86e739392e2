use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("no fonts found under {0}")]
    NoFonts(PathBuf),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("need ≥2 fonts for negatives")]
    TooFewFonts,

    #[error("need ≥2 characters for negatives")]
    TooFewChars,

    #[error("glyph missing: font {font}, char {ch}")]
    MissingGlyph { font: String, ch: String },

    #[error("no candidates for (font {font}, char {ch})")]
    NoCandidates { font: usize, ch: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss term {term} at step {step}; last good checkpoint: {last_checkpoint:?}")]
    Diverged {
        term: String,
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("preference table format: {0}")]
    PrefFormat(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("backbone unavailable: {0}")]
    Unavailable(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs or the filesystem.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }

    /// True for filesystem and decoding failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Image { .. }
                | Error::NoFonts(_)
                | Error::PrefFormat(_)
                | Error::Checkpoint(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
