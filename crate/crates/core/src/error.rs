//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    MissingFile(PathBuf),
    CorruptHeader(String),
    NonFiniteData(String),
    InvalidSpacing(String),
    CropTooLarge(String),
    MissingSlice(usize),
    DuplicateSlice(usize),
    MixedParents(String, String),
    ShapeTooSmall(String),
    ShapeMismatch(String),
    NonFiniteInput(String),
    KOutOfRange { k: usize, hw: usize },
    TooFewNegatives { requested: usize, available: usize },
    EmptyDataset(String),
    /// Training hit a non-finite loss. Carries the checkpoint of the last
    /// epoch whose recorded losses were all finite.
    DivergenceDetected {
        epoch: usize,
        last_finite: Box<crate::checkpoint::Checkpoint>,
    },
    IncompatibleCheckpoint(String),
    EmptyEnsemble,
    EmptyLabeledSet,
    EmptyMask { label: u8 },
    LengthMismatch { left: usize, right: usize },
    ZeroVariance,
    TooFewSamples(usize),
    ConfigInvalid(String),
    HashMismatch { path: PathBuf, expected: String, actual: String },
    IoFailure(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            Error::CorruptHeader(m) => write!(f, "corrupt header: {m}"),
            Error::NonFiniteData(m) => write!(f, "non-finite data: {m}"),
            Error::InvalidSpacing(m) => write!(f, "invalid spacing: {m}"),
            Error::CropTooLarge(m) => write!(f, "crop too large: {m}"),
            Error::MissingSlice(z) => write!(f, "missing slice at z={z}"),
            Error::DuplicateSlice(z) => write!(f, "duplicate slice at z={z}"),
            Error::MixedParents(a, b) => {
                write!(f, "slices from mixed parents: {a:?} vs {b:?}")
            }
            Error::ShapeTooSmall(m) => write!(f, "shape too small: {m}"),
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::NonFiniteInput(m) => write!(f, "non-finite input: {m}"),
            Error::KOutOfRange { k, hw } => {
                write!(f, "k={k} out of range for HW={hw}")
            }
            Error::TooFewNegatives { requested, available } => {
                write!(f, "requested {requested} negatives but only {available} available")
            }
            Error::EmptyDataset(m) => write!(f, "empty dataset: {m}"),
            Error::DivergenceDetected { epoch, .. } => {
                write!(f, "training diverged at epoch {epoch} (non-finite loss)")
            }
            Error::IncompatibleCheckpoint(m) => write!(f, "incompatible checkpoint: {m}"),
            Error::EmptyEnsemble => write!(f, "ensemble has no members"),
            Error::EmptyLabeledSet => write!(f, "labeled set is empty"),
            Error::EmptyMask { label } => write!(f, "mask has no voxels with label {label}"),
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Error::ZeroVariance => write!(f, "zero variance in paired differences"),
            Error::TooFewSamples(n) => write!(f, "too few samples: {n}"),
            Error::ConfigInvalid(m) => write!(f, "invalid config: {m}"),
            Error::HashMismatch { path, expected, actual } => write!(
                f,
                "hash mismatch for {}: expected {expected}, got {actual}",
                path.display()
            ),
            Error::IoFailure(m) => write!(f, "I/O failure: {m}"),
            Error::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
