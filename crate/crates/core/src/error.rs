use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading or writing rasters.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported bit depth {depth} in {path} (only 8-bit rasters are accepted)")]
    UnsupportedBitDepth { path: PathBuf, depth: u8 },
    #[error("unsupported color type {kind} in {path}")]
    UnsupportedColorType { path: PathBuf, kind: String },
    #[error("truncated or corrupt PNG stream in {path}: {reason}")]
    Truncated { path: PathBuf, reason: String },
    #[error("cannot write {path}: {reason}")]
    Unwritable { path: PathBuf, reason: String },
    #[error("image dimensions must be at least 1x1, got {height}x{width}")]
    Empty { height: usize, width: usize },
    #[error("buffer of {got} values does not match {height}x{width}x3")]
    BadBuffer {
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("non-finite pixel value at index {0}")]
    NonFinite(usize),
    #[error("image too small: {height}x{width} (minimum side {min})")]
    TooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Mismatch(Vec<usize>, Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

/// Top-level error for the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Text(#[from] crate::style::TextParseError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::CheckpointError),
    #[error(transparent)]
    Optim(#[from] crate::autodiff::OptimError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite attribute value at index {0}")]
    NanAttribute(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
