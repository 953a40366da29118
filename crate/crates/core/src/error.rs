use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("index {index} out of range for extent {extent}")]
    Range { index: usize, extent: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),

    #[error("singular control point configuration: {0}")]
    Singular(String),

    #[error("seed point ({x}, {y}) in frame {frame} hits no body segment")]
    SeedMiss { frame: usize, x: usize, y: usize },

    #[error("no tracks: provide seeds or enable auto-init")]
    NoTracks,

    #[error("frame has no exterior reference region")]
    FrameSkipped,

    #[error("stage {stage} needs {needs} to finish first")]
    Prerequisite { stage: String, needs: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("image encoding error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, SegError>;

impl From<image::ImageError> for SegError {
    fn from(e: image::ImageError) -> Self {
        SegError::Image(e.to_string())
    }
}
