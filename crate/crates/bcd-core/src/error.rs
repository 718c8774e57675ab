use thiserror::Error;

/// Errors raised by tensor math, codec plumbing and the bitstream layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image of {height}x{width} cannot be padded to a multiple of {factor} (requires pad_h={pad_h}, pad_w={pad_w}, but reflect padding needs pad < dim)")]
    UnpaddableImage {
        height: usize,
        width: usize,
        factor: usize,
        pad_h: usize,
        pad_w: usize,
    },

    #[error("bitstream format error: {0}")]
    Format(String),

    #[error("entropy-coded stream exhausted before all symbols were decoded")]
    StreamExhausted,

    #[error("quality level {level} unavailable (container holds levels 1..={available})")]
    LevelUnavailable { level: usize, available: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
