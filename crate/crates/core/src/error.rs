use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Contract violations raised by the kernels, the model and the trainers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A mask row with no admissible entry was handed to a softmax.
    EmptyMaskRow { row: usize },
    TopkTooLarge { k: usize, len: usize },
    /// A keep-rate selection would drop every token of a non-empty set.
    EmptyKeepSet { len: usize, rate: f64 },
    EmptyInput(&'static str),
    SequenceTooLong { len: usize, max: usize },
    PositionConflict { position: usize, last: usize },
    TokenOutOfRange { token: usize, vocab: usize },
    InvalidTemperature(f64),
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::EmptyMaskRow { row } => write!(f, "mask row {row} has no admissible entry"),
            Error::TopkTooLarge { k, len } => write!(f, "top-k with k={k} over {len} scores"),
            Error::EmptyKeepSet { len, rate } => {
                write!(f, "keep rate {rate} keeps no token out of {len}")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
            Error::PositionConflict { position, last } => write!(
                f,
                "position {position} does not follow the last cached position {last}"
            ),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} outside vocabulary of {vocab}")
            }
            Error::InvalidTemperature(t) => write!(f, "temperature must be positive, got {t}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
