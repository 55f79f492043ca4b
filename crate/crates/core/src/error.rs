use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes disagree.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// An operation that needs at least one element got none.
    Empty(&'static str),
    /// Box coordinates out of range or degenerate.
    InvalidBox([f64; 4]),
    /// Attention mask with a zero on the diagonal.
    MaskDiagonal(usize),
    /// Multi-label target outside {0, 1}.
    InvalidTarget(f64),
    /// A NaN or infinity where a finite value was required.
    NonFinite(&'static str),
    UnknownClass(u32),
    UnknownParam(String),
    /// Backward requested on a tape with no recorded forward pass.
    NoForward,
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "shape mismatch in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::Empty(what) => write!(f, "{what}: empty input"),
            Error::InvalidBox(b) => write!(f, "invalid box {b:?}"),
            Error::MaskDiagonal(i) => write!(f, "mask diagonal entry {i} is zero"),
            Error::InvalidTarget(y) => write!(f, "target {y} is not 0 or 1"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::UnknownClass(c) => write!(f, "unknown object class {c}"),
            Error::UnknownParam(name) => write!(f, "unknown parameter `{name}`"),
            Error::NoForward => f.write_str("no forward pass recorded"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
