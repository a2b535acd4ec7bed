use thiserror::Error;

use crate::tensor::OpKind;

pub type Result<T, E = TmuError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TmuError {
    #[error("memory access [{addr:#x}, {addr:#x}+{len}) outside capacity {capacity:#x}")]
    OutOfBounds { addr: u64, len: u64, capacity: u64 },

    #[error("{op}: invalid shape: {reason}")]
    Shape { op: &'static str, reason: String },

    #[error("{op}: missing required parameter `{field}`")]
    MissingParam { op: OpKind, field: &'static str },

    #[error("{op}: parameter `{field}` is not accepted by this operator")]
    UnexpectedParam { op: OpKind, field: &'static str },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("operator {0} has no realization on this path")]
    Unsupported(OpKind),

    #[error("affine map produced a non-integral component {component} = {value}")]
    NonIntegral { component: usize, value: String },

    #[error("index {index:?} outside extent {extent:?}")]
    IndexOutOfRange { index: [u64; 3], extent: [u64; 3] },

    #[error("address {addr:#x} outside destination extent [{base:#x}, {base:#x}+{len})")]
    AddressOutOfRange { addr: u64, base: u64, len: u64 },

    #[error("tensor regions overlap: {0}")]
    Overlap(String),

    #[error("segment cursor advanced past completion")]
    CursorDone,

    #[error("decode: {0}")]
    Decode(#[from] DecodeError),

    #[error("rme: {0}")]
    Mask(String),

    #[error("lane count mismatch: {left} vs {right}")]
    LaneMismatch { left: usize, right: usize },

    #[error("buffer overflow: {need} bytes into buffer of {capacity}")]
    BufferOverflow { need: u64, capacity: u64 },

    #[error("engine: {0}")]
    Engine(String),

    #[error("scheduler deadlock at cycle {cycle}: {pending} segments pending")]
    Deadlock { cycle: u64, pending: usize },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("truncated stream: needed {needed} more words at word {at}")]
    Truncated { at: usize, needed: usize },
    #[error("length prefix {declared} bytes does not fit block of {available} bytes")]
    LengthMismatch { declared: usize, available: usize },
    #[error("bad magic or version in program header")]
    BadHeader,
    #[error("program is missing its terminating HALT")]
    MissingHalt,
    #[error("malformed field: {0}")]
    Field(String),
}

impl From<std::io::Error> for TmuError {
    fn from(e: std::io::Error) -> Self {
        TmuError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for TmuError {
    fn from(e: serde_json::Error) -> Self {
        TmuError::Io(e.to_string())
    }
}
