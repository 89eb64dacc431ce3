use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported dtype {dtype} for tensor {name:?}")]
    UnsupportedDType { name: String, dtype: String },

    #[error("corrupt tensor {name:?}: {reason}")]
    CorruptTensor { name: String, reason: String },

    #[error("checksum mismatch in {what}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        what: String,
        stored: u32,
        computed: u32,
    },

    #[error("unsupported container version {found} (max supported {supported})")]
    Version { found: u16, supported: u16 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("oracle size cap exceeded: {len} values > cap {cap}")]
    OracleCap { len: usize, cap: usize },

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
