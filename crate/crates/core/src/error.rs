use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("key generation failed: {0}")]
    KeygenFailure(String),

    #[error("plaintext out of range: {0}")]
    Domain(String),

    #[error("malformed ciphertext: {0}")]
    MalformedCiphertext(String),

    #[error("ciphertext does not match key context: {0}")]
    KeyMismatch(String),

    #[error("fixed-point encoding overflow: |{value}| * 2^{frac_bits} exceeds n/2")]
    EncodeOverflow { value: f64, frac_bits: u32 },

    #[error("overflow budget exceeded at layer {layer}: needs a modulus of at least {required_bits} bits, have {available_bits}")]
    OverflowBudget {
        layer: usize,
        required_bits: u64,
        available_bits: u64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scale mismatch: expected 2^-{expected}, got 2^-{got}")]
    ScaleMismatch { expected: u32, got: u32 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("protocol error (code {code}): {message}")]
    Protocol { code: u16, message: String },

    #[error("protocol order violation: {0}")]
    OrderViolation(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wire error code used when this error aborts a protocol session.
    pub fn protocol_code(&self) -> u16 {
        match self {
            Error::Protocol { code, .. } => *code,
            Error::OrderViolation(_) => codes::ORDER_VIOLATION,
            Error::KeyMismatch(_) => codes::KEY_MISMATCH,
            Error::OverflowBudget { .. } => codes::BUDGET,
            Error::Shape(_) | Error::ScaleMismatch { .. } => codes::BAD_PAYLOAD,
            Error::Parse(_) => codes::BAD_PAYLOAD,
            _ => codes::INTERNAL,
        }
    }
}

/// Error codes carried in ERROR frames.
pub mod codes {
    pub const UNSUPPORTED: u16 = 1;
    pub const MODEL_NOT_LINEAR: u16 = 2;
    pub const ORDER_VIOLATION: u16 = 3;
    pub const BUDGET: u16 = 4;
    pub const BAD_PAYLOAD: u16 = 5;
    pub const KEY_MISMATCH: u16 = 6;
    pub const INTERNAL: u16 = 7;
}
