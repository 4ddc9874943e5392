use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("scale {sigma} below floor {floor}")]
    ScaleBelowFloor { sigma: f64, floor: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("bad magic: expected {expected:?}, got {actual:?}")]
    BadMagic { expected: [u8; 4], actual: [u8; 4] },
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown mode {0}")]
    UnknownMode(u8),
    #[error("length mismatch in {what}: expected {expected} bytes, got {actual}")]
    LengthMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("missing history for device {device}: temporal packet at t={timestamp}")]
    MissingHistory { device: u16, timestamp: u32 },
    #[error("out-of-order timestamp: {got} after {last}")]
    OutOfOrder { last: u32, got: u32 },
    #[error("unknown device {0}")]
    UnknownDevice(u16),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("decoded feature differs from the encoded one for device {device} at t={timestamp}")]
    NotLossless { device: u16, timestamp: u32 },
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("missing checkpoint for grid point {0}")]
    MissingCheckpoint(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(std::path::PathBuf),
    #[error("checkpoint lacks {0}")]
    MissingSection(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
