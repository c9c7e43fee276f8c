use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("missing counterpart for `{0}`")]
    MissingCounterpart(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("update isolation violated: {0}")]
    Audit(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnknownVersion(u16),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("architecture fingerprint mismatch")]
    FingerprintMismatch,
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("need at least {needed} checkpoints, got {got}")]
    TooFew { needed: usize, got: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Short stable identifier used in machine-parsable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::ChannelMismatch { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::TapeConsumed | Error::NonScalarLoss { .. } => "autograd",
            Error::Diverged { .. } | Error::NonFiniteGradient(_) => "diverged",
            Error::Io { .. } | Error::MissingCounterpart(_) => "io",
            Error::Image { .. } => "image",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::GradCheck(_) => "gradcheck",
            Error::Audit(_) => "audit",
        }
    }

    /// Process exit code for the CLI. Distinct per error family.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "io" => 3,
            "image" => 4,
            "config" => 5,
            "checkpoint" => 6,
            "diverged" => 7,
            "gradcheck" => 8,
            "shape" => 9,
            "invalid_argument" => 10,
            _ => 11,
        }
    }
}
