use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {field}: {reason}")]
    InvalidShape { field: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("non-finite value in {0}")]
    NonFiniteValue(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("dimension mismatch for `{tensor}`: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("routing record list is empty")]
    EmptyRecord,

    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}")]
    DivergenceDetected { step: usize },

    #[error("zero-norm vector at token {token}")]
    ZeroVector { token: usize },

    #[error("layer index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("no grid cell retains {target} layers")]
    DepthUnreachable { target: usize },

    #[error("fusion plan does not match model: {0}")]
    PlanModelMismatch(String),

    #[error("invalid fusion plan: {0}")]
    InvalidPlan(String),

    #[error("fusion verification failed [{check}]: {detail}")]
    VerificationFailure { check: String, detail: String },

    #[error("latency must be positive, got {0}")]
    NonPositiveLatency(f64),

    #[error("latency factor of 1 admits no calibration")]
    DegenerateCalibration,

    #[error("assignment list is empty")]
    EmptyAssignments,

    #[error("layer count mismatch: {left} vs {right}")]
    LayerCountMismatch { left: usize, right: usize },
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidConfig(e.to_string())
    }
}
