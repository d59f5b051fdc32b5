use thiserror::Error;

use diffcore::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("box does not intersect the image")]
    EmptyClip,

    #[error("heatmap is constant; min-max normalization undefined")]
    DegenerateHeatmap,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("input image is {got}x{got_h}, model expects {want}x{want}", got_h = .got.1, got = .got.0)]
    BadInputSize { got: (usize, usize), want: usize },

    #[error("image has no pixels")]
    EmptyImage,

    #[error("embedding width {0} must be a positive multiple of 4")]
    BadDim(usize),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("no plausible placement found for seed {seed} after {draws} draws")]
    OracleInfeasible { seed: u64, draws: usize },

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite loss {value} at step {step} (sample {sample})")]
    NonFiniteLoss { step: usize, sample: usize, value: f64 },

    #[error("unknown {kind} `{name}`; registered: {known}")]
    UnknownStrategy { kind: &'static str, name: String, known: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
