use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion is not unit-norm (|q| = {norm})")]
    NonUnitQuaternion { norm: f64 },

    #[error("degenerate 6D rotation: {0}")]
    DegenerateRot6D(&'static str),

    #[error("degenerate 6D rotation block for keypoint {keypoint} at step {step}")]
    DegenerateActionRotation { keypoint: &'static str, step: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unknown keypoint `{0}`")]
    UnknownKeypoint(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("not enough future frames: need {required}, have {available}")]
    InsufficientFrames { required: usize, available: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("frame {index}: {source}")]
    AtFrame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("tick {tick}: {source}")]
    AtTick {
        tick: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_frame(self, index: usize) -> Self {
        Error::AtFrame {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_tick(self, tick: usize) -> Self {
        Error::AtTick {
            tick,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
