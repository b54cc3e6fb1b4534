use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("depth distribution is not normalized (max deviation {0:e})")]
    Unnormalized(f64),
    #[error("depth map has no defined cells")]
    NoDefinedCells,
    #[error("no WBF distance threshold for class {0}")]
    MissingThreshold(usize),
    #[error("could not place {boxes} boxes without overlap after {attempts} attempts")]
    Placement { boxes: usize, attempts: usize },
    #[error("frame timestamps are not increasing at frame {0}")]
    Unordered(usize),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
