use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("factor {factor} does not divide grid dimensions {rows}x{cols}")]
    NonDividingFactor {
        factor: usize,
        rows: usize,
        cols: usize,
    },
    #[error("cell id {cell} out of range (grid has {max} cells)")]
    CellOutOfRange { cell: usize, max: usize },
    #[error("scale index {k} out of range 1..={max}")]
    InvalidScaleIndex { k: usize, max: usize },
    #[error("invalid scale ladder: {0}")]
    InvalidLadder(String),
    #[error("archetype mixture must be non-negative and sum to 1, got {0:?}")]
    InvalidMixture([f64; 3]),
    #[error("grid too small for distinct home and work anchors")]
    GridTooSmall,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split ratios must be positive, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("duplicate user id {0}")]
    DuplicateUserId(String),
    #[error("trajectory for user {user}: length {got}, corpus requires {want}")]
    LengthMismatch {
        user: String,
        got: usize,
        want: usize,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: trajectory length {got}, header requires {want}")]
    LineLengthMismatch {
        line: usize,
        got: usize,
        want: usize,
    },
    #[error("line {line}: cell id {cell} out of range (grid has {max} cells)")]
    LineCellOutOfRange {
        line: usize,
        cell: usize,
        max: usize,
    },
    #[error("missing header line")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
