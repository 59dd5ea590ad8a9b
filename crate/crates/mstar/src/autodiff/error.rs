use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not on this tape")]
    NotOnTape(usize),
    #[error("non-finite value in {context}: {value}")]
    NonFinite { context: String, value: f32 },
    #[error("optimizer step without populated gradients; run backward first")]
    MissingGradients,
    #[error("interpolation target length must be >= 1")]
    ZeroTargetLen,
}
