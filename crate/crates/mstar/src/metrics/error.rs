use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("histograms have different bin edges and cannot be compared")]
    EdgeMismatch,
    #[error("corpora use different grids or lengths")]
    GridMismatch,
    #[error("reference has no positive entries")]
    AllZeroReference,
    #[error("both flow totals are zero")]
    BothTotalsZero,
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}
