//! Minimal dense-tensor library with reverse-mode differentiation.
//!
//! The primitive set is exactly what the tokenizer and the next-scale
//! transformer need: matrix multiplies, 1-D convolution, softmax, layer
//! normalization, embedding gather, cross-entropy, temporal resampling in
//! both directions, and the straight-through quantization bridge. Values are
//! 32-bit floats; reductions accumulate in 64-bit.

pub mod error;
pub mod interp;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::AutodiffError;
pub use optim::{CosineSchedule, OptimizerState};
pub use tape::{NodeId, Reduction, Tape};
pub use tensor::{randn_tensor, uniform_tensor, Param, ParamId, ParamStore, Tensor};
