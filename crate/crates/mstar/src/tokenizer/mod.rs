//! Multi-scale spatiotemporal tokenizer: per-scale spatial embedding, a
//! shared temporal encoder with scale-aware downsampling, shared-codebook
//! residual quantization, progressive decoding, and the three-part training
//! loss.

pub mod forward;
pub mod infer;
pub mod model;
pub mod train;

pub use forward::{
    causal_mask_bias, decode_chain, decode_pyramid, embed_scale, encode_scales, quantize_pyramid,
    tokenizer_loss, tokenizer_loss_with_codes, DecodeChain, QuantizeOutput, TokenizerLossNodes,
};
pub use infer::{encode_to_pyramid, finest_decode_features, reconstruct};
pub use model::{nearest_codeword, TokenPyramid, TokenizerConfig, TokenizerModel};
pub use train::{train_tokenizer, TokenizerEpochLog, TokenizerTrainConfig};
